"""Scenario construction, serialization, and the bundled benchmark suite.

Scenario files are YAML (schema documented in the README).  The bundled
suite holds 8 tumble runs (peak rates spanning the gyro clip level, 2-5
collisions each) and 8 handheld runs (fast but unsaturated), all
deterministic given their seeds.  The ``STRETCHSLAM_SCENARIOS``
environment variable points scenario-name resolution at a different
directory.
"""

from __future__ import annotations

import os
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .simulator import LidarSpec, Scenario, TumbleSegmentSpec, generate_trajectory

_ENV_DIR = "STRETCHSLAM_SCENARIOS"

TUMBLE_NAMES = tuple(f"tumble-{i:02d}" for i in range(1, 9))
HANDHELD_NAMES = tuple(f"handheld-{i:02d}" for i in range(1, 9))
SUITE_NAMES = TUMBLE_NAMES + HANDHELD_NAMES

_TUMBLE_PEAKS = (8.0, 9.5, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0)
_TUMBLE_COLLISIONS = (2, 3, 3, 4, 4, 5, 5, 5)
_HANDHELD_PEAKS = (4.0, 4.3, 4.6, 4.9, 5.2, 5.5, 5.8, 6.0)

_TUMBLE_BOXES = [
    ([2.0, 1.0, 0.0], [4.0, 2.5, 1.5]),
    ([7.0, 8.0, 0.0], [9.0, 9.5, 2.0]),
    ([11.0, 1.5, 0.0], [13.0, 3.0, 1.8]),
    ([5.0, 8.2, 0.0], [6.5, 9.5, 1.2]),
]
_HANDHELD_BOXES = [
    ([1.0, 1.0, 0.0], [2.5, 2.2, 1.4]),
    ([7.5, 5.8, 0.0], [9.0, 7.0, 1.8]),
    ([4.0, 6.5, 0.0], [5.5, 7.6, 1.0]),
]


def tumble_scenario(name: str, seed: int, peak_rate: float,
                    n_collisions: int) -> Scenario:
    """Bouncing free-fall run: plateaus of constant rate joined by impulses.

    The rotation axis stays near the body x axis so only one gyro axis
    clips; vertical launch speeds are chosen so each ballistic arc
    returns to its bounce height and the rig stays inside the room.
    """
    rng = np.random.default_rng(seed)
    n_segments = n_collisions + 1
    vx = rng.uniform(1.9, 2.7)
    heading = rng.uniform(-0.25, 0.25)
    segments = []
    for k in range(n_segments):
        ramp = min(1.0, 0.7 + 0.3 * k)          # rate builds then decays
        decay = 0.88 ** max(0, k - 1)
        magnitude = peak_rate * ramp * decay
        axis = np.array([1.0, rng.uniform(-0.25, 0.25), rng.uniform(-0.2, 0.2)])
        axis /= np.linalg.norm(axis)
        vz = rng.uniform(1.2, 2.2)
        velocity = np.array([vx * (0.96 ** k),
                             np.sin(heading) * vx * 0.4 + rng.uniform(-0.2, 0.2),
                             vz])
        segments.append(TumbleSegmentSpec(magnitude * axis, velocity,
                                          2.0 * vz / 9.81))
    return Scenario(
        name=name,
        mode="tumble",
        world_size=[16.0, 10.0, 5.0],
        world_boxes=[(np.array(lo), np.array(hi)) for lo, hi in _TUMBLE_BOXES],
        start_position=np.array([3.0, 5.0, 1.6]),
        segments=segments,
    )


def handheld_scenario(name: str, seed: int, peak_rate: float) -> Scenario:
    """Fast indoor run: enveloped sum-of-sinusoids, no gyro saturation.

    Rotation amplitudes are calibrated so the peak body rate lands on
    ``peak_rate``; translation accelerations stay well below the
    accelerometer clip.
    """
    rng = np.random.default_rng(seed)
    n_h = 2
    t_freq = rng.uniform(0.5, 1.5, (n_h, 3))
    t_amp = np.minimum(rng.uniform(0.15, 0.45, (n_h, 3)),
                       15.0 / (2.0 * np.pi * t_freq) ** 2)
    t_phase = rng.uniform(0.0, 2.0 * np.pi, (n_h, 3))
    r_freq = rng.uniform(0.8, 1.8, (n_h, 3))
    r_amp = rng.uniform(0.3, 0.7, (n_h, 3))
    r_phase = rng.uniform(0.0, 2.0 * np.pi, (n_h, 3))

    def build(scale):
        return Scenario(
            name=name,
            mode="handheld",
            world_size=[10.0, 8.0, 4.0],
            world_boxes=[(np.array(lo), np.array(hi)) for lo, hi in _HANDHELD_BOXES],
            start_position=np.array([5.0, 4.0, 1.7]),
            trans_harmonics={"amplitude": t_amp, "frequency": t_freq,
                             "phase": t_phase},
            rot_harmonics={"amplitude": r_amp * scale, "frequency": r_freq,
                           "phase": r_phase},
            active_duration=6.0,
        )

    scale = 1.0
    for _ in range(2):
        gt = generate_trajectory(build(scale))
        grid = np.linspace(0.0, gt.t_end, 600)
        peak = np.max(np.linalg.norm(gt.body_rates(grid), axis=1))
        scale *= peak_rate / peak
    return build(scale)


def build_default_suite() -> dict:
    """The 16 deterministic benchmark scenarios, keyed by name."""
    suite = {}
    for i, name in enumerate(TUMBLE_NAMES):
        suite[name] = tumble_scenario(name, seed=1000 + i,
                                      peak_rate=_TUMBLE_PEAKS[i],
                                      n_collisions=_TUMBLE_COLLISIONS[i])
    for i, name in enumerate(HANDHELD_NAMES):
        suite[name] = handheld_scenario(name, seed=2000 + i,
                                        peak_rate=_HANDHELD_PEAKS[i])
    return suite


# ---------------------------------------------------------------------------
# YAML serialization


def scenario_to_dict(sc: Scenario) -> dict:
    d = {
        "name": sc.name,
        "mode": sc.mode,
        "world": {
            "size": [float(x) for x in sc.world_size],
            "boxes": [[[float(x) for x in lo], [float(x) for x in hi]]
                      for lo, hi in sc.world_boxes],
        },
        "start_position": [float(x) for x in sc.start_position],
        "imu": {
            "com_to_imu": [float(x) for x in sc.com_to_imu],
            "gyro_noise": float(sc.gyro_noise),
            "accel_noise": float(sc.accel_noise),
            "gyro_clip": float(sc.gyro_clip),
            "accel_clip": float(sc.accel_clip),
            "period": float(sc.imu_period),
        },
        "lidar": {
            "beam_count": int(sc.lidar.beam_count),
            "vertical_fov_deg": float(np.rad2deg(sc.lidar.vertical_fov)),
            "azimuth_steps": int(sc.lidar.azimuth_steps),
            "scan_period": float(sc.lidar.scan_period),
            "range_noise": float(sc.lidar.range_noise),
            "max_range": float(sc.lidar.max_range),
            "min_range": float(sc.lidar.min_range),
        },
    }
    if sc.mode == "tumble":
        d["lead_in"] = float(sc.lead_in)
        d["lead_out"] = float(sc.lead_out)
        d["impulse_duration"] = float(sc.impulse_duration)
        d["segments"] = [{
            "omega": [float(x) for x in seg.omega],
            "velocity": [float(x) for x in seg.velocity],
            "duration": float(seg.duration),
        } for seg in sc.segments]
    else:
        d["active_duration"] = float(sc.active_duration)
        d["ramp"] = float(sc.ramp)
        d["translation"] = _harmonics_to_dict(sc.trans_harmonics)
        d["rotation"] = _harmonics_to_dict(sc.rot_harmonics)
    return d


def _harmonics_to_dict(h: dict) -> dict:
    return {k: np.asarray(h[k], dtype=float).tolist()
            for k in ("amplitude", "frequency", "phase")}


def scenario_from_dict(d: dict) -> Scenario:
    lid = d.get("lidar", {})
    lidar = LidarSpec(
        beam_count=int(lid.get("beam_count", 16)),
        vertical_fov=np.deg2rad(float(lid.get("vertical_fov_deg", 30.0))),
        azimuth_steps=int(lid.get("azimuth_steps", 360)),
        scan_period=float(lid.get("scan_period", 0.1)),
        range_noise=float(lid.get("range_noise", 0.02)),
        max_range=float(lid.get("max_range", 150.0)),
        min_range=float(lid.get("min_range", 0.3)),
    )
    imu = d.get("imu", {})
    world = d.get("world", {})
    kwargs = dict(
        name=d["name"],
        mode=d["mode"],
        world_size=world.get("size", [10.0, 8.0, 4.0]),
        world_boxes=[(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
                     for lo, hi in world.get("boxes", [])],
        start_position=d.get("start_position", [0.0, 0.0, 0.0]),
        com_to_imu=imu.get("com_to_imu", [0.03, 0.11, 0.02]),
        gyro_noise=float(imu.get("gyro_noise", 5.2e-3)),
        accel_noise=float(imu.get("accel_noise", 0.02)),
        gyro_clip=float(imu.get("gyro_clip", 10.5)),
        accel_clip=float(imu.get("accel_clip", 160.0)),
        imu_period=float(imu.get("period", 0.01)),
        lidar=lidar,
    )
    if d["mode"] == "tumble":
        kwargs.update(
            lead_in=float(d.get("lead_in", 0.3)),
            lead_out=float(d.get("lead_out", 0.3)),
            impulse_duration=float(d.get("impulse_duration", 0.01)),
            segments=[TumbleSegmentSpec(s["omega"], s["velocity"],
                                        float(s["duration"]))
                      for s in d.get("segments", [])],
        )
    else:
        kwargs.update(
            active_duration=float(d.get("active_duration", 6.0)),
            ramp=float(d.get("ramp", 0.5)),
            trans_harmonics={k: np.asarray(v, dtype=float)
                             for k, v in d["translation"].items()},
            rot_harmonics={k: np.asarray(v, dtype=float)
                           for k, v in d["rotation"].items()},
        )
    return Scenario(**kwargs)


def save_scenario(sc: Scenario, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(scenario_to_dict(sc), fh, sort_keys=False)


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return scenario_from_dict(yaml.safe_load(fh))


def bundled_scenario_dir() -> Path:
    return Path(resources.files("stretchslam") / "scenarios")


def resolve_scenario(name_or_path) -> Scenario:
    """Find a scenario by file path, then by name in the override
    directory (``STRETCHSLAM_SCENARIOS``), then among the bundled files."""
    p = Path(name_or_path)
    if p.suffix in (".yaml", ".yml") and p.exists():
        return load_scenario(p)
    override = os.environ.get(_ENV_DIR)
    candidates = []
    if override:
        candidates.append(Path(override) / f"{name_or_path}.yaml")
    candidates.append(bundled_scenario_dir() / f"{name_or_path}.yaml")
    for c in candidates:
        if c.exists():
            return load_scenario(c)
    raise FileNotFoundError(
        f"scenario {name_or_path!r} not found (looked for a YAML file, then in "
        f"${_ENV_DIR}, then among bundled scenarios: {', '.join(SUITE_NAMES)})")


def write_bundled_suite(directory=None) -> list:
    """Write every default-suite scenario as YAML (used to (re)generate
    the files shipped with the package)."""
    directory = Path(directory) if directory else bundled_scenario_dir()
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, sc in build_default_suite().items():
        path = directory / f"{name}.yaml"
        save_scenario(sc, path)
        written.append(path)
    return written
