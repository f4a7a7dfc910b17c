"""Synthetic aggressive-motion datasets with exact ground truth.

Worlds are collections of finite planar patches (rooms and boxes), so
ray casting is exact and the true map is known analytically.  Two motion
regimes are generated: "tumble" runs chain free-fall segments with
constant body rates joined by short collision impulses (rates clip the
gyro), and "handheld" runs follow smooth enveloped sum-of-sinusoid pose
trajectories below the clip level.  IMU synthesis places the sensor at a
lever arm from the center of mass, so the measured specific force
carries the centripetal and tangential terms the rate-recovery stage
relies on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import save_dataset
from .geometry import (
    PointCloud,
    Pose,
    right_jacobian,
    rotation_exp,
    rotation_exp_batch,
    rotation_log,
)
from .preintegration import GRAVITY
from .saave import ImuData

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# World geometry


@dataclass
class Patch:
    """Finite rectangle: center, unit normal, in-plane axes and half-extents."""

    center: np.ndarray
    normal: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    half_u: float
    half_v: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.normal = np.asarray(self.normal, dtype=float).reshape(3)
        self.normal = self.normal / np.linalg.norm(self.normal)
        self.u_axis = np.asarray(self.u_axis, dtype=float).reshape(3)
        self.v_axis = np.asarray(self.v_axis, dtype=float).reshape(3)


def _box_patches(lo, hi) -> list[Patch]:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    c = 0.5 * (lo + hi)
    h = 0.5 * (hi - lo)
    patches = []
    for axis in range(3):
        u, v = (axis + 1) % 3, (axis + 2) % 3
        for sign in (-1.0, 1.0):
            center = c.copy()
            center[axis] += sign * h[axis]
            normal = np.zeros(3)
            normal[axis] = sign
            ua, va = np.zeros(3), np.zeros(3)
            ua[u], va[v] = 1.0, 1.0
            patches.append(Patch(center, normal, ua, va, h[u], h[v]))
    return patches


@dataclass
class World:
    """Planar-patch world; rooms face inward, furniture boxes face outward."""

    patches: list

    @staticmethod
    def room(size, boxes: Sequence[tuple] = ()) -> "World":
        """Axis-aligned room [0,size] with optional (lo, hi) boxes inside."""
        patches = _box_patches(np.zeros(3), np.asarray(size, dtype=float))
        for lo, hi in boxes:
            patches.extend(_box_patches(lo, hi))
        return World(patches)

    def raycast(self, origins: np.ndarray, directions: np.ndarray,
                t_min: float = 0.05, t_max: float = 150.0) -> np.ndarray:
        """Smallest hit distance per ray (inf where nothing is hit)."""
        origins = np.atleast_2d(origins)
        directions = np.atleast_2d(directions)
        best = np.full(len(origins), np.inf)
        for p in self.patches:
            denom = directions @ p.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((p.center - origins) @ p.normal) / denom
            hit = np.abs(denom) > 1e-12
            hit &= (t > t_min) & (t < np.minimum(best, t_max))
            if not hit.any():
                continue
            pts = origins[hit] + t[hit, None] * directions[hit]
            rel = pts - p.center
            inside = (np.abs(rel @ p.u_axis) <= p.half_u) & \
                     (np.abs(rel @ p.v_axis) <= p.half_v)
            sel = np.flatnonzero(hit)[inside]
            best[sel] = t[sel]
        return best

    def sample_surface(self, spacing: float = 0.07,
                       rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Dense uniform sampling of every patch (the true map)."""
        pts = []
        for p in self.patches:
            nu = max(int(np.ceil(2 * p.half_u / spacing)), 1)
            nv = max(int(np.ceil(2 * p.half_v / spacing)), 1)
            us = np.linspace(-p.half_u, p.half_u, nu)
            vs = np.linspace(-p.half_v, p.half_v, nv)
            uu, vv = np.meshgrid(us, vs)
            pts.append(p.center
                       + uu.reshape(-1, 1) * p.u_axis
                       + vv.reshape(-1, 1) * p.v_axis)
        return np.vstack(pts)


# ---------------------------------------------------------------------------
# Ground-truth trajectory segments


class _Segment:
    t0: float
    t1: float


@dataclass
class _StaticSeg(_Segment):
    t0: float
    t1: float
    R: np.ndarray
    p: np.ndarray

    def state(self, t):
        n = len(t)
        return (np.broadcast_to(self.R, (n, 3, 3)),
                np.broadcast_to(self.p, (n, 3)).copy(),
                np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)),
                np.tile(np.zeros(3), (n, 1)))


@dataclass
class _BallisticSeg(_Segment):
    t0: float
    t1: float
    R0: np.ndarray
    p0: np.ndarray
    v0: np.ndarray
    omega: np.ndarray   # body frame, constant

    def state(self, t):
        tau = t - self.t0
        R = self.R0 @ rotation_exp_batch(tau[:, None] * self.omega)
        p = self.p0 + tau[:, None] * self.v0 + 0.5 * tau[:, None] ** 2 * GRAVITY
        v = self.v0 + tau[:, None] * GRAVITY
        n = len(t)
        omega = np.broadcast_to(self.omega, (n, 3)).copy()
        return R, p, v, omega, np.zeros((n, 3)), np.tile(GRAVITY, (n, 1))


@dataclass
class _ImpulseSeg(_Segment):
    """Collision window: constant contact acceleration and angular
    acceleration over a short duration; rotation integrated on a fine grid."""

    t0: float
    t1: float
    R0: np.ndarray
    p0: np.ndarray
    v0: np.ndarray
    omega0: np.ndarray
    alpha: np.ndarray     # body angular acceleration, constant
    accel: np.ndarray     # world COM acceleration (gravity + contact)

    def __post_init__(self):
        dur = self.t1 - self.t0
        n = max(int(np.ceil(dur / 1e-5)), 2)
        self._h = dur / n
        grid = [self.R0]
        R = self.R0
        for j in range(n):
            w_mid = self.omega0 + self.alpha * ((j + 0.5) * self._h)
            R = R @ rotation_exp(w_mid * self._h)
            grid.append(R)
        self._grid = np.stack(grid)

    def _rot(self, tau):
        j = np.clip((tau / self._h).astype(int), 0, len(self._grid) - 2)
        frac = tau / self._h - j
        base = self._grid[j]
        w = self.omega0 + self.alpha * (tau[:, None])
        return base @ rotation_exp_batch(frac[:, None] * self._h * w)

    def state(self, t):
        tau = t - self.t0
        R = self._rot(tau)
        p = self.p0 + tau[:, None] * self.v0 + 0.5 * tau[:, None] ** 2 * self.accel
        v = self.v0 + tau[:, None] * self.accel
        omega = self.omega0 + tau[:, None] * self.alpha
        n = len(t)
        alpha = np.broadcast_to(self.alpha, (n, 3)).copy()
        return R, p, v, omega, alpha, np.tile(self.accel, (n, 1))

    def end_state(self):
        t = np.array([self.t1])
        R, p, v, w, _, _ = self.state(t)
        return R[0], p[0], v[0], w[0]


def _smoothstep(x):
    """Quintic smoothstep with zero first and second derivatives at 0 and 1."""
    x = np.clip(x, 0.0, 1.0)
    s = 6 * x ** 5 - 15 * x ** 4 + 10 * x ** 3
    ds = 30 * x ** 4 - 60 * x ** 3 + 30 * x ** 2
    dds = 120 * x ** 3 - 180 * x ** 2 + 60 * x
    return s, ds, dds


@dataclass
class _SinusoidSeg(_Segment):
    """Enveloped sum-of-sinusoids pose trajectory (handheld runs)."""

    t0: float
    t1: float
    p_base: np.ndarray
    trans_amp: np.ndarray    # (H, 3)
    trans_freq: np.ndarray
    trans_phase: np.ndarray
    rot_amp: np.ndarray      # (H, 3) rotation-vector harmonics
    rot_freq: np.ndarray
    rot_phase: np.ndarray
    ramp: float = 0.5

    def _envelope(self, tau):
        T = self.t1 - self.t0
        up, dup, ddup = _smoothstep(tau / self.ramp)
        dn, ddn, dddn = _smoothstep((T - tau) / self.ramp)
        e = up * dn
        de = dup / self.ramp * dn - up * ddn / self.ramp
        dde = (ddup / self.ramp ** 2 * dn - 2 * dup * ddn / self.ramp ** 2
               + up * dddn / self.ramp ** 2)
        return e, de, dde

    def _signal(self, tau, amp, freq, phase):
        w = 2.0 * np.pi * freq                        # (H, 3)
        arg = w[None] * tau[:, None, None] + phase[None]
        x = (amp[None] * np.sin(arg)).sum(axis=1)
        dx = (amp[None] * w[None] * np.cos(arg)).sum(axis=1)
        ddx = -(amp[None] * w[None] ** 2 * np.sin(arg)).sum(axis=1)
        return x, dx, ddx

    def _theta(self, tau):
        e, de, dde = self._envelope(tau)
        x, dx, ddx = self._signal(tau, self.rot_amp, self.rot_freq, self.rot_phase)
        theta = e[:, None] * x
        dtheta = de[:, None] * x + e[:, None] * dx
        return theta, dtheta

    def state(self, t):
        tau = t - self.t0
        e, de, dde = self._envelope(tau)
        x, dx, ddx = self._signal(tau, self.trans_amp, self.trans_freq,
                                  self.trans_phase)
        p = self.p_base + e[:, None] * x
        v = de[:, None] * x + e[:, None] * dx
        a = dde[:, None] * x + 2 * de[:, None] * dx + e[:, None] * ddx
        theta, dtheta = self._theta(tau)
        R = rotation_exp_batch(theta)
        omega = np.einsum("nij,nj->ni",
                          np.stack([right_jacobian(th) for th in theta]), dtheta)
        # Body angular acceleration by central difference of the closed-form
        # rate; accurate to ~1e-12 and only needed for IMU synthesis.
        h = 1e-6
        w_hi = self._rate_only(tau + h)
        w_lo = self._rate_only(np.maximum(tau - h, 0.0))
        alpha = (w_hi - w_lo) / (2.0 * h)
        return R, p, v, omega, alpha, a

    def _rate_only(self, tau):
        theta, dtheta = self._theta(tau)
        return np.einsum("nij,nj->ni",
                         np.stack([right_jacobian(th) for th in theta]), dtheta)


class GroundTruth:
    """Piecewise trajectory queryable at any time in [0, duration]."""

    def __init__(self, segments):
        self.segments = segments
        self.starts = np.array([s.t0 for s in segments])
        self.t_end = segments[-1].t1

    def _batch(self, times):
        times = np.atleast_1d(np.asarray(times, dtype=float))
        times = np.clip(times, 0.0, self.t_end)
        seg_idx = np.clip(np.searchsorted(self.starts, times, side="right") - 1,
                          0, len(self.segments) - 1)
        R = np.zeros((len(times), 3, 3))
        p = np.zeros((len(times), 3))
        v = np.zeros((len(times), 3))
        w = np.zeros((len(times), 3))
        al = np.zeros((len(times), 3))
        ac = np.zeros((len(times), 3))
        for s in np.unique(seg_idx):
            m = seg_idx == s
            R[m], p[m], v[m], w[m], al[m], ac[m] = self.segments[s].state(times[m])
        return R, p, v, w, al, ac

    def poses(self, times):
        R, p, _, _, _, _ = self._batch(times)
        return R, p

    def velocities(self, times):
        return self._batch(times)[2]

    def body_rates(self, times):
        return self._batch(times)[3]

    def state_arrays(self, times):
        return self._batch(times)

    def pose(self, t) -> Pose:
        R, p = self.poses([t])
        return Pose(R[0], p[0])

    def relative_pose(self, t0, t1) -> Pose:
        return self.pose(t0).inverse().compose(self.pose(t1))


# ---------------------------------------------------------------------------
# Scenario description


@dataclass
class TumbleSegmentSpec:
    """One free-fall plateau: constant body rates and launch velocity."""

    omega: np.ndarray
    velocity: np.ndarray
    duration: float

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)


@dataclass
class LidarSpec:
    beam_count: int = 16
    vertical_fov: float = np.deg2rad(30.0)
    azimuth_steps: int = 360
    scan_period: float = 0.1
    range_noise: float = 0.02
    max_range: float = 150.0
    min_range: float = 0.3


@dataclass
class Scenario:
    """Complete description of one synthetic run."""

    name: str
    mode: str                       # "tumble" or "handheld"
    world_size: np.ndarray
    world_boxes: list = field(default_factory=list)
    start_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    lead_in: float = 0.3
    lead_out: float = 0.3
    segments: list = field(default_factory=list)   # TumbleSegmentSpec
    impulse_duration: float = 0.01
    trans_harmonics: Optional[dict] = None          # handheld
    rot_harmonics: Optional[dict] = None
    active_duration: float = 6.0                    # handheld
    ramp: float = 0.5
    com_to_imu: np.ndarray = field(default_factory=lambda: np.array([0.03, 0.11, 0.02]))
    gyro_noise: float = 5.2e-3      # rad/s, per axis per sample
    accel_noise: float = 0.02       # m/s^2
    gyro_clip: float = 10.5         # rad/s
    accel_clip: float = 160.0       # m/s^2
    imu_period: float = 0.01
    lidar: LidarSpec = field(default_factory=LidarSpec)

    def __post_init__(self):
        self.world_size = np.asarray(self.world_size, dtype=float).reshape(3)
        self.start_position = np.asarray(self.start_position, dtype=float).reshape(3)
        self.com_to_imu = np.asarray(self.com_to_imu, dtype=float).reshape(3)
        if self.mode not in ("tumble", "handheld"):
            raise ValueError(f"unknown scenario mode {self.mode!r}")

    def world(self) -> World:
        return World.room(self.world_size, self.world_boxes)

    def duration(self) -> float:
        s = self.lidar.scan_period
        if self.mode == "handheld":
            raw = self.active_duration
        else:
            raw = (self.lead_in + sum(seg.duration for seg in self.segments)
                   + self.impulse_duration * len(self.segments) + self.lead_out)
        return float(np.ceil(raw / s - 1e-9) * s)


# ---------------------------------------------------------------------------
# Generation


def generate_trajectory(scenario: Scenario) -> GroundTruth:
    """Closed-form ground truth for a scenario."""
    if scenario.mode == "handheld":
        return _generate_handheld(scenario)
    return _generate_tumble(scenario)


def _generate_handheld(scenario: Scenario) -> GroundTruth:
    dur = scenario.duration()
    th = scenario.trans_harmonics or {}
    rh = scenario.rot_harmonics or {}
    seg = _SinusoidSeg(
        0.0, dur, scenario.start_position,
        np.asarray(th.get("amplitude"), dtype=float),
        np.asarray(th.get("frequency"), dtype=float),
        np.asarray(th.get("phase"), dtype=float),
        np.asarray(rh.get("amplitude"), dtype=float),
        np.asarray(rh.get("frequency"), dtype=float),
        np.asarray(rh.get("phase"), dtype=float),
        ramp=scenario.ramp,
    )
    return GroundTruth([seg])


def _generate_tumble(scenario: Scenario) -> GroundTruth:
    dur = scenario.duration()
    segs: list = []
    t = scenario.lead_in
    R = np.eye(3)
    p = scenario.start_position.copy()
    segs.append(_StaticSeg(0.0, t, np.eye(3), p.copy()))
    v = np.zeros(3)
    w = np.zeros(3)
    d_imp = scenario.impulse_duration
    for spec in scenario.segments:
        # Collision impulse carries the state to the segment's launch values.
        alpha = (spec.omega - w) / d_imp
        accel = GRAVITY + (spec.velocity - v) / d_imp
        imp = _ImpulseSeg(t, t + d_imp, R, p.copy(), v.copy(), w.copy(),
                          alpha, accel)
        segs.append(imp)
        R, p, v, w = imp.end_state()
        t += d_imp
        seg = _BallisticSeg(t, t + spec.duration, R, p.copy(), v.copy(),
                            spec.omega.copy())
        segs.append(seg)
        t += spec.duration
        tail = np.array([t])
        R_, p_, v_, w_, _, _ = seg.state(tail)
        R, p, v, w = R_[0], p_[0], v_[0], w_[0]
    # Final collision back to rest, then hold static until the duration end.
    alpha = (np.zeros(3) - w) / d_imp
    accel = GRAVITY + (np.zeros(3) - v) / d_imp
    imp = _ImpulseSeg(t, t + d_imp, R, p.copy(), v.copy(), w.copy(), alpha, accel)
    segs.append(imp)
    R, p, v, w = imp.end_state()
    t += d_imp
    segs.append(_StaticSeg(t, max(dur, t), R, p))
    return GroundTruth(segs)


def synthesize_imu(gt: GroundTruth, scenario: Scenario,
                   rng: np.random.Generator) -> tuple[ImuData, np.ndarray]:
    """Noisy, clipped IMU stream plus the true body rates.

    The accelerometer sits at ``com_to_imu`` from the center of mass, so
    its specific force includes the lever-arm tangential and centripetal
    terms on top of the body-frame specific force at the COM.
    """
    q = scenario.imu_period
    n = int(round(gt.t_end / q)) + 1
    times = np.arange(n) * q
    R, p, v, w, alpha, a_com = gt.state_arrays(times)
    t_arm = scenario.com_to_imu
    spec_force_com = np.einsum("nji,nj->ni", R, a_com - GRAVITY)
    lever = (np.cross(alpha, np.broadcast_to(t_arm, (n, 3)))
             + np.cross(w, np.cross(w, np.broadcast_to(t_arm, (n, 3)))))
    accel_true = spec_force_com + lever

    gyro = w + rng.normal(0.0, scenario.gyro_noise, (n, 3))
    accel = accel_true + rng.normal(0.0, scenario.accel_noise, (n, 3))
    gyro_sat = np.abs(gyro) >= scenario.gyro_clip
    accel_sat = np.abs(accel) >= scenario.accel_clip
    gyro = np.clip(gyro, -scenario.gyro_clip, scenario.gyro_clip)
    accel = np.clip(accel, -scenario.accel_clip, scenario.accel_clip)
    return ImuData(times, gyro, accel, gyro_sat, accel_sat), w


def synthesize_scan(gt: GroundTruth, world: World, scenario: Scenario,
                    t_start: float, rng: np.random.Generator,
                    ) -> tuple[PointCloud, PointCloud]:
    """One skewed scan plus its skew-free counterpart.

    Rays are cast from the true pose at each firing time; each return is
    stored in the firing-time sensor frame (what a real driver outputs,
    and what produces skew when the scan is treated as rigid).  The
    static variant stores the same noisy world points relative to the
    scan-start pose, giving a paired skew-free reference.
    """
    lid = scenario.lidar
    elev = np.linspace(-0.5 * lid.vertical_fov, 0.5 * lid.vertical_fov,
                       lid.beam_count)
    az = 2.0 * np.pi * np.arange(lid.azimuth_steps) / lid.azimuth_steps
    rel_t = lid.scan_period * np.arange(lid.azimuth_steps) / lid.azimuth_steps
    dirs = np.stack([
        np.cos(elev)[None, :] * np.cos(az)[:, None],
        np.cos(elev)[None, :] * np.sin(az)[:, None],
        np.broadcast_to(np.sin(elev)[None, :], (lid.azimuth_steps, lid.beam_count)),
    ], axis=-1)                                     # (A, B, 3) sensor frame

    R, p = gt.poses(t_start + rel_t)                # (A, 3, 3), (A, 3)
    dirs_world = np.einsum("aij,abj->abi", R, dirs)
    origins = np.repeat(p, lid.beam_count, axis=0)
    flat_dirs = dirs_world.reshape(-1, 3)
    ranges = world.raycast(origins, flat_dirs, t_min=lid.min_range,
                           t_max=lid.max_range)
    hit = np.isfinite(ranges)
    if not hit.any():
        log.warning("scan at t=%.2f produced no returns", t_start)
        empty = PointCloud(np.zeros((0, 3)), np.zeros(0))
        return empty, empty

    noisy = ranges[hit] + rng.normal(0.0, lid.range_noise, int(hit.sum()))
    flat_sensor_dirs = dirs.reshape(-1, 3)[hit]
    rel_times = np.repeat(rel_t, lid.beam_count)[hit]
    skewed = PointCloud(noisy[:, None] * flat_sensor_dirs, rel_times)

    world_pts = origins[hit] + noisy[:, None] * flat_dirs[hit]
    R0, p0 = gt.poses(np.array([t_start]))
    static_pts = (world_pts - p0[0]) @ R0[0]
    static = PointCloud(static_pts, rel_times.copy())
    return skewed, static


def export_dataset(scenario: Scenario, seed: int, out_dir,
                   gt: Optional[GroundTruth] = None) -> Path:
    """Generate and write a full dataset directory for one scenario."""
    rng = np.random.default_rng(seed)
    if gt is None:
        gt = generate_trajectory(scenario)
    world = scenario.world()
    imu, true_rates = synthesize_imu(gt, scenario, rng)
    s = scenario.lidar.scan_period
    n_scans = int(round(gt.t_end / s))
    scans = []
    for k in range(n_scans):
        skewed, _ = synthesize_scan(gt, world, scenario, k * s, rng)
        scans.append(skewed)
    gt_times = np.arange(0.0, gt.t_end + 1e-9, 0.005)   # 200 Hz
    R, p = gt.poses(gt_times)
    meta = {
        "scenario": scenario.name,
        "mode": scenario.mode,
        "seed": int(seed),
        "scan_period": float(s),
        "imu_period": float(scenario.imu_period),
        "duration": float(gt.t_end),
        "gyro_clip": float(scenario.gyro_clip),
        "com_to_imu": [float(x) for x in scenario.com_to_imu],
    }
    return save_dataset(out_dir, scans, imu, meta,
                        gt_traj=(gt_times, R, p),
                        gt_rates=(imu.times, true_rates),
                        gt_map=world.sample_surface())
