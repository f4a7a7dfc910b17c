"""Dataset layout and CSV schemas shared by the simulator, mapper, and CLI.

A dataset directory contains::

    scans/000000.csv   per-point x,y,z,rel_time (sensor frame)
    imu.csv            time,wx,wy,wz,ax,ay,az[,sat_x,sat_y,sat_z]
    meta.yaml          scan_period, imu_period, and free-form metadata
    gt_traj.csv        optional: time,x,y,z,qx,qy,qz,qw
    gt_rates.csv       optional: time,wx,wy,wz (true body rates)
    gt_map.csv         optional: x,y,z dense sampling of the world

Pipeline outputs written next to it: ``traj.csv`` (IMU-rate states with
velocity), ``map.csv`` (x,y,z,nx,ny,nz), ``rates.csv``
(time,wx,wy,wz,var_wx,var_wy,var_wz), ``diagnostics.json``.

All floats are written with 17 significant digits so values round-trip
bit-exact through the CSV form.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from scipy.spatial.transform import Rotation as ScipyRotation

from .geometry import PointCloud, Trajectory
from .saave import ImuData, RateSeries

_FMT = "%.17g"


def _write_csv(path, header: str, array: np.ndarray) -> None:
    array = np.atleast_2d(np.asarray(array, dtype=float))
    np.savetxt(path, array, fmt=_FMT, delimiter=",", header=header, comments="")


def _read_csv(path, expected_prefix: str) -> np.ndarray:
    with open(path, "r") as fh:
        first = fh.readline().strip()
    if not first.startswith(expected_prefix.split(",")[0]):
        raise ValueError(f"{path}: expected header starting with "
                         f"{expected_prefix!r}, got {first!r}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data


def write_imu_csv(path, imu: ImuData, include_flags: bool = True) -> None:
    cols = [imu.times[:, None], imu.angular_velocity, imu.specific_force]
    header = "time,wx,wy,wz,ax,ay,az"
    if include_flags:
        cols.append(imu.gyro_saturated.astype(float))
        header += ",sat_x,sat_y,sat_z"
    _write_csv(path, header, np.hstack(cols))


def read_imu_csv(path) -> ImuData:
    data = _read_csv(path, "time")
    if data.shape[1] not in (7, 10):
        raise ValueError(f"{path}: expected 7 or 10 columns, got {data.shape[1]}")
    flags = data[:, 7:10].astype(bool) if data.shape[1] == 10 else None
    return ImuData(data[:, 0], data[:, 1:4], data[:, 4:7], gyro_saturated=flags)


def write_rates_csv(path, rates: RateSeries) -> None:
    _write_csv(path, "time,wx,wy,wz,var_wx,var_wy,var_wz",
               np.hstack([rates.times[:, None], rates.mean, rates.variance]))


def read_rates_csv(path) -> RateSeries:
    data = _read_csv(path, "time")
    return RateSeries(data[:, 0], data[:, 1:4], data[:, 4:7])


def write_scan_csv(path, cloud: PointCloud) -> None:
    _write_csv(path, "x,y,z,rel_time",
               np.hstack([cloud.points, cloud.rel_times[:, None]]))


def read_scan_csv(path) -> PointCloud:
    data = _read_csv(path, "x")
    return PointCloud(data[:, 0:3], data[:, 3])


def write_traj_csv(path, traj: Trajectory) -> None:
    quat = ScipyRotation.from_matrix(traj.rotations).as_quat()  # x, y, z, w
    _write_csv(path, "time,x,y,z,qx,qy,qz,qw,vx,vy,vz",
               np.hstack([traj.times[:, None], traj.positions, quat,
                          traj.velocities]))


def read_traj_csv(path) -> Trajectory:
    data = _read_csv(path, "time")
    rots = ScipyRotation.from_quat(data[:, 4:8]).as_matrix()
    vel = data[:, 8:11] if data.shape[1] >= 11 else _fd_velocities(data[:, 0],
                                                                   data[:, 1:4])
    return Trajectory(data[:, 0], rots, data[:, 1:4], vel)


def _fd_velocities(times, positions):
    vel = np.gradient(positions, times, axis=0)
    return vel


def write_gt_traj_csv(path, times, rotations, positions) -> None:
    quat = ScipyRotation.from_matrix(rotations).as_quat()
    _write_csv(path, "time,x,y,z,qx,qy,qz,qw",
               np.hstack([np.asarray(times)[:, None], positions, quat]))


def read_gt_traj_csv(path) -> Trajectory:
    data = _read_csv(path, "time")
    rots = ScipyRotation.from_quat(data[:, 4:8]).as_matrix()
    return Trajectory(data[:, 0], rots, data[:, 1:4],
                      _fd_velocities(data[:, 0], data[:, 1:4]))


def write_map_csv(path, points: np.ndarray, normals: np.ndarray) -> None:
    _write_csv(path, "x,y,z,nx,ny,nz", np.hstack([points, normals]))


def read_map_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = _read_csv(path, "x")
    return data[:, 0:3], data[:, 3:6]


def write_gt_map_csv(path, points: np.ndarray) -> None:
    _write_csv(path, "x,y,z", points)


def read_gt_map_csv(path) -> np.ndarray:
    return _read_csv(path, "x")[:, 0:3]


def write_gt_rates_csv(path, times, rates) -> None:
    _write_csv(path, "time,wx,wy,wz",
               np.hstack([np.asarray(times)[:, None], rates]))


def read_gt_rates_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = _read_csv(path, "time")
    return data[:, 0], data[:, 1:4]


@dataclass
class Dataset:
    """A loaded run: scans, IMU stream, timing metadata, optional truth."""

    root: Path
    meta: dict
    scans: list            # list[PointCloud], scan k starts at k * scan_period
    imu: ImuData
    gt_traj: Optional[Trajectory] = None
    gt_rates: Optional[tuple] = None      # (times, rates)
    gt_map: Optional[np.ndarray] = None

    @property
    def scan_period(self) -> float:
        return float(self.meta["scan_period"])

    @property
    def imu_period(self) -> float:
        return float(self.meta["imu_period"])

    def scan_start(self, k: int) -> float:
        return k * self.scan_period


def save_dataset(root, scans, imu: ImuData, meta: dict,
                 gt_traj: Optional[tuple] = None,
                 gt_rates: Optional[tuple] = None,
                 gt_map: Optional[np.ndarray] = None) -> Path:
    """Write a dataset directory; ``gt_traj`` is (times, rotations, positions)."""
    root = Path(root)
    (root / "scans").mkdir(parents=True, exist_ok=True)
    for k, scan in enumerate(scans):
        write_scan_csv(root / "scans" / f"{k:06d}.csv", scan)
    write_imu_csv(root / "imu.csv", imu)
    with open(root / "meta.yaml", "w") as fh:
        yaml.safe_dump(meta, fh, sort_keys=True)
    if gt_traj is not None:
        write_gt_traj_csv(root / "gt_traj.csv", *gt_traj)
    if gt_rates is not None:
        write_gt_rates_csv(root / "gt_rates.csv", *gt_rates)
    if gt_map is not None:
        write_gt_map_csv(root / "gt_map.csv", gt_map)
    return root


def load_dataset(root) -> Dataset:
    """Load and validate a dataset directory."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    meta_path = root / "meta.yaml"
    if not meta_path.exists():
        raise FileNotFoundError(f"missing meta.yaml in {root}")
    with open(meta_path) as fh:
        meta = yaml.safe_load(fh)
    for key in ("scan_period", "imu_period"):
        if key not in meta:
            raise ValueError(f"meta.yaml missing required key {key!r}")
    scan_dir = root / "scans"
    scan_files = sorted(scan_dir.glob("*.csv")) if scan_dir.is_dir() else []
    if not scan_files:
        raise FileNotFoundError(f"no scans found under {scan_dir}")
    scans = [read_scan_csv(p) for p in scan_files]
    imu = read_imu_csv(root / "imu.csv")
    s = float(meta["scan_period"])
    span_needed = len(scans) * s
    if imu.times[0] > 1e-9 or imu.times[-1] < span_needed - 1e-9:
        raise ValueError(
            f"IMU stream [{imu.times[0]}, {imu.times[-1]}] does not cover the "
            f"scan span [0, {span_needed}]")
    for k, scan in enumerate(scans):
        if len(scan) and (scan.rel_times.min() < -1e-9
                          or scan.rel_times.max() > s + 1e-9):
            raise ValueError(f"scan {k} has rel_times outside [0, {s}]")
    gt_traj = None
    if (root / "gt_traj.csv").exists():
        gt_traj = read_gt_traj_csv(root / "gt_traj.csv")
    gt_rates = None
    if (root / "gt_rates.csv").exists():
        gt_rates = read_gt_rates_csv(root / "gt_rates.csv")
    gt_map = None
    if (root / "gt_map.csv").exists():
        gt_map = read_gt_map_csv(root / "gt_map.csv")
    return Dataset(root, meta, scans, imu, gt_traj, gt_rates, gt_map)


def write_diagnostics(path, diagnostics) -> None:
    with open(path, "w") as fh:
        json.dump(diagnostics, fh, indent=2, sort_keys=True)
