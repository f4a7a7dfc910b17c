"""Scan-to-map SLAM loop: pre-process, register, merge, maintain.

The map keeps at most one point per maintenance voxel and a surface
normal per point, recomputed locally after every merge.  Scans are
processed sequentially; each registration starts from the end of the
previous intra-scan trajectory, so in stretch mode the accumulated
trajectory is continuous across scan boundaries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .dataset import Dataset
from .errors import DegenerateGeometryError, RegistrationError
from .geometry import ImuState, NnIndex, PointCloud, Pose, Trajectory, pose_distance
from .preintegration import GRAVITY, NoiseSpec, compensate_lever_arm
from .registration import (
    PreprocessConfig,
    StretchConfig,
    deskew,
    input_filters,
    prior_trajectory,
    register,
)
from .saave import GpConfig, ImuData, LeverArmConfig, RateSeries, rates_from_raw, saave_run

log = logging.getLogger(__name__)


def compute_normals(points: np.ndarray, k: int = 20,
                    view_origin: Optional[np.ndarray] = None,
                    tree: Optional[cKDTree] = None,
                    subset: Optional[np.ndarray] = None,
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Surface normals from the k-nearest-neighbor covariance.

    The normal is the smallest-eigenvector of each point's neighborhood
    covariance (the point plus its k nearest others; all others when the
    cloud is small).  Normals are oriented toward ``view_origin`` when
    given.  Returns (normals, valid) where degenerate neighborhoods
    (rank < 2) are flagged invalid.
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    if n < 3:
        return np.tile([0.0, 0.0, 1.0], (n, 1)), np.zeros(n, dtype=bool)
    if tree is None:
        tree = cKDTree(points)
    if subset is None:
        subset = np.arange(n)
    k_eff = min(k + 1, n)  # +1: the query point itself is its own neighbor
    _, idx = tree.query(points[subset], k=k_eff)
    neigh = points[idx]                               # (m, k_eff, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", centered, centered) / k_eff
    eigvals, eigvecs = np.linalg.eigh(cov)
    normals = eigvecs[:, :, 0]
    valid = eigvals[:, 1] > np.maximum(1e-12, 1e-6 * eigvals[:, 2])
    if view_origin is not None:
        to_origin = np.asarray(view_origin, dtype=float) - points[subset]
        flip = np.einsum("mi,mi->m", normals, to_origin) < 0.0
        normals[flip] = -normals[flip]
    return normals, valid


@dataclass
class Map:
    """Point map with per-point normals and a density cap.

    ``maintenance_voxel`` bounds the density: after every merge at most
    one point survives per voxel cell, earliest-inserted first.
    """

    maintenance_voxel: float = 0.10
    normal_neighbors: int = 20
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normal_valid: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self):
        self._tree: Optional[cKDTree] = None
        self._index: Optional[NnIndex] = None

    def __len__(self) -> int:
        return len(self.points)

    def _cells(self, pts: np.ndarray) -> np.ndarray:
        return np.floor(pts / self.maintenance_voxel).astype(np.int64)

    def merge(self, cloud: PointCloud, sensor_origin: np.ndarray) -> int:
        """Insert a deskewed (map-frame) cloud, keeping the density cap.

        Existing points win their voxel cells; within the new cloud the
        first point per cell wins.  Normals are recomputed for the new
        points and for existing points near them.  Returns the number of
        points added.
        """
        pts = np.asarray(cloud.points, dtype=float)
        if len(pts) == 0:
            return 0
        new_cells = self._cells(pts)
        _, first = np.unique(new_cells, axis=0, return_index=True)
        pts = pts[np.sort(first)]
        if len(self.points):
            occupied = {tuple(c) for c in self._cells(self.points)}
            keep = np.array([tuple(c) not in occupied for c in self._cells(pts)])
            pts = pts[keep]
        if len(pts) == 0:
            return 0

        n_old = len(self.points)
        self.points = np.vstack([self.points, pts]) if n_old else pts
        self.normals = np.vstack([self.normals, np.zeros_like(pts)]) if n_old \
            else np.zeros_like(pts)
        self.normal_valid = np.concatenate(
            [self.normal_valid, np.zeros(len(pts), dtype=bool)])
        self._tree = cKDTree(self.points)
        self._index = None

        # Refresh normals for the new points and their disturbed neighbors.
        affected = set(range(n_old, len(self.points)))
        if n_old:
            radius = 3.0 * self.maintenance_voxel
            for hits in self._tree.query_ball_point(pts, radius):
                affected.update(h for h in hits if h < n_old)
        subset = np.fromiter(affected, dtype=int)
        normals, valid = compute_normals(self.points, self.normal_neighbors,
                                         view_origin=sensor_origin,
                                         tree=self._tree, subset=subset)
        self.normals[subset] = normals
        self.normal_valid[subset] = valid
        return len(pts)

    def reference(self) -> tuple[PointCloud, NnIndex]:
        """Matchable view of the map: points with valid normals, indexed."""
        pts = self.points[self.normal_valid]
        if len(pts) == 0:
            raise RegistrationError("map has no points with valid normals")
        cloud = PointCloud(pts, np.zeros(len(pts)),
                           normals=self.normals[self.normal_valid])
        if self._index is None:
            self._index = NnIndex(pts)
        return cloud, self._index

    def density_ok(self) -> bool:
        cells = self._cells(self.points)
        return len(np.unique(cells, axis=0)) == len(cells)


@dataclass
class PriorPerturbation:
    """Optional error injected into one scan's starting state (ablations)."""

    scan_index: int
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)


@dataclass
class SlamConfig:
    """Everything the scan-to-map loop needs."""

    mode: str = "stretch"
    use_saave: bool = True
    lever_arm: LeverArmConfig = field(
        default_factory=lambda: LeverArmConfig([0.03, 0.11, 0.02]))
    gp: GpConfig = field(default_factory=GpConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    stretch: StretchConfig = field(default_factory=StretchConfig)
    map_voxel: float = 0.10
    normal_neighbors: int = 20
    init_from_gt: bool = True
    perturbation: Optional[PriorPerturbation] = None

    def __post_init__(self):
        if self.mode not in ("stretch", "rigid"):
            raise ValueError(f"unknown mode {self.mode!r}")
        self.stretch.mode = self.mode


@dataclass
class SlamResult:
    trajectory: Trajectory
    map: Map
    rates: RateSeries
    diagnostics: list          # one dict per scan
    boundary_gaps: np.ndarray  # (n_scans - 1, 2): translation m, rotation rad


def _initial_state(dataset: Dataset, config: SlamConfig) -> ImuState:
    if config.init_from_gt and dataset.gt_traj is not None:
        R, p, _ = dataset.gt_traj.interpolate_poses(np.array([0.0]))
        return ImuState(0.0, Pose(R[0], p[0]), np.zeros(3))
    return ImuState(0.0, Pose.identity(), np.zeros(3))


def slam_run(dataset: Dataset, config: SlamConfig) -> SlamResult:
    """Process a dataset scan by scan and build trajectory plus map.

    The first scan bootstraps the map at the initial pose without
    registration (runs start quasi-static).  A failed registration skips
    the scan: the state propagates by IMU only and nothing is merged.
    """
    s = dataset.scan_period
    q = dataset.imu_period
    if config.use_saave:
        rates = saave_run(dataset.imu, config.lever_arm, config.gp)
    else:
        rates = rates_from_raw(dataset.imu, config.gp.sigma2_meas)
    # The accelerometer sits at a lever arm from the body origin; refer
    # its readings back before integrating trajectory priors.
    imu = compensate_lever_arm(dataset.imu, rates, config.lever_arm.com_to_imu)

    world_map = Map(maintenance_voxel=config.map_voxel,
                    normal_neighbors=config.normal_neighbors)
    state = _initial_state(dataset, config)
    trajectory: Optional[Trajectory] = None
    diagnostics = []
    gaps = []

    for k, raw_scan in enumerate(dataset.scans):
        t0 = dataset.scan_start(k)
        imu_win = imu.window(t0 - 1.5 * q, t0 + s + 0.5 * q)
        rate_win = rates.window(t0 - 1.5 * q, t0 + s + 0.5 * q)
        prev_end = state
        if config.perturbation is not None and config.perturbation.scan_index == k:
            prev_end = ImuState(
                state.time,
                Pose(state.pose.rotation,
                     state.pose.translation + config.perturbation.translation),
                state.velocity + config.perturbation.velocity)
        scan_diag = {"scan": k, "time": t0, "skipped": False, "merged": 0}
        try:
            filtered = input_filters(raw_scan, config.preprocess)
        except RegistrationError as err:
            log.warning("scan %d: %s; skipped", k, err)
            traj, _ = prior_trajectory(prev_end, imu_win, rate_win, config.noise,
                                       s, q, config.stretch.gravity)
            scan_diag.update(skipped=True, reason=str(err))
            state, trajectory = _advance(state, traj, trajectory, gaps, k)
            diagnostics.append(scan_diag)
            continue

        if k == 0:
            traj, _ = prior_trajectory(prev_end, imu_win, rate_win, config.noise,
                                       s, q, config.stretch.gravity)
            cloud = deskew(filtered, traj)
            added = world_map.merge(cloud, traj.positions[0])
            scan_diag.update(merged=added, bootstrap=True)
        else:
            try:
                reference, index = world_map.reference()
                result = register(filtered, reference, prev_end, imu_win,
                                  rate_win, config.stretch, config.noise, s, q,
                                  reference_index=index)
                traj = result.trajectory
                added = world_map.merge(result.deskewed, traj.positions[0])
                scan_diag.update(result.diagnostics, merged=added)
            except (RegistrationError, DegenerateGeometryError) as err:
                log.warning("scan %d registration failed: %s; IMU-only", k, err)
                traj, _ = prior_trajectory(prev_end, imu_win, rate_win,
                                           config.noise, s, q,
                                           config.stretch.gravity)
                scan_diag.update(skipped=True, reason=str(err))
        state, trajectory = _advance(state, traj, trajectory, gaps, k)
        diagnostics.append(scan_diag)

    return SlamResult(trajectory, world_map, rates, diagnostics,
                      np.asarray(gaps) if gaps else np.zeros((0, 2)))


def _advance(state, traj, trajectory, gaps, k):
    """Record the boundary gap, concatenate, and move the state forward."""
    if k > 0:
        gaps.append(pose_distance(traj.pose(0), state.pose))
    trajectory = traj if trajectory is None else trajectory.concatenate(traj)
    return traj.last(), trajectory
