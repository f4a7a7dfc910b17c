"""Rigid-body math shared by every other module.

Rotations are stored as 3x3 orthonormal matrices, poses as a (rotation,
translation) pair rather than 4x4 homogeneous matrices so the group
invariants stay directly checkable.  Trajectories are struct-of-arrays
over states sampled at IMU rate, and the nearest-neighbor index wraps a
k-d tree with deterministic lowest-id tie-breaking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """3x3 cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_exp(phi: np.ndarray) -> np.ndarray:
    """Exponential map from a rotation vector (rad) to a rotation matrix.

    Rodrigues formula with a series fallback below the small-angle cutoff.
    """
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(angle) / angle
    b = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + a * K + b * (K @ K)


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix, with angle in [0, pi].

    At the angle-pi singularity the axis sign is fixed so that its
    largest-magnitude component is positive.
    """
    R = np.asarray(R, dtype=float)
    cos_angle = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    angle = np.arccos(cos_angle)
    if angle < _SMALL_ANGLE:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - angle < 1e-6:
        # Near pi the off-diagonal difference vanishes; recover the axis
        # from the symmetric part instead.
        S = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.maximum(np.diag(S), 0.0))
        k = int(np.argmax(axis))
        if axis[k] > 0.0:
            axis[(k + 1) % 3] = S[k, (k + 1) % 3] / axis[k]
            axis[(k + 2) % 3] = S[k, (k + 2) % 3] / axis[k]
        axis /= np.linalg.norm(axis)
        if axis[int(np.argmax(np.abs(axis)))] < 0.0:
            axis = -axis
        return angle * axis
    scale = angle / (2.0 * np.sin(angle))
    return scale * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])


def rotation_exp_batch(phi: np.ndarray) -> np.ndarray:
    """Vectorized ``rotation_exp`` for an (N, 3) stack of rotation vectors."""
    phi = np.asarray(phi, dtype=float)
    n = phi.shape[0]
    angle = np.linalg.norm(phi, axis=1)
    K = np.zeros((n, 3, 3))
    K[:, 0, 1] = -phi[:, 2]
    K[:, 0, 2] = phi[:, 1]
    K[:, 1, 0] = phi[:, 2]
    K[:, 1, 2] = -phi[:, 0]
    K[:, 2, 0] = -phi[:, 1]
    K[:, 2, 1] = phi[:, 0]
    K2 = K @ K
    small = angle < _SMALL_ANGLE
    safe = np.where(small, 1.0, angle)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / (safe * safe))
    return np.eye(3)[None] + a[:, None, None] * K + b[:, None, None] * K2


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): Exp(phi + d) ~ Exp(phi) Exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    a2 = angle * angle
    return (
        np.eye(3)
        - (1.0 - np.cos(angle)) / a2 * K
        + (angle - np.sin(angle)) / (a2 * angle) * (K @ K)
    )


def right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse of the SO(3) right Jacobian."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    coeff = 1.0 / (angle * angle) - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return np.eye(3) + 0.5 * K + coeff * (K @ K)


def _check_rotation(R: np.ndarray, tol: float = 1e-9) -> None:
    if R.shape != (3, 3):
        raise ValueError("rotation must be a 3x3 matrix")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("rotation matrix is not orthonormal with determinant +1")


@dataclass(frozen=True)
class Pose:
    """Rigid transform: p_out = rotation @ p_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a (3,) point or (N, 3) array of points."""
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return self.rotation @ points + self.translation
        return points @ self.rotation.T + self.translation

    def validate(self, tol: float = 1e-9) -> None:
        _check_rotation(self.rotation, tol)


def pose_interpolate(a: Pose, b: Pose, alpha: float) -> Pose:
    """Interpolate between two poses at fraction ``alpha`` in [0, 1].

    Translation is linear; rotation follows the geodesic (constant
    angular velocity) path, matching the constant-axis model of motion
    between adjacent trajectory nodes.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    dR = rotation_log(a.rotation.T @ b.rotation)
    R = a.rotation @ rotation_exp(alpha * dR)
    t = (1.0 - alpha) * a.translation + alpha * b.translation
    return Pose(R, t)


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation distance in m, geodesic rotation angle in rad)."""
    dt = float(np.linalg.norm(a.translation - b.translation))
    dr = float(np.linalg.norm(rotation_log(a.rotation.T @ b.rotation)))
    return dt, dr


@dataclass(frozen=True)
class ImuState:
    """Sensor state at one instant: pose plus linear velocity."""

    time: float
    pose: Pose
    velocity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))


@dataclass
class Trajectory:
    """Ordered states over one or more scan periods, struct-of-arrays.

    ``times`` must be strictly increasing.  Poses between nodes are
    recovered with geodesic rotation interpolation and linear
    translation interpolation.
    """

    times: np.ndarray
    rotations: np.ndarray       # (N, 3, 3)
    positions: np.ndarray       # (N, 3)
    velocities: np.ndarray      # (N, 3)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.rotations = np.asarray(self.rotations, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        self.velocities = np.asarray(self.velocities, dtype=float)
        if np.any(np.diff(self.times) <= 0.0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    @staticmethod
    def from_states(states: Sequence[ImuState]) -> "Trajectory":
        return Trajectory(
            times=np.array([s.time for s in states]),
            rotations=np.stack([s.pose.rotation for s in states]),
            positions=np.stack([s.pose.translation for s in states]),
            velocities=np.stack([s.velocity for s in states]),
        )

    def state(self, i: int) -> ImuState:
        return ImuState(float(self.times[i]),
                        Pose(self.rotations[i], self.positions[i]),
                        self.velocities[i])

    def first(self) -> ImuState:
        return self.state(0)

    def last(self) -> ImuState:
        return self.state(len(self) - 1)

    def pose(self, i: int) -> Pose:
        return Pose(self.rotations[i], self.positions[i])

    def interpolate_poses(self, query: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
        """Poses at arbitrary times, clamped to the trajectory span.

        Returns (rotations (M,3,3), positions (M,3), clamped count).
        """
        query = np.atleast_1d(np.asarray(query, dtype=float))
        lo, hi = self.times[0], self.times[-1]
        clamped = int(np.count_nonzero((query < lo - 1e-12) | (query > hi + 1e-12)))
        if len(self) == 1:
            n = len(query)
            return (np.broadcast_to(self.rotations[0], (n, 3, 3)).copy(),
                    np.broadcast_to(self.positions[0], (n, 3)).copy(), clamped)
        t = np.clip(query, lo, hi)
        idx = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self) - 2)
        dt = self.times[idx + 1] - self.times[idx]
        alpha = (t - self.times[idx]) / dt
        # Per-interval relative rotation vectors, interpolated geodesically.
        rel = np.einsum("nji,njk->nik", self.rotations[:-1], self.rotations[1:])
        rel_vec = np.stack([rotation_log(r) for r in rel])
        R = self.rotations[idx] @ rotation_exp_batch(alpha[:, None] * rel_vec[idx])
        p = (1.0 - alpha)[:, None] * self.positions[idx] + alpha[:, None] * self.positions[idx + 1]
        return R, p, clamped

    def concatenate(self, other: "Trajectory") -> "Trajectory":
        """Append ``other``, dropping its leading nodes that do not advance time."""
        keep = other.times > self.times[-1] + 1e-12
        return Trajectory(
            np.concatenate([self.times, other.times[keep]]),
            np.concatenate([self.rotations, other.rotations[keep]]),
            np.concatenate([self.positions, other.positions[keep]]),
            np.concatenate([self.velocities, other.velocities[keep]]),
        )


@dataclass
class PointCloud:
    """Points with per-point relative timestamps and optional normals/weights."""

    points: np.ndarray                    # (N, 3)
    rel_times: np.ndarray                 # (N,) seconds within the scan
    normals: Optional[np.ndarray] = None  # (N, 3) unit vectors
    weights: Optional[np.ndarray] = None  # (N,) in [0, 1]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.rel_times = np.asarray(self.rel_times, dtype=float).reshape(-1)
        if len(self.points) != len(self.rel_times):
            raise ValueError("points and rel_times must have equal length")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float).reshape(-1)

    def __len__(self) -> int:
        return len(self.points)

    def select(self, mask: np.ndarray) -> "PointCloud":
        return PointCloud(
            self.points[mask],
            self.rel_times[mask],
            None if self.normals is None else self.normals[mask],
            None if self.weights is None else self.weights[mask],
        )


class NnIndex:
    """Exact nearest-neighbor index over a point set.

    Queries return the true k minimizers of Euclidean distance with ties
    broken by the lowest point id, so results are reproducible across
    runs and platforms.
    """

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            raise ValueError("cannot index an empty cloud")
        self.points = points
        self.tree = cKDTree(points)

    def query(self, queries: np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """k nearest ids and distances for each query point.

        Returns (distances (M, k), ids (M, k)); k is capped at the cloud
        size when it exceeds it.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        k_eff = min(k, len(self.points))
        # Query one extra neighbor to detect ties at the k-th distance.
        k_probe = min(k_eff + 1, len(self.points))
        dist, idx = self.tree.query(queries, k=k_probe)
        dist = dist.reshape(len(queries), k_probe)
        idx = idx.reshape(len(queries), k_probe)
        out_d = dist[:, :k_eff].copy()
        out_i = idx[:, :k_eff].copy()
        if k_eff > 1:
            # Sort equal-distance neighbors by id (vectorized lexsort per row).
            order = np.lexsort((out_i, out_d), axis=1)
            out_d = np.take_along_axis(out_d, order, axis=1)
            out_i = np.take_along_axis(out_i, order, axis=1)
        if k_probe > k_eff:
            # Rows where a tie straddles the cut get exact id-ordered
            # treatment; with float coordinates these are rare.
            tail = dist[:, k_eff]
            edge = dist[:, k_eff - 1]
            tied = np.flatnonzero(tail <= edge + 1e-15 * np.maximum(edge, 1.0))
            for m in tied:
                r = edge[m] * (1.0 + 1e-12) + 1e-300
                cand = np.array(self.tree.query_ball_point(queries[m], r),
                                dtype=int)
                cd = np.linalg.norm(self.points[cand] - queries[m], axis=1)
                sel = np.lexsort((cand, cd))
                out_i[m] = cand[sel][:k_eff]
                out_d[m] = cd[sel][:k_eff]
        return out_d, out_i


def nn_index_build(cloud: np.ndarray) -> NnIndex:
    return NnIndex(cloud)


def nn_query(index: NnIndex, point: np.ndarray, k: int = 1) -> np.ndarray:
    """Ids of the k nearest cloud points to ``point`` (all points if k exceeds the cloud)."""
    _, ids = index.query(np.asarray(point, dtype=float).reshape(1, 3), k=k)
    return ids[0]
