"""Continuity-preserving scan registration.

The registration loop deskews the reading with an intra-scan trajectory,
matches it against the reference, weights the matches, and computes a
rigid correction.  Instead of applying that correction to the scan, the
trajectory itself is re-optimized each iteration in a small factor graph
whose factors anchor the first state to the previous trajectory's end,
tie consecutive states together through IMU preintegration, and pull the
first-to-last relative pose toward the accumulated correction.  A rigid
mode that transforms the whole trajectory (dropping the continuity
anchor) is provided as the classical-ICP baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import DegenerateGeometryError, RegistrationError
from .geometry import (
    ImuState,
    NnIndex,
    PointCloud,
    Pose,
    Trajectory,
    pose_distance,
    right_jacobian_inv,
    rotation_exp,
    rotation_exp_batch,
    rotation_log,
    skew,
)
from .preintegration import (
    GRAVITY,
    NoiseSpec,
    PreintegratedDelta,
    preintegrate,
    propagate_state,
)
from .saave import ImuData, RateSeries

log = logging.getLogger(__name__)

_DOF_NAMES = ("roll", "pitch", "yaw", "x", "y", "z")


@dataclass
class PreprocessConfig:
    """Input filters applied to a raw scan before registration.

    Points inside the exclusion box (sensor-frame, centered on the
    sensor) are dropped, then a voxel grid keeps the first point per
    cell in scan order.
    """

    exclusion_half_extents: Optional[np.ndarray] = None  # (3,) m, None disables
    voxel_size: float = 0.15  # m

    def __post_init__(self):
        if self.exclusion_half_extents is not None:
            self.exclusion_half_extents = np.asarray(
                self.exclusion_half_extents, dtype=float).reshape(3)
        if self.voxel_size <= 0.0:
            raise ValueError("voxel_size must be positive")


@dataclass
class StretchConfig:
    """Parameters of the registration loop and its trajectory solver."""

    mode: str = "stretch"                 # "stretch" or "rigid"
    sigma2_stretch: float = 1e-24         # m^2 and rad^2
    sigma2_begin: float = 1e-18           # m^2 and rad^2 (pose anchor)
    sigma2_begin_velocity: float = 2.5e-3  # (m/s)^2, soft velocity anchor
    max_iterations: int = 40
    translation_threshold: float = 1e-4   # m
    rotation_threshold: float = 1e-4      # rad
    max_correction: float = 5.0           # m; beyond this the match loop diverged
    max_step_translation: float = 0.5     # m, per-iteration trust region
    max_step_rotation: float = 0.3        # rad
    trim_start: float = 0.5
    trim_end: float = 0.3
    gn_max_iterations: int = 25
    gn_tolerance: float = 1e-9
    covariance_regularization: float = 1e-12
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        if self.mode not in ("stretch", "rigid"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if min(self.sigma2_stretch, self.sigma2_begin) <= 0.0:
            raise ValueError("factor variances must be positive")
        if min(self.translation_threshold, self.rotation_threshold) <= 0.0:
            raise ValueError("convergence thresholds must be positive")
        if not 0.0 <= self.trim_end <= self.trim_start < 1.0:
            raise ValueError("trim ratios must satisfy 0 <= end <= start < 1")
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)


@dataclass
class MatchSet:
    """Point pairs from nearest-neighbor matching."""

    reading_ids: np.ndarray    # (M,)
    reference_ids: np.ndarray  # (M,)
    normals: np.ndarray        # (M, 3) reference normals
    distances: np.ndarray      # (M,)


@dataclass
class StretchProblem:
    """One trajectory-deformation problem for the factor-graph solver."""

    nodes: Trajectory
    begin_anchor: ImuState
    imu_deltas: Sequence[PreintegratedDelta]
    stretch_target: Pose
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        if len(self.nodes) != len(self.imu_deltas) + 1:
            raise ValueError("node count must equal delta count + 1")
        if abs(self.nodes.times[0] - self.begin_anchor.time) > 1e-6:
            raise ValueError("first node time must match the begin anchor")
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)


@dataclass
class RegistrationResult:
    trajectory: Trajectory
    deskewed: PointCloud
    diagnostics: dict


def input_filters(cloud: PointCloud, cfg: PreprocessConfig) -> PointCloud:
    """Exclusion-box and voxel-grid filtering of a raw sensor-frame scan."""
    pts = cloud.points
    keep = np.ones(len(pts), dtype=bool)
    if cfg.exclusion_half_extents is not None:
        inside = np.all(np.abs(pts) <= cfg.exclusion_half_extents, axis=1)
        keep &= ~inside
    filtered = cloud.select(keep)
    if len(filtered) == 0:
        raise RegistrationError("all points removed by the exclusion box")
    cells = np.floor(filtered.points / cfg.voxel_size).astype(np.int64)
    _, first = np.unique(cells, axis=0, return_index=True)
    filtered = filtered.select(np.sort(first))
    if len(filtered) == 0:
        raise RegistrationError("voxel filter left no points")
    return filtered


def prior_trajectory(prev_end: ImuState, imu: ImuData, rates: RateSeries,
                     noise: NoiseSpec, scan_period: float, imu_period: float,
                     gravity: np.ndarray = GRAVITY,
                     ) -> tuple[Trajectory, list[PreintegratedDelta]]:
    """IMU-only trajectory over one scan, plus its per-interval deltas.

    Nodes sit at IMU rate from the previous trajectory end across the
    scan period.  Gyro means and variances come from the rate series;
    specific force comes from the raw samples.  Intervals without a
    sample are filled by zero-order hold from the latest earlier sample.
    """
    t0 = prev_end.time
    n_intervals = int(round(scan_period / imu_period))
    node_times = t0 + np.arange(n_intervals + 1) * imu_period
    if len(imu) == 0:
        raise ValueError("empty IMU window")
    if np.max(np.abs(imu.times - rates.times)) > 1e-9:
        raise ValueError("rate series must be aligned with the IMU window")

    deltas = []
    states = [prev_end]
    warned = False
    for k in range(n_intervals):
        ta, tb = node_times[k], node_times[k + 1]
        inside = np.flatnonzero((imu.times >= ta - 1e-9) & (imu.times < tb - 1e-9))
        if len(inside) == 0 or imu.times[inside[0]] > ta + 1e-9:
            prev_idx = np.searchsorted(imu.times, ta + 1e-9) - 1
            prev_idx = max(prev_idx, 0)
            if not warned:
                log.warning("IMU gap in [%0.4f, %0.4f]; zero-order hold applied",
                            ta, tb)
                warned = True
            idx = np.concatenate([[prev_idx], inside]) if len(inside) else np.array([prev_idx])
            t_samples = np.maximum(imu.times[idx], ta)
        else:
            idx = inside
            t_samples = imu.times[idx]
        delta = preintegrate(t_samples, rates.mean[idx], imu.specific_force[idx],
                             noise, end_time=tb, gyro_variance=rates.variance[idx])
        deltas.append(delta)
        states.append(propagate_state(states[-1], delta, gravity))
    return Trajectory.from_states(states), deltas


def _whiteners(problem: StretchProblem, cfg: StretchConfig) -> list[np.ndarray]:
    """Upper Cholesky factors of each IMU factor's information matrix."""
    out = []
    for d in problem.imu_deltas:
        cov = d.covariance + cfg.covariance_regularization * np.eye(9)
        info = np.linalg.inv(cov)
        out.append(np.linalg.cholesky(0.5 * (info + info.T)).T)
    return out


def _stack_residuals(rot, pos, vel, problem: StretchProblem, cfg: StretchConfig,
                     whiteners, with_jacobian: bool):
    """Whitened residual vector (and Jacobian) of the full factor graph."""
    n = len(rot)
    dim = 9 * n
    n_rows = 9 + 9 * (n - 1) + 6
    r = np.zeros(n_rows)
    J = np.zeros((n_rows, dim)) if with_jacobian else None
    g = problem.gravity
    anchor = problem.begin_anchor
    w_begin = 1.0 / np.sqrt(cfg.sigma2_begin)
    w_vel = 1.0 / np.sqrt(cfg.sigma2_begin_velocity)
    w_stretch = 1.0 / np.sqrt(cfg.sigma2_stretch)

    # Beginning factor: pose pinned hard to the anchor, velocity held
    # softly so the deformation can start ramping from the first interval.
    r_rot0 = rotation_log(anchor.pose.rotation.T @ rot[0])
    r[0:3] = w_begin * r_rot0
    r[3:6] = w_vel * (vel[0] - anchor.velocity)
    r[6:9] = w_begin * (pos[0] - anchor.pose.translation)
    if with_jacobian:
        J[0:3, 0:3] = w_begin * right_jacobian_inv(r_rot0)
        J[3:6, 3:6] = w_vel * np.eye(3)
        J[6:9, 6:9] = w_begin * np.eye(3)

    # IMU factors between consecutive nodes.
    row = 9
    for k, delta in enumerate(problem.imu_deltas):
        Ri, pi, vi = rot[k], pos[k], vel[k]
        Rj, pj, vj = rot[k + 1], pos[k + 1], vel[k + 1]
        dt = delta.dt
        RiT = Ri.T
        u_vel = RiT @ (vj - vi - g * dt)
        u_pos = RiT @ (pj - pi - vi * dt - 0.5 * g * dt * dt)
        r_rot = rotation_log(delta.delta_R.T @ (RiT @ Rj))
        rk = np.concatenate([r_rot, u_vel - delta.delta_v, u_pos - delta.delta_p])
        W = whiteners[k]
        r[row:row + 9] = W @ rk
        if with_jacobian:
            Ji = np.zeros((9, 9))
            Jj = np.zeros((9, 9))
            Jr_inv = right_jacobian_inv(r_rot)
            Ji[0:3, 0:3] = -Jr_inv @ (Rj.T @ Ri)
            Jj[0:3, 0:3] = Jr_inv
            Ji[3:6, 0:3] = skew(u_vel)
            Ji[3:6, 3:6] = -RiT
            Jj[3:6, 3:6] = RiT
            Ji[6:9, 0:3] = skew(u_pos)
            Ji[6:9, 3:6] = -RiT * dt
            Ji[6:9, 6:9] = -RiT
            Jj[6:9, 6:9] = RiT
            J[row:row + 9, 9 * k:9 * k + 9] = W @ Ji
            J[row:row + 9, 9 * (k + 1):9 * (k + 1) + 9] = W @ Jj
        row += 9

    # Stretching factor: first-to-last relative pose pulled to the target.
    R0, RN = rot[0], rot[-1]
    p_rel = R0.T @ (pos[-1] - pos[0])
    r_rotS = rotation_log(problem.stretch_target.rotation.T @ (R0.T @ RN))
    r[row:row + 3] = w_stretch * r_rotS
    r[row + 3:row + 6] = w_stretch * (p_rel - problem.stretch_target.translation)
    if with_jacobian:
        Jr_inv = right_jacobian_inv(r_rotS)
        lastc = 9 * (n - 1)
        J[row:row + 3, 0:3] = -w_stretch * (Jr_inv @ (RN.T @ R0))
        J[row:row + 3, lastc:lastc + 3] = w_stretch * Jr_inv
        J[row + 3:row + 6, 0:3] = w_stretch * skew(p_rel)
        J[row + 3:row + 6, 6:9] = -w_stretch * R0.T
        J[row + 3:row + 6, lastc + 6:lastc + 9] = w_stretch * R0.T
    return r, J


def stretch_trajectory(problem: StretchProblem, cfg: StretchConfig) -> Trajectory:
    """Deform a trajectory to satisfy anchor, IMU, and stretch factors.

    Damped Gauss-Newton on the manifold (rotations perturbed on the
    right, velocity and position additively), warm-started from
    ``problem.nodes``.  Non-convergence returns the best iterate with a
    warning.
    """
    nodes = problem.nodes
    rot = nodes.rotations.copy()
    pos = nodes.positions.copy()
    vel = nodes.velocities.copy()
    n = len(nodes)
    whiteners = _whiteners(problem, cfg)

    lam = 1e-12
    r, J = _stack_residuals(rot, pos, vel, problem, cfg, whiteners, True)
    cost = float(r @ r)
    converged = False
    step = np.zeros(9 * n)
    for _ in range(cfg.gn_max_iterations):
        accepted = False
        for _ in range(8):
            step = _solve_damped(J, -r, lam)
            d = step.reshape(n, 9)
            rot_t = rot @ rotation_exp_batch(d[:, 0:3])
            vel_t = vel + d[:, 3:6]
            pos_t = pos + d[:, 6:9]
            r_t, _ = _stack_residuals(rot_t, pos_t, vel_t, problem, cfg,
                                      whiteners, False)
            cost_t = float(r_t @ r_t)
            if cost_t <= cost * (1.0 + 1e-14):
                accepted = True
                break
            lam = max(lam, 1e-10) * 10.0
        if not accepted:
            break
        improvement = cost - cost_t
        rot, pos, vel, cost = rot_t, pos_t, vel_t, cost_t
        lam = max(lam * 0.25, 1e-12)
        if np.max(np.abs(step)) < cfg.gn_tolerance or \
                improvement <= 1e-12 * max(cost, 1.0):
            converged = True
            break
        r, J = _stack_residuals(rot, pos, vel, problem, cfg, whiteners, True)
    if not converged and np.max(np.abs(step)) > 1e-6:
        log.warning("trajectory stretch did not fully converge (last step %.2e)",
                    float(np.max(np.abs(step))))
    return Trajectory(nodes.times.copy(), rot, pos, vel)


def _solve_damped(J: np.ndarray, rhs: np.ndarray, lam: float) -> np.ndarray:
    """Least-squares step for min ||J d - rhs||^2 + lam ||d||^2 via QR.

    Works on the stacked factor (never the normal equations), which keeps
    the hugely different factor weights usable in double precision.
    """
    n = J.shape[1]
    A = np.vstack([J, np.sqrt(lam) * np.eye(n)])
    b = np.concatenate([rhs, np.zeros(n)])
    Q, R = scipy.linalg.qr(A, mode="economic", check_finite=False)
    return scipy.linalg.solve_triangular(R, Q.T @ b, check_finite=False)


def deskew(cloud: PointCloud, traj: Trajectory) -> PointCloud:
    """Express each point in the map frame using the pose at its timestamp.

    Relative times are offset from the trajectory's first node; stamps
    outside the span are clamped to the nearest node (counted and
    logged).
    """
    abs_times = traj.times[0] + cloud.rel_times
    R, p, clamped = traj.interpolate_poses(abs_times)
    if clamped:
        log.warning("deskew clamped %d point timestamps outside the trajectory",
                    clamped)
    pts = np.einsum("nij,nj->ni", R, cloud.points) + p
    return PointCloud(pts, cloud.rel_times.copy(), cloud.normals, cloud.weights)


def weight_outliers(matches: MatchSet, rel_times: np.ndarray, scan_period: float,
                    trim_ratio: float) -> np.ndarray:
    """Composite match weights: distance trimming times quadratic ramp.

    The ``trim_ratio`` worst pairs by Euclidean residual get weight
    zero; survivors are scaled by (t/T)^2 so late-scan points dominate.
    """
    if scan_period <= 0.0:
        raise ValueError("scan_period must be positive")
    n = len(matches.distances)
    n_trim = int(np.floor(trim_ratio * n))
    mask = np.ones(n)
    if n_trim > 0:
        order = np.argsort(matches.distances, kind="stable")
        mask[order[n - n_trim:]] = 0.0
    if not mask.any():
        raise RegistrationError("outlier trimming removed every match")
    quad = (np.asarray(rel_times, dtype=float) / scan_period) ** 2
    return mask * quad


def minimize_point_to_plane(src: np.ndarray, ref: np.ndarray, normals: np.ndarray,
                            weights: np.ndarray, damping: float = 1e-3) -> Pose:
    """Rigid transform minimizing the weighted point-to-plane cost.

    Iterated small-angle linearization on the fixed match set; each
    accepted step must not increase the cost, and a small relative
    damping keeps weakly observed directions from swinging.  Raises when
    fewer than six weighted constraints remain or the normal set leaves
    directions unconstrained (named in the error).
    """
    w = np.asarray(weights, dtype=float)
    active = w > 0.0
    if np.count_nonzero(active) < 6:
        raise DegenerateGeometryError(
            "fewer than 6 weighted constraints; cannot solve for 6 DOF")
    src_a, ref_a = src[active], ref[active]
    nrm_a, w_a = normals[active], w[active]

    T = Pose.identity()
    x = src_a
    resid = np.einsum("ni,ni->n", nrm_a, x - ref_a)
    cost = float(np.sum(w_a * resid ** 2))
    for it in range(12):
        A = np.hstack([np.cross(x, nrm_a), nrm_a])
        Aw = A * w_a[:, None]
        M = A.T @ Aw
        g = -(Aw.T @ resid)
        if it == 0:
            eigvals, eigvecs = np.linalg.eigh(M)
            bad = eigvals < max(1e-12 * eigvals[-1], 1e-14)
            if bad.any():
                names = sorted({_DOF_NAMES[int(np.argmax(np.abs(eigvecs[:, j])))]
                                for j in np.flatnonzero(bad)})
                raise DegenerateGeometryError(
                    "match normals leave directions unconstrained: "
                    + ", ".join(names))
        step = np.linalg.solve(M + damping * np.trace(M) / 6.0 * np.eye(6), g)
        scale = 1.0
        improved = False
        for _ in range(6):
            dT = Pose(rotation_exp(scale * step[0:3]), scale * step[3:6])
            T_t = dT.compose(T)
            x_t = T_t.apply(src_a)
            resid_t = np.einsum("ni,ni->n", nrm_a, x_t - ref_a)
            cost_t = float(np.sum(w_a * resid_t ** 2))
            if cost_t <= cost * (1.0 + 1e-14):
                improved = True
                break
            scale *= 0.5
        if not improved:
            break
        T, x, resid, cost = T_t, x_t, resid_t, cost_t
        if np.linalg.norm(scale * step) < 1e-13:
            break
    return T


def _local_step(T: Pose, center: np.ndarray) -> tuple[float, float]:
    """Size of a correction measured at the cloud it moves.

    The raw translation of a map-frame transform is origin-dependent (a
    rotation about the map origin hides in a compensating translation),
    so displacement is evaluated at ``center``.
    """
    dt = float(np.linalg.norm(T.apply(center) - center))
    dr = float(np.linalg.norm(rotation_log(T.rotation)))
    return dt, dr


def _clamp_step(T: Pose, center: np.ndarray, max_t: float, max_r: float) -> Pose:
    """Scale a correction down to the per-iteration trust region.

    Scaling happens in centroid-local terms so the rotation/translation
    split is meaningful regardless of where the map origin sits.
    """
    step_t, step_r = _local_step(T, center)
    scale = min(1.0, max_t / max(step_t, 1e-300), max_r / max(step_r, 1e-300))
    if scale >= 1.0:
        return T
    rvec = rotation_log(T.rotation)
    local_t = T.apply(center) - center
    R_s = rotation_exp(scale * rvec)
    return Pose(R_s, scale * local_t + center - R_s @ center)


def _apply_rigid(transform: Pose, traj: Trajectory) -> Trajectory:
    R, t = transform.rotation, transform.translation
    return Trajectory(traj.times.copy(),
                      np.einsum("ij,njk->nik", R, traj.rotations),
                      traj.positions @ R.T + t,
                      traj.velocities @ R.T)


def register(reading: PointCloud, reference: PointCloud, prev_end: ImuState,
             imu_window: ImuData, rates: RateSeries, cfg: StretchConfig,
             noise: NoiseSpec, scan_period: float, imu_period: float,
             reference_index: Optional[NnIndex] = None) -> RegistrationResult:
    """Register one (pre-filtered) scan against the reference cloud.

    Runs the deskew/match/weight/minimize loop, accumulating rigid
    corrections into the trajectory via the factor graph (stretch mode)
    or by transforming it rigidly (rigid mode).  The reading must carry
    per-point relative times; the reference must carry normals.
    """
    if reference.normals is None:
        raise ValueError("reference cloud must carry normals")
    if len(reading) == 0:
        raise RegistrationError("empty reading")
    if reference_index is None:
        reference_index = NnIndex(reference.points)

    prior, deltas = prior_trajectory(prev_end, imu_window, rates, noise,
                                     scan_period, imu_period, cfg.gravity)
    begin_pose = prior.pose(0)
    end_guess = prior.pose(len(prior) - 1)

    lam = Pose.identity()
    traj = prior
    converged = False
    iterations = 0
    gn_warm = prior
    best_cost = np.inf
    best_lam = lam
    ratio_frozen = None
    for i in range(1, cfg.max_iterations + 1):
        iterations = i
        if cfg.mode == "stretch":
            target = begin_pose.inverse().compose(lam.compose(end_guess))
            problem = StretchProblem(gn_warm, prev_end, deltas, target,
                                     cfg.gravity)
            traj = stretch_trajectory(problem, cfg)
            gn_warm = traj
        else:
            traj = _apply_rigid(lam, prior)
        deskewed = deskew(reading, traj)
        dist, ids = reference_index.query(deskewed.points, k=1)
        matches = MatchSet(np.arange(len(deskewed)), ids[:, 0],
                           reference.normals[ids[:, 0]], dist[:, 0])
        if ratio_frozen is None:
            if cfg.max_iterations > 1:
                ratio = cfg.trim_start + (cfg.trim_end - cfg.trim_start) * (
                    (i - 1) / (cfg.max_iterations - 1))
            else:
                ratio = cfg.trim_end
        else:
            ratio = ratio_frozen
        weights = weight_outliers(matches, deskewed.rel_times, scan_period, ratio)
        resid = np.einsum("ni,ni->n",
                          matches.normals,
                          deskewed.points - reference.points[matches.reference_ids])
        cost = float(np.sum(weights * resid ** 2) / np.sum(weights))
        if cost < best_cost:
            best_cost = cost
            best_lam = lam
        correction = minimize_point_to_plane(
            deskewed.points, reference.points[matches.reference_ids],
            matches.normals, weights)
        centroid = np.average(deskewed.points, axis=0, weights=weights)
        correction = _clamp_step(correction, centroid,
                                 cfg.max_step_translation,
                                 cfg.max_step_rotation)
        lam = correction.compose(lam)
        lam_t, _ = _local_step(lam, end_guess.translation)
        if lam_t > cfg.max_correction:
            raise RegistrationError(
                f"registration diverged: accumulated correction moves the "
                f"scan end {lam_t:.2f} m (> {cfg.max_correction} m)")
        step_t, step_r = _local_step(correction, centroid)
        if step_t < cfg.translation_threshold and step_r < cfg.rotation_threshold:
            converged = True
            break
        if ratio_frozen is None and step_t < 10 * cfg.translation_threshold \
                and step_r < 10 * cfg.rotation_threshold:
            # Near convergence: hold the trim ratio so the fixed point
            # stops moving underneath the iteration.
            ratio_frozen = ratio


    if not converged:
        # Fall back to the best-matching iterate seen.
        lam = best_lam
        log.warning("registration hit max_iterations (%d) without converging; "
                    "returning the best iterate", cfg.max_iterations)

    # Final trajectory update with the accumulated correction.
    if cfg.mode == "stretch":
        target = begin_pose.inverse().compose(lam.compose(end_guess))
        problem = StretchProblem(gn_warm, prev_end, deltas, target, cfg.gravity)
        traj = stretch_trajectory(problem, cfg)
    else:
        traj = _apply_rigid(lam, prior)
    deskewed = deskew(reading, traj)
    gap_t, gap_r = pose_distance(traj.pose(0), prev_end.pose)
    corr_t, corr_r = _local_step(lam, end_guess.translation)
    diagnostics = {
        "iterations": iterations,
        "converged": converged,
        "boundary_gap_m": gap_t,
        "boundary_gap_rad": gap_r,
        "correction_m": corr_t,
        "correction_rad": corr_r,
        "n_matches": len(reading),
        "match_rms": float(np.sqrt(best_cost)) if np.isfinite(best_cost) else None,
    }
    return RegistrationResult(traj, deskewed, diagnostics)
