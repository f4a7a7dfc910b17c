"""IMU preintegration between trajectory states.

Samples are zero-order held over their interval and each interval is
integrated exactly under that hold, including the SO(3) correction
terms, so the deltas agree with fine-step integration of the same
inputs.  Biases are fixed at zero; the covariance is propagated to
first order from per-sample gyro variances (which may come from the
rate smoother), a datasheet accelerometer variance, and a small
integration noise term.  Deltas are world-frame independent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import (
    ImuState,
    Pose,
    right_jacobian,
    right_jacobian_inv,
    rotation_exp,
    rotation_log,
    skew,
)

log = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass
class NoiseSpec:
    """Per-sample IMU noise variances feeding covariance propagation."""

    sigma2_gyro: float = 2.74e-5      # rad^2/s^2, fallback when no per-sample values
    sigma2_accel: float = 4e-4        # m^2/s^4
    sigma2_integration: float = 1e-12  # m^2 added to the position block per step

    def __post_init__(self):
        if min(self.sigma2_gyro, self.sigma2_accel, self.sigma2_integration) < 0.0:
            raise ValueError("noise variances must be non-negative")


@dataclass
class PreintegratedDelta:
    """Relative motion accumulated over one window, gravity excluded.

    ``covariance`` is 9x9 over (rotation, velocity, position) error.
    """

    dt: float
    delta_R: np.ndarray   # (3, 3)
    delta_v: np.ndarray   # (3,)
    delta_p: np.ndarray   # (3,)
    covariance: np.ndarray  # (9, 9)


def _gamma1(phi: np.ndarray) -> np.ndarray:
    """Integral of Exp(s*phi) over s in [0, 1] (the left Jacobian)."""
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    return (np.eye(3)
            + (1.0 - np.cos(theta)) / t2 * K
            + (theta - np.sin(theta)) / (t2 * theta) * (K @ K))


def _gamma2(phi: np.ndarray) -> np.ndarray:
    """Double integral of Exp over the unit interval: sum phi^k/(k+2)!."""
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-8:
        return 0.5 * np.eye(3) + K / 6.0 + (K @ K) / 24.0
    t2 = theta * theta
    return (0.5 * np.eye(3)
            + (theta - np.sin(theta)) / (t2 * theta) * K
            + (0.5 * t2 + np.cos(theta) - 1.0) / (t2 * t2) * (K @ K))


def compensate_lever_arm(imu, rates, com_to_imu: np.ndarray):
    """Refer accelerometer readings from the IMU location to the body origin.

    The measured specific force at a lever arm from the origin carries
    tangential and centripetal terms; they are removed with the rate
    series (angular acceleration by finite differences of its means).
    Returns a new stream suitable for integrating the origin's motion.
    """
    from .saave import ImuData  # local import to avoid a module cycle
    t_arm = np.asarray(com_to_imu, dtype=float).reshape(3)
    w = rates.mean
    alpha = np.gradient(w, rates.times, axis=0)
    lever = np.cross(alpha, t_arm[None, :]) + np.cross(w, np.cross(w, t_arm[None, :]))
    return ImuData(imu.times.copy(), imu.angular_velocity.copy(),
                   imu.specific_force - lever,
                   imu.gyro_saturated.copy(), imu.accel_saturated.copy())


def preintegrate(times: np.ndarray, gyro: np.ndarray, accel: np.ndarray,
                 noise: NoiseSpec, end_time: float,
                 gyro_variance: Optional[np.ndarray] = None) -> PreintegratedDelta:
    """Accumulate the relative motion of a sample window.

    Each sample at ``times[k]`` is held until the next sample (the last
    until ``end_time``).  ``gyro_variance`` may give per-sample per-axis
    variances; otherwise ``noise.sigma2_gyro`` applies to every sample.
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    if len(times) == 0:
        raise ValueError("preintegrate needs at least one sample")
    if np.any(np.diff(times) < 0.0):
        raise ValueError("sample times must be non-decreasing")
    gyro = np.asarray(gyro, dtype=float).reshape(-1, 3)
    accel = np.asarray(accel, dtype=float).reshape(-1, 3)
    if end_time < times[-1]:
        raise ValueError("end_time precedes the last sample")
    if gyro_variance is None:
        gyro_variance = np.full((len(times), 3), noise.sigma2_gyro)
    else:
        gyro_variance = np.asarray(gyro_variance, dtype=float)
        if gyro_variance.ndim == 1:
            gyro_variance = np.repeat(gyro_variance[:, None], 3, axis=1)

    R = np.eye(3)
    v = np.zeros(3)
    p = np.zeros(3)
    cov = np.zeros((9, 9))
    bounds = np.concatenate([times, [end_time]])
    I3 = np.eye(3)

    for k in range(len(times)):
        dt = bounds[k + 1] - bounds[k]
        if dt <= 0.0:
            continue
        w, a = gyro[k], accel[k]
        phi = w * dt
        E = rotation_exp(phi)
        g1 = _gamma1(phi)
        g2 = _gamma2(phi)

        # First-order error-state propagation (rotation, velocity, position).
        A = np.eye(9)
        A[0:3, 0:3] = E.T
        A[3:6, 0:3] = -R @ skew(a) * dt
        A[6:9, 0:3] = -0.5 * R @ skew(a) * dt * dt
        A[6:9, 3:6] = I3 * dt
        Jr_dt = right_jacobian(phi) * dt
        Ra_dt = R * dt
        cov = A @ cov @ A.T
        cov[0:3, 0:3] += Jr_dt @ np.diag(gyro_variance[k]) @ Jr_dt.T
        Sa = noise.sigma2_accel
        cov[3:6, 3:6] += Sa * (Ra_dt @ Ra_dt.T)
        cov[3:6, 6:9] += Sa * 0.5 * dt * (Ra_dt @ Ra_dt.T)
        cov[6:9, 3:6] += Sa * 0.5 * dt * (Ra_dt @ Ra_dt.T)
        cov[6:9, 6:9] += Sa * 0.25 * dt * dt * (Ra_dt @ Ra_dt.T)
        cov[6:9, 6:9] += noise.sigma2_integration * I3

        # Exact integral of the zero-order-held inputs over the interval.
        p = p + v * dt + (R @ g2 @ a) * dt * dt
        v = v + (R @ g1 @ a) * dt
        R = R @ E

    cov = 0.5 * (cov + cov.T)
    return PreintegratedDelta(float(end_time - times[0]), R, v, p, cov)


def propagate_state(x0: ImuState, delta: PreintegratedDelta,
                    gravity: np.ndarray = GRAVITY) -> ImuState:
    """Advance a state by a preintegrated delta under the given gravity."""
    gravity = np.asarray(gravity, dtype=float).reshape(3)
    R0 = x0.pose.rotation
    dt = delta.dt
    R1 = R0 @ delta.delta_R
    v1 = x0.velocity + gravity * dt + R0 @ delta.delta_v
    p1 = (x0.pose.translation + x0.velocity * dt + 0.5 * gravity * dt * dt
          + R0 @ delta.delta_p)
    return ImuState(x0.time + dt, Pose(R1, p1), v1)


def imu_residual(xi: ImuState, xj: ImuState, delta: PreintegratedDelta,
                 gravity: np.ndarray = GRAVITY,
                 regularization: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """9-vector residual between two states and its information matrix.

    Zero when ``xj`` equals ``propagate_state(xi, delta, gravity)``.
    The information matrix is the regularized inverse of the delta
    covariance.
    """
    r = _residual_vector(xi, xj, delta, gravity)
    cov = delta.covariance + regularization * np.eye(9)
    try:
        info = np.linalg.inv(cov)
    except np.linalg.LinAlgError:
        log.warning("singular preintegration covariance; using pseudo-inverse")
        info = np.linalg.pinv(cov)
    return r, 0.5 * (info + info.T)


def _residual_vector(xi: ImuState, xj: ImuState, delta: PreintegratedDelta,
                     gravity: np.ndarray) -> np.ndarray:
    gravity = np.asarray(gravity, dtype=float).reshape(3)
    Ri, pi, vi = xi.pose.rotation, xi.pose.translation, xi.velocity
    Rj, pj, vj = xj.pose.rotation, xj.pose.translation, xj.velocity
    dt = delta.dt
    r_rot = rotation_log(delta.delta_R.T @ (Ri.T @ Rj))
    r_vel = Ri.T @ (vj - vi - gravity * dt) - delta.delta_v
    r_pos = Ri.T @ (pj - pi - vi * dt - 0.5 * gravity * dt * dt) - delta.delta_p
    return np.concatenate([r_rot, r_vel, r_pos])


def imu_residual_jacobians(xi: ImuState, xj: ImuState, delta: PreintegratedDelta,
                           gravity: np.ndarray = GRAVITY) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual and its Jacobians w.r.t. both states' local perturbations.

    Perturbations are (d_rot, d_vel, d_pos) per state with rotations
    updated on the right: R <- R Exp(d_rot), v <- v + d_vel, p <- p + d_pos.
    Returns (residual, J_i (9x9), J_j (9x9)).
    """
    gravity = np.asarray(gravity, dtype=float).reshape(3)
    Ri, pi, vi = xi.pose.rotation, xi.pose.translation, xi.velocity
    Rj, pj, vj = xj.pose.rotation, xj.pose.translation, xj.velocity
    dt = delta.dt
    r = _residual_vector(xi, xj, delta, gravity)
    r_rot = r[0:3]
    Jr_inv = right_jacobian_inv(r_rot)
    RiT = Ri.T
    Ji = np.zeros((9, 9))
    Jj = np.zeros((9, 9))
    # Rotation block.
    Ji[0:3, 0:3] = -Jr_inv @ (Rj.T @ Ri)
    Jj[0:3, 0:3] = Jr_inv
    # Velocity block.
    Ji[3:6, 0:3] = skew(RiT @ (vj - vi - gravity * dt))
    Ji[3:6, 3:6] = -RiT
    Jj[3:6, 3:6] = RiT
    # Position block.
    Ji[6:9, 0:3] = skew(RiT @ (pj - pi - vi * dt - 0.5 * gravity * dt * dt))
    Ji[6:9, 3:6] = -RiT * dt
    Ji[6:9, 6:9] = -RiT
    Jj[6:9, 6:9] = RiT
    return r, Ji, Jj
