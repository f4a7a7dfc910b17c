"""Angular-velocity recovery under gyroscope saturation.

A saturated gyro axis is recovered from the centripetal acceleration
measured at a known lever arm from the center of mass, valid while the
body is in free fall and rotating about an axis through the COM.  The
per-axis rate streams (measurements plus accepted recoveries) are then
smoothed by a Gaussian process with a white-noise-on-jerk motion prior,
yielding mean and variance of the rate at every IMU timestamp.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateGeometryError

log = logging.getLogger(__name__)

_MIN_LEVER_ARM = 1e-6  # m; below this the IMU sits on the rotation axis


@dataclass(frozen=True)
class ImuSample:
    """One IMU reading: body-frame rates and specific force with clip flags."""

    time: float
    angular_velocity: np.ndarray   # rad/s
    specific_force: np.ndarray     # m/s^2
    gyro_saturated: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=bool))
    accel_saturated: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=bool))

    def __post_init__(self):
        object.__setattr__(self, "angular_velocity",
                           np.asarray(self.angular_velocity, dtype=float).reshape(3))
        object.__setattr__(self, "specific_force",
                           np.asarray(self.specific_force, dtype=float).reshape(3))
        object.__setattr__(self, "gyro_saturated",
                           np.asarray(self.gyro_saturated, dtype=bool).reshape(3))
        object.__setattr__(self, "accel_saturated",
                           np.asarray(self.accel_saturated, dtype=bool).reshape(3))


@dataclass
class ImuData:
    """IMU stream as arrays; the working representation for whole runs."""

    times: np.ndarray              # (N,)
    angular_velocity: np.ndarray   # (N, 3)
    specific_force: np.ndarray     # (N, 3)
    gyro_saturated: Optional[np.ndarray] = None   # (N, 3) bool
    accel_saturated: Optional[np.ndarray] = None  # (N, 3) bool

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        n = len(self.times)
        self.angular_velocity = np.asarray(self.angular_velocity, dtype=float).reshape(n, 3)
        self.specific_force = np.asarray(self.specific_force, dtype=float).reshape(n, 3)
        if self.gyro_saturated is None:
            self.gyro_saturated = np.zeros((n, 3), dtype=bool)
        else:
            self.gyro_saturated = np.asarray(self.gyro_saturated, dtype=bool).reshape(n, 3)
        if self.accel_saturated is None:
            self.accel_saturated = np.zeros((n, 3), dtype=bool)
        else:
            self.accel_saturated = np.asarray(self.accel_saturated, dtype=bool).reshape(n, 3)
        if np.any(np.diff(self.times) < 0.0):
            raise ValueError("IMU sample times must be non-decreasing")

    def __len__(self) -> int:
        return len(self.times)

    @staticmethod
    def from_samples(samples: Sequence[ImuSample]) -> "ImuData":
        return ImuData(
            np.array([s.time for s in samples]),
            np.stack([s.angular_velocity for s in samples]),
            np.stack([s.specific_force for s in samples]),
            np.stack([s.gyro_saturated for s in samples]),
            np.stack([s.accel_saturated for s in samples]),
        )

    def sample(self, i: int) -> ImuSample:
        return ImuSample(float(self.times[i]), self.angular_velocity[i],
                         self.specific_force[i], self.gyro_saturated[i],
                         self.accel_saturated[i])

    def window(self, t0: float, t1: float) -> "ImuData":
        mask = (self.times >= t0) & (self.times <= t1)
        return ImuData(self.times[mask], self.angular_velocity[mask],
                       self.specific_force[mask], self.gyro_saturated[mask],
                       self.accel_saturated[mask])


@dataclass
class LeverArmConfig:
    """Geometry and saturation behavior of the gyro being compensated.

    ``gyro_saturation_point`` is the observed clip level, which may differ
    from the datasheet figure.  ``com_to_imu`` is the vector from the
    center of mass to the IMU, in the IMU body frame.
    """

    com_to_imu: np.ndarray
    gyro_saturation_point: float = 10.5
    saturation_detect_fraction: float = 0.98

    def __post_init__(self):
        self.com_to_imu = np.asarray(self.com_to_imu, dtype=float).reshape(3)
        if np.linalg.norm(self.com_to_imu) <= 0.0:
            raise ValueError("com_to_imu must be non-zero")
        if self.gyro_saturation_point <= 0.0:
            raise ValueError("gyro_saturation_point must be positive")
        if not 0.0 < self.saturation_detect_fraction <= 1.0:
            raise ValueError("saturation_detect_fraction must be in (0, 1]")


@dataclass
class GpConfig:
    """White-noise-on-jerk smoother parameters.

    ``q_jerk`` is the angular-jerk power spectral density; a high value
    lets the posterior follow abrupt rate changes.  Raw gyro samples get
    ``sigma2_meas``; recovered saturated-axis values get the looser
    ``sigma2_est``.  ``init_variance`` is the diffuse prior on
    (rate, rate', rate'') at the first timeline node.
    """

    q_jerk: float = 1e6            # rad^2/s^6/Hz
    sigma2_meas: float = 2.74e-5   # rad^2/s^2
    sigma2_est: float = 3.65       # rad^2/s^2
    init_variance: tuple = (1e2, 1e3, 1e4)

    def __post_init__(self):
        if min(self.q_jerk, self.sigma2_meas, self.sigma2_est) <= 0.0:
            raise ValueError("GP parameters must be strictly positive")


@dataclass(frozen=True)
class RateEstimate:
    """Posterior angular velocity at one time: per-axis mean and variance."""

    time: float
    omega_mean: np.ndarray      # rad/s
    omega_variance: np.ndarray  # rad^2/s^2, marginal per axis


@dataclass
class RateSeries:
    """Posterior rate estimates over a run, one row per IMU timestamp."""

    times: np.ndarray     # (N,)
    mean: np.ndarray      # (N, 3)
    variance: np.ndarray  # (N, 3)

    def __len__(self) -> int:
        return len(self.times)

    def at(self, i: int) -> RateEstimate:
        return RateEstimate(float(self.times[i]), self.mean[i], self.variance[i])

    def window(self, t0: float, t1: float) -> "RateSeries":
        mask = (self.times >= t0) & (self.times <= t1)
        return RateSeries(self.times[mask], self.mean[mask], self.variance[mask])


def detect_saturation(sample: ImuSample, cfg: LeverArmConfig) -> np.ndarray:
    """Per-axis saturation flags for one sample.

    An axis is flagged when its magnitude reaches the detection fraction
    of the observed saturation point, or when saturation was flagged at
    the source.
    """
    threshold = cfg.saturation_detect_fraction * cfg.gyro_saturation_point
    return (np.abs(sample.angular_velocity) >= threshold) | sample.gyro_saturated


def lever_arm(t_vec: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Perpendicular vector from the rotation axis to the IMU.

    r = t - (t . e) e for unit axis e.  Raises when the residual is so
    short the IMU effectively sits on the axis and centripetal recovery
    is impossible.
    """
    t_vec = np.asarray(t_vec, dtype=float).reshape(3)
    e = np.asarray(e, dtype=float).reshape(3)
    r = t_vec - np.dot(t_vec, e) * e
    if np.linalg.norm(r) < _MIN_LEVER_ARM:
        raise DegenerateGeometryError(
            "IMU lies on the rotation axis (|r| < 1e-6 m); rate recovery is degenerate")
    return r


def estimate_saturated_rate(sample: ImuSample, saturated_axis: int,
                            prev_omega: np.ndarray,
                            cfg: LeverArmConfig) -> Optional[float]:
    """Signed rate of the single saturated axis, or None when rejected.

    The rotation axis comes from the previous full rate estimate.  The
    accelerometer is projected onto the unit vector pointing from the
    IMU toward the axis; that centripetal component gives the squared
    total rate, from which the two unsaturated axis rates are removed.
    Noise can push the radicand negative (rejected) or the magnitude
    below the clip level (clamped to it).  The sign is taken from the
    clipped measurement itself.
    """
    prev_omega = np.asarray(prev_omega, dtype=float).reshape(3)
    norm_prev = np.linalg.norm(prev_omega)
    if norm_prev <= 0.0:
        raise ValueError("prev_omega must be non-zero to define the rotation axis")
    e = prev_omega / norm_prev
    try:
        r = lever_arm(cfg.com_to_imu, e)
    except DegenerateGeometryError:
        return None
    r_norm = np.linalg.norm(r)
    x_hat = -r / r_norm
    a_x = float(np.dot(sample.specific_force, x_hat))
    others = [k for k in range(3) if k != saturated_axis]
    other_sq = float(np.sum(sample.angular_velocity[others] ** 2))
    radicand = a_x / r_norm - other_sq
    if radicand < 0.0:
        return None
    magnitude = max(np.sqrt(radicand), cfg.gyro_saturation_point)
    measured = sample.angular_velocity[saturated_axis]
    sign = 1.0 if measured >= 0.0 else -1.0
    return float(sign * magnitude)


def _transition(dt: float, q_jerk: float) -> tuple[np.ndarray, np.ndarray]:
    """Constant-jerk transition matrix and process covariance over dt."""
    F = np.array([[1.0, dt, 0.5 * dt * dt],
                  [0.0, 1.0, dt],
                  [0.0, 0.0, 1.0]])
    d2, d3, d4, d5 = dt * dt, dt ** 3, dt ** 4, dt ** 5
    Q = q_jerk * np.array([[d5 / 20.0, d4 / 8.0, d3 / 6.0],
                           [d4 / 8.0, d3 / 3.0, d2 / 2.0],
                           [d3 / 6.0, d2 / 2.0, dt]])
    return F, Q


def gp_smooth(measurements: Sequence[tuple], query_times: np.ndarray,
              cfg: GpConfig) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-interval smoothing of one scalar rate channel.

    ``measurements`` is a sequence of (time, value, variance) with
    non-decreasing times.  Runs a forward Kalman filter and backward
    smoother over the union of measurement and query times, returning
    the posterior mean and marginal variance of the rate at each query
    time.
    """
    if len(measurements) == 0:
        raise ValueError("gp_smooth needs at least one measurement")
    meas = np.asarray([[m[0], m[1], m[2]] for m in measurements], dtype=float)
    if np.any(np.diff(meas[:, 0]) < 0.0):
        raise ValueError("measurement times must be non-decreasing")
    query_times = np.atleast_1d(np.asarray(query_times, dtype=float))

    # Shared timeline: measurement and query instants, merged exactly.
    all_times = np.unique(np.concatenate([meas[:, 0], query_times]))
    n = len(all_times)
    meas_node = np.searchsorted(all_times, meas[:, 0])
    by_node: list[list[int]] = [[] for _ in range(n)]
    for j, node in enumerate(meas_node):
        by_node[node].append(j)

    P0 = np.diag(cfg.init_variance).astype(float)

    m_pred = np.zeros((n, 3))
    P_pred = np.zeros((n, 3, 3))
    m_filt = np.zeros((n, 3))
    P_filt = np.zeros((n, 3, 3))
    Fs = np.zeros((n - 1, 3, 3)) if n > 1 else np.zeros((0, 3, 3))

    # Diffuse prior at the first node, centered on the first measured
    # value so a lone measurement is reproduced exactly.
    m, P = np.array([meas[0, 1], 0.0, 0.0]), P0.copy()
    for i in range(n):
        if i > 0:
            dt = all_times[i] - all_times[i - 1]
            F, Q = _transition(dt, cfg.q_jerk)
            Fs[i - 1] = F
            m = F @ m
            P = F @ P @ F.T + Q
        m_pred[i], P_pred[i] = m, P
        for j in by_node[i]:
            y, R = meas[j, 1], meas[j, 2]
            S = P[0, 0] + R
            K = P[:, 0] / S
            m = m + K * (y - m[0])
            IKH = np.eye(3) - np.outer(K, [1.0, 0.0, 0.0])
            P = IKH @ P @ IKH.T + R * np.outer(K, K)   # Joseph form
            P = 0.5 * (P + P.T)
        m_filt[i], P_filt[i] = m, P

    # Backward (Rauch-Tung-Striebel) pass.
    m_smooth = m_filt.copy()
    P_smooth = P_filt.copy()
    for i in range(n - 2, -1, -1):
        G = np.linalg.solve(P_pred[i + 1].T, (P_filt[i] @ Fs[i].T).T).T
        m_smooth[i] = m_filt[i] + G @ (m_smooth[i + 1] - m_pred[i + 1])
        P_smooth[i] = P_filt[i] + G @ (P_smooth[i + 1] - P_pred[i + 1]) @ G.T
        P_smooth[i] = 0.5 * (P_smooth[i] + P_smooth[i].T)

    q_idx = np.searchsorted(all_times, query_times)
    return m_smooth[q_idx, 0], P_smooth[q_idx, 0, 0]


def saave_run(imu: ImuData, cfg: LeverArmConfig, gp: GpConfig) -> RateSeries:
    """Recover and smooth angular velocities over a full IMU stream.

    Per sample and axis: unsaturated readings become measurements with
    the datasheet variance; a single saturated axis is recovered through
    the lever arm (looser variance) when accepted; rejections leave a
    gap for the motion prior to bridge.  Each axis is smoothed
    independently and the posterior is evaluated at every IMU timestamp.
    """
    n = len(imu)
    if n == 0:
        raise ValueError("empty IMU stream")
    measurements: list[list[tuple]] = [[], [], []]
    prev_omega: Optional[np.ndarray] = None
    skipped_no_seed = 0
    skipped_multi_axis = 0
    rejected = 0

    for i in range(n):
        sample = imu.sample(i)
        sat = detect_saturation(sample, cfg)
        values = np.full(3, np.nan)
        for k in range(3):
            if not sat[k]:
                measurements[k].append((sample.time, sample.angular_velocity[k],
                                        gp.sigma2_meas))
                values[k] = sample.angular_velocity[k]
        n_sat = int(np.count_nonzero(sat))
        if n_sat == 1:
            axis = int(np.argmax(sat))
            if prev_omega is None:
                skipped_no_seed += 1
            else:
                est = estimate_saturated_rate(sample, axis, prev_omega, cfg)
                if est is None:
                    rejected += 1
                else:
                    measurements[axis].append((sample.time, est, gp.sigma2_est))
                    values[axis] = est
        elif n_sat > 1:
            skipped_multi_axis += 1
        if not np.any(np.isnan(values)):
            prev_omega = values

    if skipped_no_seed:
        log.warning("saave: %d saturated samples before the first full 3-axis "
                    "estimate were skipped", skipped_no_seed)
    if skipped_multi_axis:
        log.warning("saave: %d samples had multiple saturated axes and were left "
                    "as gaps", skipped_multi_axis)
    if rejected:
        log.info("saave: %d saturated-axis estimates rejected", rejected)

    mean = np.zeros((n, 3))
    var = np.zeros((n, 3))
    for k in range(3):
        if not measurements[k]:
            raise ValueError(f"gyro axis {k} produced no usable measurements")
        mean[:, k], var[:, k] = gp_smooth(measurements[k], imu.times, gp)
    return RateSeries(imu.times.copy(), mean, var)


def rates_from_raw(imu: ImuData, sigma2_meas: float) -> RateSeries:
    """Rate series that passes raw (possibly clipped) gyro readings through.

    Used when saturation-aware recovery is disabled; every sample gets
    the datasheet measurement variance.
    """
    n = len(imu)
    return RateSeries(imu.times.copy(), imu.angular_velocity.copy(),
                      np.full((n, 3), float(sigma2_meas)))
