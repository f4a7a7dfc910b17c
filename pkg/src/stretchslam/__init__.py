"""Lidar-inertial estimation toolkit for aggressive motion.

Recovers angular velocity while a gyroscope axis is saturated, registers
and deskews lidar scans with trajectory continuity enforced across scan
boundaries, and ships a synthetic aggressive-motion simulator plus the
metric suite used to validate both.
"""

from .errors import DegenerateGeometryError, RegistrationError
from .geometry import (
    ImuState,
    NnIndex,
    PointCloud,
    Pose,
    Trajectory,
    nn_index_build,
    nn_query,
    pose_distance,
    pose_interpolate,
    rotation_exp,
    rotation_log,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateGeometryError",
    "RegistrationError",
    "ImuState",
    "NnIndex",
    "PointCloud",
    "Pose",
    "Trajectory",
    "nn_index_build",
    "nn_query",
    "pose_distance",
    "pose_interpolate",
    "rotation_exp",
    "rotation_log",
    "__version__",
]
