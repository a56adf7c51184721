"""Bi-level calibration of noise covariances and kinematic offsets for a
legged-robot smoother, with exact sensitivities of the lower-level MAP
estimate."""

from .blocktri import BACKEND
from .errors import CalibError
from .manifold import ManifoldState, Pose, Rotation, Trajectory
from .params import CalibrationParams, FeasibleSet, ParamLayout
from .robot import RobotKinematics

__all__ = [
    "BACKEND",
    "CalibError",
    "CalibrationParams",
    "FeasibleSet",
    "ManifoldState",
    "ParamLayout",
    "Pose",
    "RobotKinematics",
    "Rotation",
    "Trajectory",
]

__version__ = "0.1.0"
