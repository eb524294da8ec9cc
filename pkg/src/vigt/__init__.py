"""Evaluation and dense pseudo-ground-truth generation for visual-inertial
trajectories anchored on surveyed control points."""

__version__ = "0.1.0"

from .geometry import (
    CameraKind,
    CameraModel,
    RigCalibration,
    RigidPose,
    Rotation,
    Similarity,
    Trajectory,
)

__all__ = [
    "CameraKind",
    "CameraModel",
    "RigCalibration",
    "RigidPose",
    "Rotation",
    "Similarity",
    "Trajectory",
    "__version__",
]
