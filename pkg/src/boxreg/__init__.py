"""Refine a sequence of 3D bounding boxes against their point clouds with
per-frame closeness/enclosure terms and trajectory smoothness/alignment terms."""

from .geometry import BoxState, Plane, PointFrame, Track
from .losses import LossConfig, total_loss
from .optim import OptimizerSettings, RegistrationResult, register, register_sliding_window

__all__ = [
    "BoxState",
    "LossConfig",
    "OptimizerSettings",
    "Plane",
    "PointFrame",
    "RegistrationResult",
    "Track",
    "register",
    "register_sliding_window",
    "total_loss",
]
__version__ = "0.1.0"
