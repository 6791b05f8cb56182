"""Pose-regression fusion toolkit: quaternion geometry, a small numpy network,
weight-sewing early fusion, pose-level late fusion, and evaluation."""

__version__ = "0.1.0"

from .errors import NumericalError, PoseFuseError, ValidationError

__all__ = ["__version__", "PoseFuseError", "ValidationError", "NumericalError"]
