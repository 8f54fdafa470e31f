"""Differentiable 2D puppet driven by 3D kinematics."""

__version__ = "0.1.0"
