"""Gradient-based discrete gate sizing with a differentiable timing model."""

__version__ = "0.1.0"
