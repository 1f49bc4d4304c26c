"""Differentiable CT reconstruction from noisy sensor readings."""

__version__ = "0.1.0"
