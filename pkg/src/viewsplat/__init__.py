"""Differentiable Gaussian splatting with view-warped color residuals.

The package renders a scene of 3-D Gaussians, warps neighboring source views
through per-pixel Gaussian and ray intersections, predicts a color residual
with a small convolutional network, optionally corrects exposure against the
nearest source view, and trains everything end to end with a built-in
reverse-mode autodiff engine.  Pure numpy, CPU only, double precision.
"""

from .autodiff import (
    Tape,
    Value,
    backward,
    constant,
    finite_difference_check,
)

__all__ = [
    "Tape",
    "Value",
    "backward",
    "constant",
    "finite_difference_check",
]
