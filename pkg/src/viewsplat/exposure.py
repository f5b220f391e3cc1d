"""Exposure correction by matching the closest capture.

Auto-exposure makes captures of the same scene disagree about overall
brightness, which a rendered image has no way to guess.  Rather than learn a
correction per training view, the rendered colors are fit to the colors the
nearest capture observed at the same surface points: a single 3x4 affine map
(3x3 channel mixing plus an offset) solved in closed form over the pixels
both images trust.  The solve is plain data; gradients pass through the
application of the fitted map, never through the fit itself.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Value, as_value, constant

__all__ = [
    "MIN_FIT_PIXELS", "TIKHONOV_DAMPING", "CONDITION_FLAG",
    "ExposureAffine", "identity_affine", "fit_affine", "apply_exposure",
]

MIN_FIT_PIXELS = 50        # below this the fit is meaningless; keep identity
TIKHONOV_DAMPING = 1e-8    # diagonal damping of the normal equations
CONDITION_FLAG = 1e10      # condition number above which the fit is suspect


@dataclass
class ExposureAffine:
    """A fitted color map c -> A[:, :3] @ c + A[:, 3]."""

    A: np.ndarray           # (3, 4)
    condition: float        # condition number of the damped normal matrix
    n_pixels: int           # pixels that entered the fit
    fitted: bool            # False when the identity fallback was returned
    flagged: bool           # True when the design was nearly rank-deficient


def identity_affine(n_pixels: int = 0) -> ExposureAffine:
    return ExposureAffine(
        A=np.hstack([np.eye(3), np.zeros((3, 1))]),
        condition=np.nan,
        n_pixels=n_pixels,
        fitted=False,
        flagged=False,
    )


def _objective(a: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    return float(((x @ a[:, :3].T + a[:, 3] - y) ** 2).sum())


def fit_affine(base_colors, warp_colors, valid: np.ndarray) -> ExposureAffine:
    """Least-squares affine from rendered colors to warped capture colors.

    Solved through damped normal equations over the valid pixels.  The result
    is never worse than leaving the colors alone: if damping or degeneracy
    makes the solved map lose to the identity on the actual objective, the
    identity is returned instead (flagged).  Inputs may be Values; only their
    data is read, so the fit itself contributes no gradients.
    """
    x = np.asarray(getattr(base_colors, "data", base_colors), dtype=np.float64)
    y = np.asarray(getattr(warp_colors, "data", warp_colors), dtype=np.float64)
    x = x.reshape(-1, 3)[np.asarray(valid, dtype=bool).ravel()]
    y = y.reshape(-1, 3)[np.asarray(valid, dtype=bool).ravel()]
    n = len(x)
    if n < MIN_FIT_PIXELS:
        warnings.warn(
            f"exposure fit skipped: only {n} usable pixels "
            f"(need {MIN_FIT_PIXELS}); keeping identity"
        )
        return identity_affine(n)
    h = np.hstack([x, np.ones((n, 1))])
    g = h.T @ h + TIKHONOV_DAMPING * np.eye(4)
    rhs = h.T @ y
    condition = float(np.linalg.cond(g))
    a = np.linalg.solve(g, rhs).T
    flagged = condition > CONDITION_FLAG
    identity = identity_affine(n)
    # damping keeps the solve off the exact optimum by a vanishing amount, so
    # only a meaningful loss to the identity counts as a failed fit
    if _objective(a, x, y) > _objective(identity.A, x, y) + 1e-10 * n:
        return ExposureAffine(
            A=identity.A, condition=condition, n_pixels=n,
            fitted=False, flagged=True,
        )
    return ExposureAffine(
        A=a, condition=condition, n_pixels=n, fitted=True, flagged=flagged,
    )


def apply_exposure(affine: ExposureAffine, colors) -> Value:
    """Map colors (..., 3) through the fitted affine; A stays constant."""
    colors = as_value(colors)
    lin = constant(affine.A[:, :3].T)
    return colors @ lin + constant(affine.A[:, 3])
