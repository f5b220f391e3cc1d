"""Training objectives and image metrics.

The photometric objective blends a masked L1 term with a masked structural
similarity term.  Structural similarity is computed per channel with a
Gaussian-weighted 11x11 window and averaged only over windows whose full
support is valid: invalid pixels never leak into a kept window, and windows
overlapping the frame border are dropped for the same reason (the zero
padding would otherwise pollute their statistics).

Additional terms compare warped source views against the ground-truth frame
and penalize disagreement between rendered normals and normals implied by
the rendered point map.  All loss functions return scalar ``Value`` nodes so
gradients flow back to scene and network parameters; the metric helpers at
the bottom are plain floats for logging.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Value, as_value

__all__ = [
    "L1_WEIGHT",
    "SSIM_WINDOW",
    "SSIM_SIGMA",
    "SSIM_C1",
    "SSIM_C2",
    "NORMAL_CROSS_MIN",
    "gaussian_window",
    "ssim_index",
    "mixed_loss",
    "rgb_loss",
    "photo_loss",
    "normal_loss",
    "total_loss",
    "mse",
    "psnr",
    "ssim_value",
]

# Weight of the L1 term inside mixed_loss; the SSIM term gets the rest.
L1_WEIGHT = 0.8

# Structural similarity settings: window size, Gaussian sigma, and the two
# stabilizing constants for a dynamic range of 1.0.
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# Cross products shorter than this give no reliable surface orientation and
# are excluded from the normal consistency loss.
NORMAL_CROSS_MIN = 1e-9

# A window counts as pure when its accumulated mask weight reaches 1 up to
# this slack.  The smallest corner weight of the 11x11 Gaussian is ~2.4e-6,
# so a single invalid tap always drops the window while float rounding of a
# fully valid one never does.
_PURE_WINDOW_TOL = 1e-7


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian kernel with odd side length."""
    if size % 2 == 0 or size < 1:
        raise ValueError(f"gaussian_window: size must be odd and positive, got {size}")
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k1 = np.exp(-0.5 * (r / sigma) ** 2)
    k2 = np.outer(k1, k1)
    return k2 / k2.sum()


def _separable_window() -> tuple[np.ndarray, np.ndarray]:
    """The window as a normalized column/row pair for two-pass filtering."""
    r = np.arange(SSIM_WINDOW, dtype=np.float64) - (SSIM_WINDOW - 1) / 2.0
    k1 = np.exp(-0.5 * (r / SSIM_SIGMA) ** 2)
    k1 = k1 / k1.sum()
    return k1[:, None], k1[None, :]


def _channels(data: np.ndarray) -> int:
    if data.ndim == 2:
        return 1
    if data.ndim == 3:
        return data.shape[2]
    raise ValueError(f"expected (H,W) or (H,W,C) image, got shape {data.shape}")


def _as_mask(valid, h: int, w: int) -> np.ndarray:
    if valid is None:
        return np.ones((h, w), dtype=bool)
    m = np.asarray(valid, dtype=bool)
    if m.shape != (h, w):
        raise ValueError(f"mask shape {m.shape} does not match image {h}x{w}")
    return m


def _expand_mask(m: np.ndarray, data: np.ndarray) -> np.ndarray:
    return m if data.ndim == 2 else m[:, :, None]


def ssim_index(img, ref, valid=None) -> tuple[Value, int]:
    """Mean structural similarity over pure windows.

    Returns ``(ssim, n_windows)`` where ``n_windows`` counts the windows
    whose full 11x11 support lies inside the frame and on valid pixels.
    With no pure window the index is a constant 0 and ``n_windows`` is 0;
    callers should drop the term in that case.  Identical images score
    exactly 1 on every pure window.
    """
    x = as_value(img)
    y = as_value(ref)
    if x.data.shape != y.data.shape:
        raise ValueError(
            f"ssim_index: shape mismatch {x.data.shape} vs {y.data.shape}")
    h, w = x.data.shape[:2]
    c = _channels(x.data)
    m = _as_mask(valid, h, w)
    kcol, krow = _separable_window()

    def blur(z):
        # The window is an outer product, so two 1-D passes match the 2-D
        # filter at a fraction of the taps.
        return ad.filter2d(ad.filter2d(z, kcol), krow)

    # Window purity from the mask alone.  Zero padding keeps border windows
    # below full weight, so they are dropped together with masked ones.
    weight = blur(ad.constant(m.astype(np.float64))).data
    pure = weight >= 1.0 - _PURE_WINDOW_TOL
    n_pure = int(pure.sum())
    if n_pure == 0:
        return ad.constant(0.0), 0

    me = _expand_mask(m, x.data)
    xm = ad.mask_values(me, x)
    ym = ad.mask_values(me, y)

    mu_x = blur(xm)
    mu_y = blur(ym)
    sig_x = blur(xm * xm) - mu_x * mu_x
    sig_y = blur(ym * ym) - mu_y * mu_y
    sig_xy = blur(xm * ym) - mu_x * mu_y

    num = (mu_x * mu_y * 2.0 + SSIM_C1) * (sig_xy * 2.0 + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sig_x + sig_y + SSIM_C2)
    smap = num / den

    kept = ad.mask_values(_expand_mask(pure, x.data), smap)
    return ad.vsum(kept) / float(c * n_pure), n_pure


def mixed_loss(img, ref, valid=None) -> Value:
    """Masked photometric distance: 0.8 L1 plus 0.2 structural dissimilarity.

    The L1 mean runs over valid pixels and channels only.  When no window
    survives the purity rule (tiny or heavily masked images) the similarity
    term is dropped and the L1 term keeps its 0.8 weight, so identical
    images still score exactly zero.
    """
    x = as_value(img)
    y = as_value(ref)
    if x.data.shape != y.data.shape:
        raise ValueError(
            f"mixed_loss: shape mismatch {x.data.shape} vs {y.data.shape}")
    h, w = x.data.shape[:2]
    c = _channels(x.data)
    m = _as_mask(valid, h, w)
    n_valid = int(m.sum())
    if n_valid == 0:
        return ad.constant(0.0)

    diff = ad.absval(ad.mask_values(_expand_mask(m, x.data), x - y))
    l1 = ad.vsum(diff) / float(c * n_valid)

    sim, n_windows = ssim_index(img, ref, valid)
    if n_windows == 0:
        return l1 * L1_WEIGHT
    return l1 * L1_WEIGHT + (1.0 - sim) * (1.0 - L1_WEIGHT)


def rgb_loss(base, final, real, gamma: float, valid=None) -> Value:
    """Blend of photometric losses for the base and corrected images.

    ``gamma`` weights the base render against the network-corrected final
    image; schedules move it from 1 toward 0.5 as training progresses.
    """
    return (mixed_loss(base, real, valid) * float(gamma)
            + mixed_loss(final, real, valid) * (1.0 - float(gamma)))


def photo_loss(warped, real) -> Value:
    """Mean photometric loss of warped source views against the real frame.

    ``warped`` is a sequence of ``(image, valid)`` pairs, each scored with
    its own validity mask.  An empty sequence contributes a constant zero;
    callers should flag that case since it means no source view survived
    selection.
    """
    terms = [mixed_loss(img, real, valid) for img, valid in warped]
    if not terms:
        return ad.constant(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / float(len(terms))


def normal_loss(normals, pointmap, raydirs, valid) -> Value:
    """Disagreement between rendered normals and point-map normals.

    The point map is differenced centrally along both image axes; the cross
    product of the two tangents gives a surface normal that is flipped to
    face the camera and normalized.  Pixels qualify only when the full
    five-point stencil is valid and the cross product is long enough to
    orient reliably.  Each qualifying pixel contributes ``1 - n . n_d``
    which lies in [0, 2] because the rendered normal blend never exceeds
    unit length.
    """
    n_img = as_value(normals)
    x_img = as_value(pointmap)
    h, w = x_img.data.shape[:2]
    if x_img.data.shape != (h, w, 3) or n_img.data.shape != (h, w, 3):
        raise ValueError("normal_loss: normals and pointmap must be (H,W,3)")
    if h < 3 or w < 3:
        return ad.constant(0.0)

    du = (x_img[:, 2:, :] - x_img[:, :-2, :])[1:-1, :, :] * 0.5
    dv = (x_img[2:, :, :] - x_img[:-2, :, :])[:, 1:-1, :] * 0.5

    cx = du[:, :, 1:2] * dv[:, :, 2:3] - du[:, :, 2:3] * dv[:, :, 1:2]
    cy = du[:, :, 2:3] * dv[:, :, 0:1] - du[:, :, 0:1] * dv[:, :, 2:3]
    cz = du[:, :, 0:1] * dv[:, :, 1:2] - du[:, :, 1:2] * dv[:, :, 0:1]
    raw = ad.concat([cx, cy, cz], axis=2)

    vm = np.asarray(valid, dtype=bool)
    if vm.shape != (h, w):
        raise ValueError(f"normal_loss: mask shape {vm.shape} != {(h, w)}")
    stencil = (vm[1:-1, 1:-1] & vm[1:-1, 2:] & vm[1:-1, :-2]
               & vm[2:, 1:-1] & vm[:-2, 1:-1])
    cross_len = np.linalg.norm(raw.data, axis=2)
    omega = stencil & (cross_len >= NORMAL_CROSS_MIN)
    count = int(omega.sum())
    if count == 0:
        return ad.constant(0.0)

    # Swap excluded lanes for a unit placeholder before normalizing so the
    # norm stays bounded away from zero everywhere on the tape.
    safe = ad.where_mask(omega[:, :, None], raw, np.array([1.0, 0.0, 0.0]))
    unit = safe / ad.l2norm(safe, axis=2, keepdims=True)

    rays = raydirs.data if isinstance(raydirs, Value) else np.asarray(raydirs)
    rays = rays.reshape(h, w, 3)[1:-1, 1:-1, :]
    facing = np.where(np.sum(unit.data * rays, axis=2) > 0.0, -1.0, 1.0)

    agree = ad.vsum(n_img[1:-1, 1:-1, :] * unit * facing[:, :, None], axis=2)
    per_pixel = 1.0 - agree
    return ad.vsum(ad.mask_values(omega, per_pixel)) / float(count)


def total_loss(rgb, photo, normal, lambda_photo: float, lambda_normal: float) -> Value:
    """Weighted sum of the three training terms."""
    return rgb + photo * float(lambda_photo) + normal * float(lambda_normal)


def mse(img, ref) -> float:
    """Mean squared error over all pixels and channels, plain float."""
    a = img.data if isinstance(img, Value) else np.asarray(img, dtype=np.float64)
    b = ref.data if isinstance(ref, Value) else np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(img, ref) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    Identical images return positive infinity.
    """
    m = mse(img, ref)
    if m == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / m)


def ssim_value(img, ref, valid=None) -> float:
    """Structural similarity as a plain float for reporting."""
    sim, n = ssim_index(img, ref, valid)
    return float(sim.data) if n > 0 else float("nan")
