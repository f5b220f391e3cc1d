"""Warping source views onto a target view through blended surface records.

Each target pixel carries a few plane intersections (the median records from
the renderer).  Projecting those points into a neighboring capture and
bilinear-sampling its image transports real observed colors onto the target
view; blending them with the same weights the renderer used keeps the result
consistent with the splatted surface.  Gradients flow through the fractional
sample positions and the blending weights; which texels are touched and which
records count stay fixed data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value, constant
from .rasterizer import MIN_WEIGHT_SUM, NEAR_PLANE
from .scene import Camera, unit_rows

__all__ = [
    "WarpedView", "project_points", "bilinear_sample", "warp_median_records",
    "direction_features", "candidate_source_views", "consistency_mask",
    "first_m_passing", "BORDER_EPS",
]

# Samples this close to the texel lattice edge (in pixels) still count as
# inside: reprojecting a pixel center lands back on the frame border only up
# to floating-point rounding, and the fractional weights clamp the overshoot
# onto the boundary texel, so nothing outside the image is ever read.
BORDER_EPS = 1e-6


def project_points(points: Value, cam: Camera):
    """Pixel coordinates and depth of world points (..., 3) in a camera.

    Points at or behind the near plane divide by a placeholder depth instead
    of their own, so every output stays finite and the tape never records a
    division blowup; their (u, v) are meaningless and z tells the caller so.
    """
    pc = points @ constant(cam.R.T) + constant(cam.t)
    x = pc[..., 0]
    y = pc[..., 1]
    z = pc[..., 2]
    z_safe = ad.where_mask(z.data > NEAR_PLANE, z, 1.0)
    u = cam.fx * (x / z_safe) + cam.cx
    v = cam.fy * (y / z_safe) + cam.cy
    return u, v, z


def bilinear_sample(image: np.ndarray, u: Value, v: Value, valid: np.ndarray):
    """Sample an (H, W, 3) image at fractional pixel positions.

    The four touching texels are fixed by the sample's data value; gradients
    reach the coordinates through the fractional weights.  A sample is valid
    only when it sits inside the texel lattice ([0, w-1] x [0, h-1]), so
    every tap that carries weight is a real image value and nothing beyond
    the border is ever fabricated; outside positions are simply marked
    missing.  Returns (M, 3) colors (zero where invalid) and the validity
    mask.
    """
    h, w, _ = image.shape
    ud, vd = u.data, v.data
    with np.errstate(invalid="ignore"):
        ok = (
            np.asarray(valid, dtype=bool)
            & np.isfinite(ud) & np.isfinite(vd)
            & (ud >= -BORDER_EPS) & (ud <= w - 1.0 + BORDER_EPS)
            & (vd >= -BORDER_EPS) & (vd <= h - 1.0 + BORDER_EPS)
        )
    u = ad.mask_values(ok, u)        # rejected lanes may hold inf/NaN: replace
    v = ad.mask_values(ok, v)        # them before any arithmetic touches them
    u0i = np.clip(np.floor(u.data), 0, w - 2).astype(int)
    v0i = np.clip(np.floor(v.data), 0, h - 2).astype(int)
    fu = ad.clamp(u - u0i, 0.0, 1.0) * ok
    fv = ad.clamp(v - v0i, 0.0, 1.0) * ok
    flat = image.reshape(-1, 3)
    base_idx = v0i * w + u0i
    c00 = constant(flat[base_idx])
    c01 = constant(flat[base_idx + 1])
    c10 = constant(flat[base_idx + w])
    c11 = constant(flat[base_idx + w + 1])
    wu1, wv1 = fu.reshape((-1, 1)), fv.reshape((-1, 1))
    wu0, wv0 = 1.0 - wu1, 1.0 - wv1
    color = (
        c00 * (wu0 * wv0) + c01 * (wu1 * wv0)
        + c10 * (wu0 * wv1) + c11 * (wu1 * wv1)
    )
    return color * ok[:, None], ok


@dataclass
class WarpedView:
    """One source view transported onto the target's pixel grid."""

    colors: Value            # (P, 3) weight-blended sampled colors
    valid: np.ndarray        # (P,) bool: enough blended weight survived
    weight_sum: Value        # (P,) surviving blend weight per pixel
    sample_valid: np.ndarray  # (K, P) bool: per-record warp validity


def warp_median_records(src_cam: Camera, src_image: np.ndarray, med_point: Value,
                        med_weight: Value, med_valid: np.ndarray) -> WarpedView:
    """Warp a source capture onto the target through its median records.

    Every record's plane intersection is projected into the source view and
    sampled there; the samples blend with the renderer's own weights,
    renormalized over the records that actually landed inside the source
    frame at a usable depth.
    """
    K, p, _ = med_point.shape
    u, v, z = project_points(med_point.reshape((-1, 3)), src_cam)
    in_front = z.data > NEAR_PLANE
    colors, ok = bilinear_sample(src_image, u, v, med_valid.ravel() & in_front)
    ok = ok.reshape(K, p)
    w = med_weight * ok
    weight_sum = w.sum(axis=0)
    valid = weight_sum.data >= MIN_WEIGHT_SUM
    den = ad.where_mask(valid, weight_sum, 1.0)
    blended = (w.reshape((K, p, 1)) * colors.reshape((K, p, 3))).sum(axis=0)
    return WarpedView(
        colors=blended / den.reshape((-1, 1)),
        valid=valid,
        weight_sum=weight_sum,
        sample_valid=ok,
    )


def direction_features(target_cam: Camera, src_cam: Camera, pointmap: Value,
                       raydirs: np.ndarray) -> Value:
    """Per-pixel camera geometry features, shape (P, 4).

    Three components give the source camera's offset from the target camera;
    the fourth is the cosine between the two viewing directions at the
    pixel's surface point (the target's ray and the source-to-point
    direction), which is 1 when the views coincide.
    """
    p = pointmap.shape[0]
    offset = np.broadcast_to(src_cam.center - target_cam.center, (p, 3))
    to_point = unit_rows(pointmap - constant(src_cam.center))
    cosine = (to_point * constant(raydirs)).sum(axis=1, keepdims=True)
    return ad.concat([constant(offset), cosine], axis=1)


def candidate_source_views(cameras: list, target_index: int, allowed, S: int) -> list:
    """The S allowed views nearest the target by camera center distance."""
    o = cameras[target_index].center
    ranked = sorted(
        (float(np.linalg.norm(cameras[i].center - o)), i)
        for i in allowed
        if i != target_index
    )
    return [i for _, i in ranked[:S]]


def consistency_mask(points: np.ndarray, valid: np.ndarray, target_cam: Camera,
                     src_cam: Camera, src_pointmap: np.ndarray,
                     src_valid: np.ndarray, tau: float) -> np.ndarray:
    """Pixels whose surface point the source view agrees it can see.

    Each target surface point is reprojected into the source view, where the
    source's own surface (its point map, bilinearly interpolated at the
    landing position) says what the source actually observed along that line
    of sight.  Both points are then read as depths from the target camera; if
    something sat in front of the surface for the source, its observed point
    is far closer and the relative depth gap |z - z'| / (z + z') blows past
    tau.  Co-visible pixels agree to interpolation error, far below any
    sensible tau.  Out-of-frame or behind-camera projections fail, as do
    pixels either side considers invalid.  Plain data end to end: this
    drives masks, not gradients.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    h, w = src_cam.height, src_cam.width
    with np.errstate(all="ignore"):
        u, v, z = src_cam.project(pts)
        inb = (
            np.isfinite(u) & np.isfinite(v)
            & (u >= -BORDER_EPS) & (u <= w - 1.0 + BORDER_EPS)
            & (v >= -BORDER_EPS) & (v <= h - 1.0 + BORDER_EPS)
            & (z > NEAR_PLANE)
        )
    u0i = np.clip(np.nan_to_num(np.floor(u)), 0, w - 2).astype(int)
    v0i = np.clip(np.nan_to_num(np.floor(v)), 0, h - 2).astype(int)
    fu = np.clip(np.nan_to_num(u) - u0i, 0.0, 1.0)[:, None]
    fv = np.clip(np.nan_to_num(v) - v0i, 0.0, 1.0)[:, None]
    q = v0i * w + u0i
    sv = np.asarray(src_valid, dtype=bool).ravel()
    corners_ok = sv[q] & sv[q + 1] & sv[q + w] & sv[q + w + 1]
    pm = np.asarray(src_pointmap, dtype=np.float64).reshape(-1, 3)
    seen = (
        pm[q] * (1.0 - fu) * (1.0 - fv) + pm[q + 1] * fu * (1.0 - fv)
        + pm[q + w] * (1.0 - fu) * fv + pm[q + w + 1] * fu * fv
    )
    z_t = target_cam.to_camera(pts)[:, 2]
    z_s = target_cam.to_camera(seen)[:, 2]
    total = z_t + z_s
    ok = np.asarray(valid, dtype=bool).ravel() & inb & corners_ok & (total > 1e-9)
    with np.errstate(invalid="ignore"):
        rel = np.abs(z_t - z_s) / np.where(total > 1e-9, total, 1.0)
    return ok & (rel <= tau)


def first_m_passing(masks: np.ndarray, m: int) -> np.ndarray:
    """Keep at most the first m True entries per column of a (S, P) mask."""
    masks = np.asarray(masks, dtype=bool)
    return masks & (np.cumsum(masks, axis=0) <= m)
