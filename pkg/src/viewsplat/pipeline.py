"""One differentiable forward pass from scene parameters to training losses.

For a chosen target view the pipeline rasterizes the base image, picks
nearby source views, validates them per pixel with the relative depth
consistency check, optionally fits the closed-form exposure correction
against the nearest source view, warps the survivors through the median
records, runs the residual network over the pooled warp features, and
finally assembles the loss terms.

Source-view selection and the per-pixel consistency masks are discrete
choices computed from current data; gradients flow through the selected
values, never through the selection itself.  Candidate point maps are
forward-only renders of the current parameters and sit on no tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Value, constant
from .exposure import ExposureAffine, apply_exposure, fit_affine, identity_affine
from .rasterizer import WARP_ALPHA_MIN, RenderOutput, render, render_scene
from .residual import FEATURE_DIM, decode_residual, extract_and_pool, compose_final
from .scene import Scene
from .warp import (
    WarpedView,
    candidate_source_views,
    consistency_mask,
    direction_features,
    first_m_passing,
    warp_median_records,
)

__all__ = [
    "DEFAULT_TAU",
    "DEFAULT_CANDIDATES",
    "DEFAULT_VIEWS",
    "DEFAULT_MEDIAN",
    "SourceView",
    "FrameRender",
    "FrameLosses",
    "candidate_pointmap",
    "render_frame",
    "frame_losses",
]

# Depth consistency threshold, candidate pool size, views kept per pixel,
# and the median window width.
DEFAULT_TAU = 0.001
DEFAULT_CANDIDATES = 4
DEFAULT_VIEWS = 3
DEFAULT_MEDIAN = 4


@dataclass
class SourceView:
    """One warped source view that contributes features and photo loss."""

    cam_index: int
    colors: Value          # (P, 3) blended warp colors
    image: Value           # (H, W, 3) the same colors on the pixel grid
    valid: np.ndarray      # (P,) consistency & coverage & warp validity
    dc: Value              # (P, 3) warp color minus rendered color
    dd: Value              # (P, 4) camera offset and viewing-angle cosine


@dataclass
class FrameRender:
    """Everything one target-view forward pass produces."""

    target_index: int
    render: RenderOutput
    base: Value                    # (H, W, 3) rasterized colors
    corrected: Value               # exposure-corrected colors (base if off)
    residual: Value | None         # (H, W, 3) network prediction
    final: Value | None            # corrected + residual
    pooled: Value | None           # (P, FEATURE_DIM) pooled warp features
    views: list = field(default_factory=list)       # SourceView entries
    candidates: list = field(default_factory=list)  # candidate cam indices
    masks: np.ndarray | None = None      # (S, P) consistency per candidate
    selected: np.ndarray | None = None   # (S, P) first-M selection
    exposure: ExposureAffine | None = None

    @property
    def shape(self) -> tuple:
        return self.render.height, self.render.width


@dataclass
class FrameLosses:
    total: Value
    rgb: Value
    photo: Value
    normal: Value
    n_views: int


def candidate_pointmap(scene: Scene, index: int, k_median: int = DEFAULT_MEDIAN):
    """Forward-only point map of one candidate view: (P, 3) data + validity.

    Candidates are re-rendered from the current parameters at every call so
    the consistency check always sees up-to-date geometry.
    """
    out = render_scene(scene, index, K=k_median, need_color=False,
                       need_normals=False)
    return out.pointmap.data.reshape(-1, 3), out.point_valid.reshape(-1)


def render_frame(
    scene: Scene,
    gauss_params: dict,
    net_params: dict,
    target_index: int,
    *,
    source_indices=None,
    k_median: int = DEFAULT_MEDIAN,
    n_candidates: int = DEFAULT_CANDIDATES,
    m_views: int = DEFAULT_VIEWS,
    tau: float = DEFAULT_TAU,
    exposure_on: bool = False,
    with_residual: bool = True,
    need_final: bool = True,
) -> FrameRender:
    """Run the full forward pass for one target view.

    ``gauss_params`` and ``net_params`` map parameter names to Values (tape
    leaves while training, constants for evaluation).  ``source_indices``
    restricts the candidate pool; by default every training view except the
    target may serve as a source.  ``with_residual=False`` renders the base
    image only and skips source views, exposure, and the network; schedules
    use it while the extra loss terms are disabled.  ``need_final=False``
    keeps the warped views (for the photometric term) but skips the pooling
    and decoding stages whose output would carry zero loss weight.
    """
    cam = scene.cameras[target_index]
    h, w = cam.height, cam.width
    p = h * w
    out = render(gauss_params, cam, sh_degree=scene.sh_degree, K=k_median)

    if not with_residual:
        return FrameRender(
            target_index=target_index, render=out, base=out.base,
            corrected=out.base, residual=None, final=None, pooled=None,
            views=[], candidates=[], masks=None, selected=None,
            exposure=identity_affine(),
        )

    allowed = scene.train_indices if source_indices is None else source_indices
    candidates = candidate_source_views(scene.cameras, target_index, allowed,
                                        n_candidates)

    points = out.pointmap.data.reshape(-1, 3)
    point_ok = out.point_valid.reshape(-1)
    masks = np.zeros((len(candidates), p), dtype=bool)
    for row, idx in enumerate(candidates):
        src_pm, src_ok = candidate_pointmap(scene, idx, k_median)
        masks[row] = consistency_mask(points, point_ok, cam,
                                      scene.cameras[idx], src_pm, src_ok, tau)
    selected = first_m_passing(masks, m_views) if len(candidates) else masks

    covered = out.alpha.data.reshape(-1) >= WARP_ALPHA_MIN

    # Warp every candidate that contributes pixels; the nearest view is
    # also warped when exposure correction needs its colors.
    warps: list[WarpedView | None] = [None] * len(candidates)

    def warp_view(row: int) -> WarpedView:
        if warps[row] is None:
            src = scene.cameras[candidates[row]]
            warps[row] = warp_median_records(src, src.image, out.med_point,
                                             out.med_weight, out.med_valid)
        return warps[row]

    for row in range(len(candidates)):
        if (selected[row] & covered).any():
            warp_view(row)

    exposure = identity_affine()
    corrected = out.base
    if exposure_on and candidates:
        nearest = warp_view(0)
        chi = masks[0] & covered & nearest.valid
        exposure = fit_affine(ad.reshape(out.base, (p, 3)), nearest.colors, chi)
        if exposure.fitted:
            corrected = apply_exposure(exposure, out.base)

    corrected_flat = ad.reshape(corrected, (p, 3))
    pointmap_flat = ad.reshape(out.pointmap, (p, 3))
    rays_flat = out.raydirs.reshape(-1, 3)

    views: list[SourceView] = []
    for row, idx in enumerate(candidates):
        wv = warps[row]
        if wv is None:
            continue
        valid = selected[row] & covered & wv.valid
        if not valid.any():
            continue
        views.append(SourceView(
            cam_index=idx,
            colors=wv.colors,
            image=ad.reshape(wv.colors, (h, w, 3)),
            valid=valid,
            dc=wv.colors - corrected_flat,
            dd=direction_features(cam, scene.cameras[idx], pointmap_flat,
                                  rays_flat),
        ))

    pooled = residual = final = None
    if need_final:
        pooled = extract_and_pool(net_params,
                                  [(v.dc, v.dd, v.valid) for v in views], p)
        residual = decode_residual(net_params, corrected, out.raydirs,
                                   ad.reshape(pooled, (h, w, FEATURE_DIM)))
        final = compose_final(corrected, residual)

    return FrameRender(
        target_index=target_index, render=out, base=out.base,
        corrected=corrected, residual=residual, final=final, pooled=pooled,
        views=views, candidates=candidates, masks=masks, selected=selected,
        exposure=exposure,
    )


def frame_losses(
    frame: FrameRender,
    real_image: np.ndarray,
    *,
    gamma: float = 1.0,
    lambda_photo: float = 0.0,
    lambda_normal: float = 0.0,
) -> FrameLosses:
    """Assemble the training objective for one rendered frame.

    The photometric term compares both the rendered and the network-final
    image against the capture, blended by ``gamma``.  Warp and normal terms
    are skipped entirely while their weights are zero, so warmup iterations
    never pay for them.
    """
    h, w = frame.shape
    real = np.asarray(real_image, dtype=np.float64)
    if real.shape != (h, w, 3):
        raise ValueError(f"real image shape {real.shape} != {(h, w, 3)}")

    if frame.final is None:
        rgb = losses.mixed_loss(frame.corrected, real)
    else:
        rgb = losses.rgb_loss(frame.corrected, frame.final, real, gamma)

    if lambda_photo > 0.0 and frame.views:
        pairs = [(v.image, v.valid.reshape(h, w)) for v in frame.views]
        photo = losses.photo_loss(pairs, real)
    else:
        photo = constant(0.0)

    if lambda_normal > 0.0 and frame.render.normalmap is not None:
        omega = frame.render.point_valid & (
            frame.render.alpha.data >= WARP_ALPHA_MIN)
        if frame.render.normal_valid is not None:
            omega = omega & frame.render.normal_valid
        normal = losses.normal_loss(frame.render.normalmap,
                                    frame.render.pointmap,
                                    frame.render.raydirs, omega)
    else:
        normal = constant(0.0)

    total = losses.total_loss(rgb, photo, normal, lambda_photo, lambda_normal)
    return FrameLosses(total=total, rgb=rgb, photo=photo, normal=normal,
                       n_views=len(frame.views))
