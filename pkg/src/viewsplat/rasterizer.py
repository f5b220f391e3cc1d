"""Differentiable Gaussian rasterization with per-pixel surface bookkeeping.

Beyond the blended color image, the renderer records for every pixel the few
Gaussians straddling the transmittance-0.5 crossing (the "median" set), their
blending weights, and the intersection of the pixel ray with each median's
tangent plane.  Those records drive view warping, the fused point map, and
the blended normal map.

Discrete choices (which Gaussians survive culling, the depth order, which
records form the median set, termination and validity masks) are made on
plain data and enter the tape as constants; gradients flow through the
selected values only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value, accumulate, constant, custom_op
from .scene import Camera, Gaussian, Scene, covariance_from_params, eval_sh_colors, unit_rows

__all__ = [
    "NEAR_PLANE", "COV2D_DILATION", "ALPHA_MAX", "TRANSMITTANCE_STOP",
    "MEDIAN_TRANSMITTANCE", "MEDIAN_MIN_ALPHA", "MIN_WEIGHT_SUM",
    "PLANE_DOT_MIN", "WARP_ALPHA_MIN",
    "Splat2D", "Projection", "RenderOutput",
    "project_gaussian", "project_gaussians", "blend_pixel", "select_medians",
    "render",
]

NEAR_PLANE = 0.01            # camera-space depth below which Gaussians are culled
COV2D_DILATION = 0.3         # px^2 added to both screen-space variances
ALPHA_MAX = 0.99             # per-splat opacity ceiling during blending
TRANSMITTANCE_STOP = 1e-4    # accumulation stops once this little light remains
MEDIAN_TRANSMITTANCE = 0.5   # crossing that anchors the median window
MEDIAN_MIN_ALPHA = 1.0 / 255.0  # minimum alpha for a blended record to count
MIN_WEIGHT_SUM = 1e-6        # median aggregations below this are invalid
PLANE_DOT_MIN = 1e-6         # |n.d| at or below this drops the intersection
WARP_ALPHA_MIN = 0.02        # pixels more transparent than this skip warping


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


@dataclass
class Splat2D:
    """Screen-space footprint of one projected Gaussian."""

    mean2d: np.ndarray   # (2,) pixel coordinates
    cov2d: np.ndarray    # (2, 2) dilated screen-space covariance
    depth: float
    radius: float        # 3 sigma of the dominant axis, pixels


@dataclass
class Projection:
    """Depth-sorted visible subset of a scene, projected into one camera."""

    visible: np.ndarray      # (Nv,) indices into the scene arrays, near to far
    depths: np.ndarray       # (Nv,) camera-space z, data only
    radii: np.ndarray        # (Nv,) 3 sigma footprint radii, data only
    mean2d: Value            # (Nv, 2)
    conic: Value             # (Nv, 3) inverse-covariance terms (A, B, C)
    cov2d_abc: Value         # (Nv, 3) covariance entries (a, b, c) after dilation
    opacity: Value           # (Nv,) activated
    positions: Value         # (Nv, 3)
    unit_normals: Value      # (Nv, 3)
    colors: Value | None     # (Nv, 3) view-dependent, present when requested


def _camera_space(positions: Value, cam: Camera) -> Value:
    return positions @ constant(cam.R.T) + constant(cam.t)


def _projection_core(positions: Value, log_scales: Value, rotations: Value, cam: Camera):
    """Screen-space mean and dilated covariance entries for every row."""
    pc = _camera_space(positions, cam)
    x, y, z = pc[:, 0:1], pc[:, 1:2], pc[:, 2:3]
    zinv = 1.0 / z
    u = cam.fx * x * zinv + cam.cx
    v = cam.fy * y * zinv + cam.cy
    mean2d = ad.concat([u, v], axis=1)

    cov3 = covariance_from_params(log_scales, rotations)
    cov_cam = constant(cam.R) @ cov3 @ constant(cam.R.T)
    zero = x * 0.0
    # perspective Jacobian rows: d(u,v)/d(camera xyz)
    j = ad.concat(
        [
            cam.fx * zinv, zero, -cam.fx * x * zinv * zinv,
            zero, cam.fy * zinv, -cam.fy * y * zinv * zinv,
        ],
        axis=1,
    ).reshape((-1, 2, 3))
    cov2d = j @ cov_cam @ ad.transpose(j, (0, 2, 1))
    a = cov2d[:, 0, 0] + COV2D_DILATION
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + COV2D_DILATION
    return mean2d, a, b, c, pc


def _footprint_radius(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    mid = 0.5 * (a + c)
    det = a * c - b * b
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    return 3.0 * np.sqrt(lam_max)


def project_gaussian(g: Gaussian, cam: Camera) -> Splat2D | None:
    """Project one primitive; returns None when culled.

    Culling drops Gaussians behind the near plane and those whose 3 sigma
    footprint misses the image rectangle entirely.
    """
    pos = constant(g.position[None])
    log_s = constant(np.log(g.scale)[None])
    quat = constant(g.rotation[None])
    with np.errstate(all="ignore"):
        mean2d, a, b, c, pc = _projection_core(pos, log_s, quat, cam)
    depth = float(pc.data[0, 2])
    if not depth > NEAR_PLANE:
        return None
    av, bv, cv = float(a.data[0]), float(b.data[0]), float(c.data[0])
    radius = float(_footprint_radius(np.array(av), np.array(bv), np.array(cv)))
    u, v = mean2d.data[0]
    if (
        u + radius < -0.5 or u - radius > cam.width - 0.5
        or v + radius < -0.5 or v - radius > cam.height - 0.5
    ):
        return None
    return Splat2D(
        mean2d=mean2d.data[0].copy(),
        cov2d=np.array([[av, bv], [bv, cv]]),
        depth=depth,
        radius=radius,
    )


def project_gaussians(params: dict[str, Value], cam: Camera, need_colors: bool = True,
                      sh_degree: int = 2) -> Projection:
    """Cull, depth-sort, and project the whole scene into one camera.

    The culling pass runs on detached data; the surviving rows are then
    projected on the tape so gradients cover exactly the visible set.
    """
    # data-only pass for visibility and ordering
    with np.errstate(all="ignore"):
        det_params = {k: v.detach() for k, v in params.items()}
        mean2d_d, a_d, b_d, c_d, pc_d = _projection_core(
            det_params["positions"], det_params["log_scales"], det_params["rotations"], cam
        )
        depth_all = pc_d.data[:, 2]
        radius_all = _footprint_radius(a_d.data, b_d.data, c_d.data)
        u_all, v_all = mean2d_d.data[:, 0], mean2d_d.data[:, 1]
        keep = (
            (depth_all > NEAR_PLANE)
            & np.isfinite(radius_all)
            & (u_all + radius_all >= -0.5) & (u_all - radius_all <= cam.width - 0.5)
            & (v_all + radius_all >= -0.5) & (v_all - radius_all <= cam.height - 0.5)
        )
    idx = np.nonzero(keep)[0]
    order = np.argsort(depth_all[idx], kind="stable")
    visible = idx[order]

    pos_v = ad.take(params["positions"], visible, axis=0)
    logs_v = ad.take(params["log_scales"], visible, axis=0)
    quat_v = ad.take(params["rotations"], visible, axis=0)
    mean2d, a, b, c = _projection_core(pos_v, logs_v, quat_v, cam)[:4]
    det = a * c - b * b
    conic = ad.stack([c / det, -b / det, a / det], axis=1)
    cov2d_abc = ad.stack([a, b, c], axis=1)
    opacity = ad.sigmoid(ad.take(params["opacity_logits"], visible, axis=0))
    unit_normals = unit_rows(ad.take(params["normals"], visible, axis=0))

    colors = None
    if need_colors:
        dirs = unit_rows(pos_v - constant(cam.center))
        colors = eval_sh_colors(ad.take(params["sh_coeffs"], visible, axis=0), dirs, sh_degree)

    return Projection(
        visible=visible,
        depths=depth_all[visible],
        radii=radius_all[visible],
        mean2d=mean2d,
        conic=conic,
        cov2d_abc=cov2d_abc,
        opacity=opacity,
        positions=pos_v,
        unit_normals=unit_normals,
        colors=colors,
    )


# ---------------------------------------------------------------------------
# fused screen-space ops (hand-written gradients, checked against compositions)
# ---------------------------------------------------------------------------


def splat_alphas(mean2d: Value, conic: Value, opacity: Value,
                 grid_u: np.ndarray, grid_v: np.ndarray) -> Value:
    """Per-splat, per-pixel alpha: opacity * exp(-q/2) capped at ALPHA_MAX.

    q is the conic quadratic form at the pixel center.  Output (Nv, P).
    The cap uses the same boundary convention as clamp: no gradient once
    the pre-cap value reaches the ceiling.
    """
    mu, cn, op = mean2d.data, conic.data, opacity.data

    def evaluate():
        dx = grid_u[None, :] - mu[:, 0:1]
        dy = grid_v[None, :] - mu[:, 1:2]
        q = cn[:, 0:1] * dx * dx + 2.0 * cn[:, 1:2] * dx * dy + cn[:, 2:3] * dy * dy
        G = np.exp(-0.5 * q)
        return dx, dy, G

    dx, dy, G = evaluate()
    alpha = np.minimum(op[:, None] * G, ALPHA_MAX)

    def bwd(g):
        dx, dy, G = evaluate()  # recomputed to keep the tape light
        pre = op[:, None] * G
        gm = np.where(pre < ALPHA_MAX, g, 0.0)
        accumulate(opacity, (gm * G).sum(axis=1))
        gq = -0.5 * gm * pre
        ga = (gq * dx * dx).sum(axis=1)
        gb = (gq * 2.0 * dx * dy).sum(axis=1)
        gc = (gq * dy * dy).sum(axis=1)
        accumulate(conic, np.stack([ga, gb, gc], axis=1))
        # d(dx)/d(mu_u) = -1 folds the two signs into a plain sum
        gu = (gm * pre * (cn[:, 0:1] * dx + cn[:, 1:2] * dy)).sum(axis=1)
        gv = (gm * pre * (cn[:, 1:2] * dx + cn[:, 2:3] * dy)).sum(axis=1)
        accumulate(mean2d, np.stack([gu, gv], axis=1))

    return custom_op("splat_alphas", (mean2d, conic, opacity), alpha, bwd)


def blend_weights(alpha: Value) -> tuple[Value, np.ndarray]:
    """Front-to-back blending weights w_i = alpha_i * prod_{j<i}(1 - alpha_j).

    Returns the weights as a tape node and the pre-blend transmittance T as
    plain data (T_0 = 1).  Rows must already be in depth order.
    """
    a = alpha.data
    T = np.ones_like(a)
    if len(a) > 1:
        np.cumprod(1.0 - a[:-1], axis=0, out=T[1:])
    w = a * T

    def bwd(g):
        gw = g * w
        suffix = np.cumsum(gw[::-1], axis=0)[::-1]
        s = np.zeros_like(gw)
        s[:-1] = suffix[1:]
        accumulate(alpha, g * T - s / (1.0 - a))

    return custom_op("blend_weights", (alpha,), w, bwd), T


# ---------------------------------------------------------------------------
# per-pixel reference path
# ---------------------------------------------------------------------------


def blend_pixel(i: int, j: int, proj: Projection, colors: np.ndarray):
    """Sequential front-to-back blending at one pixel (plain data).

    Walks the depth-sorted splats, accumulating alpha-weighted colors until
    the transmittance falls below TRANSMITTANCE_STOP.  Returns the pixel
    color, the per-splat weights, and the pre-blend transmittances for the
    splats actually processed.
    """
    mu = proj.mean2d.data
    cn = proj.conic.data
    op = proj.opacity.data
    color = np.zeros(3)
    weights, transmittances = [], []
    T = 1.0
    for k in range(len(mu)):
        if T < TRANSMITTANCE_STOP:
            break
        dx = j - mu[k, 0]
        dy = i - mu[k, 1]
        q = cn[k, 0] * dx * dx + 2.0 * cn[k, 1] * dx * dy + cn[k, 2] * dy * dy
        a = min(op[k] * np.exp(-0.5 * q), ALPHA_MAX)
        w = a * T
        color += w * colors[k]
        weights.append(w)
        transmittances.append(T)
        T *= 1.0 - a
    return color, np.array(weights), np.array(transmittances)


def select_medians(weights: np.ndarray, transmittances: np.ndarray, K: int):
    """Indices of up to K consecutive blended records around the surface.

    The window centers on the first record whose pre-blend transmittance has
    dropped below MEDIAN_TRANSMITTANCE, shifts inward at the ends, and falls
    back to the last K records when the crossing never happens.  Returns
    positions into the input sequences.
    """
    n = len(weights)
    if n == 0 or K <= 0:
        return np.zeros(0, dtype=int)
    below = np.nonzero(np.asarray(transmittances) < MEDIAN_TRANSMITTANCE)[0]
    if len(below):
        start = int(below[0]) - (K - 1) // 2
    else:
        start = n - K
    start = int(np.clip(start, 0, max(n - K, 0)))
    return np.arange(start, min(start + K, n))


# ---------------------------------------------------------------------------
# full image formation
# ---------------------------------------------------------------------------


@dataclass
class RenderOutput:
    """Everything one differentiable render produces.

    Image-shaped fields are (H, W, ...) Values unless marked as data.  The
    median records stay flat over P = H*W pixels with a leading window axis.
    """

    height: int
    width: int
    base: Value | None           # (H, W, 3) blended colors
    alpha: Value                 # (H, W) accumulated blend weight
    raydirs: np.ndarray          # (H, W, 3) unit rays, data
    pointmap: Value              # (H, W, 3) weight-fused plane intersections
    point_valid: np.ndarray      # (H, W) bool, data
    normalmap: Value | None      # (H, W, 3) unit normals, camera facing
    normal_valid: np.ndarray | None
    depth: np.ndarray            # (H, W) camera-space z of the point map, data
    med_index: np.ndarray        # (K, P) rows into the visible subset, data
    med_weight: Value            # (K, P) masked blending weights
    med_point: Value             # (K, P, 3) ray/plane intersections
    med_valid: np.ndarray        # (K, P) bool, data
    med_weight_sum: Value        # (P,) masked weight totals
    projection: Projection
    alpha_rows: np.ndarray       # (Nv, P) per-splat alphas, data
    transmittance: np.ndarray    # (Nv, P) pre-blend T, data


def _median_window_masks(eligible: np.ndarray, T: np.ndarray, K: int):
    """Vectorized window selection across all pixels at once."""
    nv, p = eligible.shape
    seq = np.cumsum(eligible, axis=0) - 1
    n = eligible.sum(axis=0)
    crossed = (eligible & (T < MEDIAN_TRANSMITTANCE)).sum(axis=0)
    c = n - crossed  # eligible records before the crossing
    start = np.where(crossed > 0, c - (K - 1) // 2, n - K)
    start = np.clip(start, 0, np.maximum(n - K, 0))
    sel = eligible & (seq >= start[None, :]) & (seq < (start + K)[None, :])
    rows, cols = np.nonzero(sel)
    k_of = (seq[rows, cols] - start[cols]).astype(int)
    med_index = np.zeros((K, p), dtype=int)
    med_mask = np.zeros((K, p), dtype=bool)
    med_index[k_of, cols] = rows
    med_mask[k_of, cols] = True
    return med_index, med_mask


def _empty_output(h: int, w: int, rays: np.ndarray, proj: Projection, K: int,
                  need_color: bool, need_normals: bool) -> RenderOutput:
    """Black frame with every record invalid, for fully culled scenes."""
    p = h * w
    return RenderOutput(
        height=h,
        width=w,
        base=constant(np.zeros((h, w, 3))) if need_color else None,
        alpha=constant(np.zeros((h, w))),
        raydirs=rays.reshape(h, w, 3),
        pointmap=constant(np.zeros((h, w, 3))),
        point_valid=np.zeros((h, w), dtype=bool),
        normalmap=constant(np.zeros((h, w, 3))) if need_normals else None,
        normal_valid=np.zeros((h, w), dtype=bool) if need_normals else None,
        depth=np.zeros((h, w)),
        med_index=np.zeros((K, p), dtype=int),
        med_weight=constant(np.zeros((K, p))),
        med_point=constant(np.zeros((K, p, 3))),
        med_valid=np.zeros((K, p), dtype=bool),
        med_weight_sum=constant(np.zeros(p)),
        projection=proj,
        alpha_rows=np.zeros((0, p)),
        transmittance=np.ones((0, p)),
    )


def render(
    params: dict[str, Value],
    cam: Camera,
    sh_degree: int = 2,
    K: int = 4,
    need_color: bool = True,
    need_normals: bool = True,
) -> RenderOutput:
    """Rasterize the scene into cam with median and point-map bookkeeping.

    params maps the scene parameter names to Values (tape leaves while
    training, constants for plain evaluation).  Candidate-view point maps
    only need need_color=False, need_normals=False.
    """
    h, w = cam.height, cam.width
    p = h * w
    proj = project_gaussians(params, cam, need_colors=need_color, sh_degree=sh_degree)
    grid_v, grid_u = np.divmod(np.arange(p, dtype=np.float64), float(w))
    rays = cam.ray_directions()  # (P, 3)
    if len(proj.visible) == 0:
        return _empty_output(h, w, rays, proj, K, need_color, need_normals)

    alpha = splat_alphas(proj.mean2d, proj.conic, proj.opacity, grid_u, grid_v)
    weights, T = blend_weights(alpha)
    alive = T >= TRANSMITTANCE_STOP
    weights = weights * alive

    alpha_map = weights.sum(axis=0)
    base = None
    if need_color:
        base = (ad.transpose(weights, (1, 0)) @ proj.colors).reshape((h, w, 3))

    # median window on data, then differentiable gathers
    eligible = (alpha.data >= MEDIAN_MIN_ALPHA) & alive
    med_index, med_mask = _median_window_masks(eligible, T, K)
    flat = med_index.ravel()

    mu_med = ad.take(proj.positions, flat, axis=0).reshape((K, p, 3))
    n_med = ad.take(proj.unit_normals, flat, axis=0).reshape((K, p, 3))
    origin = constant(cam.center)
    dirs = constant(rays[None, :, :])  # (1, P, 3)
    numer = ((mu_med - origin) * n_med).sum(axis=2)
    denom = (n_med * dirs).sum(axis=2)
    med_valid = med_mask & (np.abs(denom.data) > PLANE_DOT_MIN)
    denom_safe = ad.where_mask(med_valid, denom, 1.0)
    ray_t = numer / denom_safe
    med_valid = med_valid & (ray_t.data > 0.0)
    med_point = origin + ray_t.reshape((K, p, 1)) * dirs

    med_weight = ad.take_along(weights, med_index, axis=0) * med_valid
    weight_sum = med_weight.sum(axis=0)
    point_valid = weight_sum.data >= MIN_WEIGHT_SUM
    den = ad.where_mask(point_valid, weight_sum, 1.0).reshape((p, 1))
    pointmap = (med_weight.reshape((K, p, 1)) * med_point).sum(axis=0) / den

    normalmap = None
    normal_valid = None
    if need_normals:
        facing = np.where(denom.data > 0.0, -1.0, 1.0)[:, :, None]
        n_eff = n_med * facing
        nbar = (med_weight.reshape((K, p, 1)) * n_eff).sum(axis=0) / den
        nlen = ad.l2norm(nbar, axis=1, keepdims=True)
        normal_valid = point_valid & (nlen.data[:, 0] > 1e-9)
        normalmap = (nbar / ad.where_mask(normal_valid[:, None], nlen, 1.0)).reshape((h, w, 3))
        normal_valid = normal_valid.reshape(h, w)

    depth = cam.to_camera(pointmap.data)[:, 2].reshape(h, w)

    return RenderOutput(
        height=h,
        width=w,
        base=base,
        alpha=alpha_map.reshape((h, w)),
        raydirs=rays.reshape(h, w, 3),
        pointmap=pointmap.reshape((h, w, 3)),
        point_valid=point_valid.reshape(h, w),
        normalmap=normalmap,
        normal_valid=normal_valid,
        depth=depth,
        med_index=med_index,
        med_weight=med_weight,
        med_point=med_point,
        med_valid=med_valid,
        med_weight_sum=weight_sum,
        projection=proj,
        alpha_rows=alpha.data,
        transmittance=T,
    )


def render_scene(scene: Scene, cam_index: int, **kw) -> RenderOutput:
    """Forward-only render of a scene's current parameters."""
    cam = scene.cameras[cam_index]
    return render(scene.parameter_values(None), cam, sh_degree=scene.sh_degree, **kw)
