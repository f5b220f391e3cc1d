"""Synthetic multi-view datasets with analytic ground truth.

Small desk-scale arrangements rendered by direct ray tracing: a textured
plane, a pair of planes with occlusion, and a shiny sphere over a checkered
floor.  Every view comes with the exact image, depth, surface point, and
normal per pixel, which the geometric parts of the pipeline can be tested
against without any fitting.  A smooth per-view affine color drift stands in
for exposure differences between captures.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import Camera, Gaussian, Scene, look_at, rgb_to_sh_dc

__all__ = [
    "TraceResult", "ViewTrace", "TexturedPlane", "PhongSphere", "GeometryGroup",
    "SyntheticDataset", "checker_texture", "sinusoid_texture", "frame_from_normal",
    "quat_from_matrix", "ring_cameras", "render_view", "exposure_matrix",
    "apply_exposure", "build_geometry", "make_dataset", "KINDS",
]

KINDS = ("plane", "waves", "occlusion", "sphere")

_RAY_EPS = 1e-9  # hits closer than this along the ray are the ray's own origin


@dataclass
class TraceResult:
    """Per-ray intersection data; rows where hit is False are zeroed."""

    color: np.ndarray    # (M, 3)
    t: np.ndarray        # (M,) distance along the unit ray direction
    point: np.ndarray    # (M, 3)
    normal: np.ndarray   # (M, 3) unit, as oriented by the surface
    hit: np.ndarray      # (M,) bool


def _empty_trace(m: int) -> TraceResult:
    return TraceResult(
        color=np.zeros((m, 3)),
        t=np.full(m, np.inf),
        point=np.zeros((m, 3)),
        normal=np.zeros((m, 3)),
        hit=np.zeros(m, dtype=bool),
    )


def checker_texture(period: float, color_a, color_b):
    """Alternating squares of two colors in plane coordinates."""
    ca = np.asarray(color_a, dtype=np.float64)
    cb = np.asarray(color_b, dtype=np.float64)

    def tex(u, v):
        parity = (np.floor(u / period) + np.floor(v / period)) % 2
        return np.where(parity[..., None] == 0, ca, cb)

    return tex


def sinusoid_texture(period: float, base=(0.45, 0.45, 0.45), amplitude=0.3):
    """Smooth two-axis color waves with a phase offset per channel."""
    base = np.asarray(base, dtype=np.float64)
    phases = np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])

    def tex(u, v):
        angle = 2.0 * np.pi / period
        waves = np.sin(angle * u[..., None] + phases) * np.sin(angle * v[..., None] + 0.5 * phases)
        return base + 0.5 * amplitude * waves

    return tex


@dataclass
class TexturedPlane:
    """A textured rectangle (or unbounded plane) with an orthonormal frame."""

    origin: np.ndarray
    normal: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    texture: object
    half_extent: float | None = None   # None traces as an infinite plane

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.normal = self.normal / np.linalg.norm(self.normal)
        self.u_axis = np.asarray(self.u_axis, dtype=np.float64)
        self.v_axis = np.asarray(self.v_axis, dtype=np.float64)

    def area(self) -> float:
        if self.half_extent is None:
            raise ValueError("unbounded plane has no area to sample")
        return (2.0 * self.half_extent) ** 2

    def trace(self, o: np.ndarray, d: np.ndarray) -> TraceResult:
        d = np.asarray(d, dtype=np.float64)
        o = np.broadcast_to(np.asarray(o, dtype=np.float64), d.shape)
        res = _empty_trace(len(d))
        with np.errstate(all="ignore"):
            denom = d @ self.normal
            t = ((self.origin - o) @ self.normal) / denom
            point = o + t[:, None] * d
            rel = point - self.origin
            u, v = rel @ self.u_axis, rel @ self.v_axis
            hit = (np.abs(denom) > 1e-12) & np.isfinite(t) & (t > _RAY_EPS)
            if self.half_extent is not None:
                hit &= (np.abs(u) <= self.half_extent) & (np.abs(v) <= self.half_extent)
            color = self.texture(u, v)
        res.hit = hit
        res.t[hit] = t[hit]
        res.point[hit] = point[hit]
        res.normal[hit] = self.normal
        res.color[hit] = color[hit]
        return res

    def sample_surface(self, rng: np.random.Generator, n: int):
        uv = rng.uniform(-self.half_extent, self.half_extent, size=(n, 2))
        points = self.origin + uv[:, 0:1] * self.u_axis + uv[:, 1:2] * self.v_axis
        normals = np.broadcast_to(self.normal, (n, 3)).copy()
        return points, normals, self.texture(uv[:, 0], uv[:, 1])


@dataclass
class PhongSphere:
    """A sphere shaded with the classic ambient + diffuse + specular model.

    The specular lobe moves with the viewpoint, which is exactly the kind of
    appearance a static radiance field cannot carry on its own.
    """

    center: np.ndarray
    radius: float
    albedo: np.ndarray
    light_dir: np.ndarray            # unit vector pointing toward the light
    ambient: float = 0.2
    diffuse: float = 0.45
    specular: float = 0.2
    shininess: float = 24.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.light_dir = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = self.light_dir / np.linalg.norm(self.light_dir)

    def area(self) -> float:
        return 4.0 * np.pi * self.radius**2

    def shade(self, normal: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
        """Phong color for unit surface normals and unit directions toward the eye."""
        ndl = np.maximum(normal @ self.light_dir, 0.0)
        refl = 2.0 * ndl[:, None] * normal - self.light_dir
        spec = np.maximum(np.sum(refl * view_dir, axis=1), 0.0) ** self.shininess
        spec = np.where(ndl > 0.0, spec, 0.0)
        return (
            self.ambient * self.albedo
            + self.diffuse * ndl[:, None] * self.albedo
            + self.specular * spec[:, None]
        )

    def trace(self, o: np.ndarray, d: np.ndarray) -> TraceResult:
        d = np.asarray(d, dtype=np.float64)
        o = np.broadcast_to(np.asarray(o, dtype=np.float64), d.shape)
        res = _empty_trace(len(d))
        oc = o - self.center
        b = np.sum(oc * d, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius**2
        disc = b * b - c
        with np.errstate(all="ignore"):
            root = np.sqrt(np.maximum(disc, 0.0))
            t = -b - root                      # nearer intersection
            far = -b + root
            t = np.where(t > _RAY_EPS, t, far)  # origin inside the sphere
            hit = (disc > 0.0) & (t > _RAY_EPS)
        point = o + t[:, None] * d
        normal = (point - self.center) / self.radius
        res.hit = hit
        res.t[hit] = t[hit]
        res.point[hit] = point[hit]
        res.normal[hit] = normal[hit]
        res.color[hit] = self.shade(normal[hit], -d[hit])
        return res

    def sample_surface(self, rng: np.random.Generator, n: int):
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        points = self.center + self.radius * v
        # bake only the view-independent part of the shading into the color
        ndl = np.maximum(v @ self.light_dir, 0.0)
        colors = self.ambient * self.albedo + self.diffuse * ndl[:, None] * self.albedo
        return points, v.copy(), colors


@dataclass
class GeometryGroup:
    """Depth-composited union of parts: the nearest hit along each ray wins."""

    parts: list

    def trace(self, o: np.ndarray, d: np.ndarray) -> TraceResult:
        d = np.asarray(d, dtype=np.float64)
        best = _empty_trace(len(d))
        for part in self.parts:
            r = part.trace(o, d)
            closer = r.hit & (r.t < best.t)
            best.hit |= closer
            for name in ("color", "point", "normal"):
                getattr(best, name)[closer] = getattr(r, name)[closer]
            best.t[closer] = r.t[closer]
        return best

    def trace_part(self, index: int, o, d) -> TraceResult:
        return self.parts[index].trace(o, d)

    def sample_surface(self, rng: np.random.Generator, n: int):
        areas = np.array([p.area() for p in self.parts], dtype=np.float64)
        counts = np.floor(n * areas / areas.sum()).astype(int)
        counts[0] += n - counts.sum()
        outs = [p.sample_surface(rng, int(c)) for p, c in zip(self.parts, counts) if c > 0]
        return tuple(np.concatenate(cols) for cols in zip(*outs))


# ---------------------------------------------------------------------------
# ready-made arrangements
# ---------------------------------------------------------------------------


def build_geometry(kind: str):
    """One of the standard desk-scale arrangements, by name."""
    x, y, z = np.eye(3)
    if kind == "plane":
        return TexturedPlane(
            origin=np.zeros(3), normal=z, u_axis=x, v_axis=y,
            texture=checker_texture(0.2, (0.82, 0.78, 0.72), (0.2, 0.24, 0.34)),
            half_extent=0.9,
        )
    if kind == "waves":
        return TexturedPlane(
            origin=np.zeros(3), normal=z, u_axis=x, v_axis=y,
            texture=sinusoid_texture(0.45), half_extent=0.9,
        )
    if kind == "occlusion":
        back = TexturedPlane(
            origin=np.zeros(3), normal=z, u_axis=x, v_axis=y,
            texture=checker_texture(0.22, (0.75, 0.72, 0.65), (0.25, 0.28, 0.4)),
            half_extent=0.9,
        )
        front = TexturedPlane(
            origin=np.array([0.12, 0.05, 0.3]), normal=z, u_axis=x, v_axis=y,
            texture=checker_texture(0.09, (0.78, 0.35, 0.3), (0.3, 0.12, 0.1)),
            half_extent=0.26,
        )
        return GeometryGroup([back, front])
    if kind == "sphere":
        floor = TexturedPlane(
            origin=np.zeros(3), normal=z, u_axis=x, v_axis=y,
            texture=checker_texture(0.24, (0.72, 0.7, 0.66), (0.28, 0.3, 0.38)),
            half_extent=0.95,
        )
        ball = PhongSphere(
            center=np.array([0.0, 0.0, 0.3]), radius=0.28,
            albedo=np.array([0.72, 0.32, 0.26]),
            light_dir=np.array([0.4, 0.3, 0.85]),
        )
        return GeometryGroup([floor, ball])
    raise ValueError(f"unknown scene kind {kind!r}; expected one of {KINDS}")


# ---------------------------------------------------------------------------
# cameras and per-view rendering
# ---------------------------------------------------------------------------


def ring_cameras(n_views: int, width: int, height: int, focal: float,
                 radius: float = 1.8, ring_height: float = 1.1,
                 target=(0.0, 0.0, 0.15), start_angle: float = 0.0) -> list[Camera]:
    """Cameras spaced evenly on a circle, all looking at one target point."""
    cams = []
    for k in range(n_views):
        angle = start_angle + 2.0 * np.pi * k / n_views
        eye = np.array([radius * np.cos(angle), radius * np.sin(angle), ring_height])
        R, t = look_at(eye, target)
        cams.append(
            Camera(fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                   width=width, height=height, R=R, t=t, cam_id=k)
        )
    return cams


@dataclass
class ViewTrace:
    """Analytic ground truth for one camera, image-shaped."""

    image: np.ndarray    # (H, W, 3)
    depth: np.ndarray    # (H, W) camera-space z, 0 where nothing was hit
    points: np.ndarray   # (H, W, 3)
    normals: np.ndarray  # (H, W, 3)
    hit: np.ndarray      # (H, W) bool


def render_view(geometry, cam: Camera) -> ViewTrace:
    d = cam.ray_directions()
    res = geometry.trace(cam.center, d)
    h, w = cam.height, cam.width
    depth = np.zeros(len(d))
    depth[res.hit] = cam.to_camera(res.point[res.hit])[:, 2]
    return ViewTrace(
        image=res.color.reshape(h, w, 3),
        depth=depth.reshape(h, w),
        points=res.point.reshape(h, w, 3),
        normals=res.normal.reshape(h, w, 3),
        hit=res.hit.reshape(h, w),
    )


# ---------------------------------------------------------------------------
# exposure drift
# ---------------------------------------------------------------------------

_EXPOSURE_PHASES = np.array([0.0, 2.1, 4.2])


def exposure_matrix(angle: float, amplitude: float,
                    phases: np.ndarray | None = None) -> np.ndarray:
    """Angle-dependent color transform, returned as (3, 4).

    The gain matrix stays diagonally dominant with non-negative mixing and
    offset, so non-negative colors stay non-negative and the drift vanishes
    at amplitude zero.  ``phases`` overrides the per-channel phase triple;
    capture synthesis draws one random triple per dataset, which decorrelates
    exposures across seeds while neighboring views stay exposure-correlated
    (the way exposure drifts along a real capture trajectory).  Phases only
    move where each view lands on the sinusoids, so the amplitude envelope —
    and the [0, 1] range analysis that depends on it — never changes.
    """
    if phases is None:
        phases = _EXPOSURE_PHASES
    gains = np.diag(1.0 + amplitude * np.sin(angle + phases))
    for c in range(3):
        for c2 in range(3):
            if c != c2:
                mix = 0.5 * (1.0 + np.sin(angle + phases[c] + 0.7 * (c2 + 1)))
                gains[c, c2] = 0.15 * amplitude * mix
    offset = 0.1 * amplitude * (1.0 + np.cos(angle + phases))
    return np.concatenate([gains, offset[:, None]], axis=1)


def apply_exposure(image: np.ndarray, affine: np.ndarray) -> np.ndarray:
    """Apply a (3, 4) color transform to an (H, W, 3) image."""
    return image @ affine[:, :3].T + affine[:, 3]


# ---------------------------------------------------------------------------
# Gaussian initialization
# ---------------------------------------------------------------------------


def frame_from_normal(n: np.ndarray) -> np.ndarray:
    """Rotation matrix whose third column is the given unit normal."""
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t = np.cross(helper, n)
    t /= np.linalg.norm(t)
    b = np.cross(n, t)
    return np.stack([t, b, n], axis=1)


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (scalar first) for a rotation matrix."""
    m = np.asarray(R, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                      (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                      0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return q if q[0] >= 0.0 else -q


def surface_gaussians(geometry, n: int, rng: np.random.Generator,
                      opacity: float = 0.8) -> list[Gaussian]:
    """Flat Gaussians seeded on the true surfaces, thin along the normal.

    Tangent extents follow the per-sample surface area so coverage stays
    roughly uniform; colors carry only the direction-independent part of the
    shading (the view-dependent remainder is the model's job to learn).
    """
    points, normals, colors = geometry.sample_surface(rng, n)
    area = geometry.area() if hasattr(geometry, "area") else sum(
        p.area() for p in geometry.parts
    )
    s_tan = 0.7 * np.sqrt(area / max(n, 1))
    gaussians = []
    for p, nr, col in zip(points, normals, colors):
        sh = np.zeros((3, 9))
        sh[:, 0] = rgb_to_sh_dc(np.clip(col, 0.02, 0.98))
        gaussians.append(
            Gaussian(
                position=p,
                scale=np.array([s_tan, s_tan, 0.15 * s_tan]),
                rotation=quat_from_matrix(frame_from_normal(nr)),
                opacity=opacity,
                sh=sh,
                normal=nr.copy(),
            )
        )
    return gaussians


def random_gaussians(n: int, rng: np.random.Generator,
                     bounds=((-0.7, 0.7), (-0.7, 0.7), (0.0, 0.6)),
                     scale: float = 0.08, opacity: float = 0.5) -> list[Gaussian]:
    """Structure-free initialization inside a box, for from-scratch fits."""
    gaussians = []
    for _ in range(n):
        q = rng.normal(size=4)
        nr = rng.normal(size=3)
        sh = np.zeros((3, 9))
        sh[:, 0] = rgb_to_sh_dc(rng.uniform(0.2, 0.8, size=3))
        gaussians.append(
            Gaussian(
                position=np.array([rng.uniform(lo, hi) for lo, hi in bounds]),
                scale=np.full(3, scale),
                rotation=q / np.linalg.norm(q),
                opacity=opacity,
                sh=sh,
                normal=nr / np.linalg.norm(nr),
            )
        )
    return gaussians


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class SyntheticDataset:
    """A scene whose cameras hold captured images, plus the analytic truth."""

    scene: Scene
    geometry: object
    kind: str
    seed: int
    clean_images: list = field(default_factory=list)   # before exposure drift
    depths: list = field(default_factory=list)
    hit_masks: list = field(default_factory=list)
    exposures: list = field(default_factory=list)      # (3, 4) per view
    angles: list = field(default_factory=list)


def make_dataset(kind: str = "sphere", n_views: int = 16, width: int = 64,
                 height: int = 48, seed: int = 0, n_gaussians: int = 200,
                 init: str = "surface", exposure_amplitude: float = 0.0,
                 test_every: int = 8, focal: float | None = None,
                 ring_radius: float = 1.8, ring_height: float = 1.1) -> SyntheticDataset:
    """Build a fully specified multi-view dataset.

    Every n-th view (test_every) is held out for evaluation.  Captured
    images are the clean renders passed through the per-view exposure
    transform; amplitude zero keeps them identical.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {KINDS}")
    rng = np.random.default_rng(seed)
    # Separate stream so jitter draws never shift the Gaussian init draws.
    jitter_rng = np.random.default_rng((seed, 1))
    jitter_phases = _EXPOSURE_PHASES + jitter_rng.uniform(0.0, 2.0 * np.pi, size=3)
    geometry = build_geometry(kind)
    focal = 1.2 * width if focal is None else focal
    cams = ring_cameras(n_views, width, height, focal,
                        radius=ring_radius, ring_height=ring_height)

    ds = SyntheticDataset(scene=None, geometry=geometry, kind=kind, seed=seed)
    for k, cam in enumerate(cams):
        angle = 2.0 * np.pi * k / n_views
        view = render_view(geometry, cam)
        affine = exposure_matrix(angle, exposure_amplitude, jitter_phases)
        captured = apply_exposure(view.image, affine)
        if captured.min() < 0.0 or captured.max() > 1.0:
            raise ValueError(
                f"exposure amplitude {exposure_amplitude} pushes view {k} outside [0, 1]"
            )
        cam.image = captured
        ds.clean_images.append(view.image)
        ds.depths.append(view.depth)
        ds.hit_masks.append(view.hit)
        ds.exposures.append(affine)
        ds.angles.append(angle)

    if init == "surface":
        gaussians = surface_gaussians(geometry, n_gaussians, rng)
    elif init == "random":
        gaussians = random_gaussians(n_gaussians, rng)
    else:
        raise ValueError(f"unknown init {init!r}; expected 'surface' or 'random'")

    test_indices = tuple(i for i in range(n_views) if i % test_every == 0)
    ds.scene = Scene.from_gaussians(gaussians, cams, sh_degree=2,
                                    test_indices=test_indices)
    return ds
