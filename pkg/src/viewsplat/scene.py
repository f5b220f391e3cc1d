"""Scene model: Gaussian primitives, cameras, color evaluation, persistence.

Gaussian parameters live in a structure-of-arrays form so a whole scene can be
pushed through the autodiff engine at once.  Scales are stored in log space,
opacities as pre-sigmoid logits, rotations as raw quaternions normalized on
use, and normals as raw vectors normalized on use.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Value, constant

__all__ = [
    "SH_C0", "SH_C1", "SH_C2",
    "sh_basis", "eval_sh_colors", "rgb_to_sh_dc",
    "quat_to_rotation", "covariance_from_params", "unit_rows",
    "Gaussian", "Camera", "Scene",
    "look_at", "default_normals", "inverse_sigmoid",
    "save_scene", "load_scene", "load_camera_list",
]

# Real spherical harmonics band constants up to degree 2.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)

PARAM_NAMES = (
    "positions", "log_scales", "rotations", "opacity_logits", "sh_coeffs", "normals",
)


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Basis values for unit directions, shape (..., 9).

    The color of a Gaussian is sum_b coeff[..., b] * basis[..., b] + 0.5.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (9,))
    out[..., 0] = SH_C0
    out[..., 1] = -SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = -SH_C1 * x
    out[..., 4] = SH_C2[0] * x * y
    out[..., 5] = SH_C2[1] * y * z
    out[..., 6] = SH_C2[2] * (2.0 * z * z - x * x - y * y)
    out[..., 7] = SH_C2[3] * x * z
    out[..., 8] = SH_C2[4] * (x * x - y * y)
    return out


def eval_sh_colors(sh: Value, dirs: Value, degree: int) -> Value:
    """View-dependent colors from per-Gaussian harmonics.

    sh: (N, 3, B) with B = (degree+1)^2, dirs: (N, 3) unit vectors from the
    camera center toward each Gaussian.  Returns (N, 3) colors clamped to be
    non-negative after the +0.5 offset.
    """
    if degree not in (0, 1, 2):
        raise ValueError(f"eval_sh_colors: degree must be 0, 1, or 2, got {degree}")
    n_coeff = (degree + 1) ** 2
    if sh.shape[-1] < n_coeff:
        raise ValueError(
            f"eval_sh_colors: need {n_coeff} coefficients for degree {degree}, got {sh.shape[-1]}"
        )
    color = sh[:, :, 0] * SH_C0
    if degree >= 1:
        x = dirs[:, 0:1]
        y = dirs[:, 1:2]
        z = dirs[:, 2:3]
        color = color - sh[:, :, 1] * (y * SH_C1) + sh[:, :, 2] * (z * SH_C1) - sh[:, :, 3] * (x * SH_C1)
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        color = (
            color
            + sh[:, :, 4] * (xy * SH_C2[0])
            + sh[:, :, 5] * (yz * SH_C2[1])
            + sh[:, :, 6] * ((2.0 * zz - xx - yy) * SH_C2[2])
            + sh[:, :, 7] * (xz * SH_C2[3])
            + sh[:, :, 8] * ((xx - yy) * SH_C2[4])
        )
    return ad.relu(color + 0.5)


def rgb_to_sh_dc(rgb: np.ndarray) -> np.ndarray:
    """DC coefficient that reproduces a flat color under eval_sh_colors."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def unit_rows(v: Value) -> Value:
    """Normalize the last axis to unit length."""
    return v / ad.l2norm(v, axis=-1, keepdims=True)


def quat_to_rotation(q: Value) -> Value:
    """Rotation matrices (N, 3, 3) from unit quaternions (N, 4), scalar first."""
    w = q[:, 0:1]
    x = q[:, 1:2]
    y = q[:, 2:3]
    z = q[:, 3:4]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rows = ad.concat(
        [
            1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy),
            2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx),
            2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy),
        ],
        axis=1,
    )
    return rows.reshape((-1, 3, 3))


def covariance_from_params(log_scales: Value, quats: Value) -> Value:
    """World-space covariances R diag(s^2) R^T, shape (N, 3, 3).

    Eigenvalues equal the squared scales by construction, so every output is
    symmetric positive definite for finite inputs.
    """
    s = ad.exp(log_scales)
    rot = quat_to_rotation(unit_rows(quats))
    rs = rot * s.reshape((-1, 1, 3))  # scale the columns
    return rs @ ad.transpose(rs, (0, 2, 1))


def inverse_sigmoid(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-8, 1.0 - 1e-8)
    return np.log(p / (1.0 - p))


@dataclass
class Gaussian:
    """One primitive in user-facing (activated) units."""

    position: np.ndarray            # (3,)
    scale: np.ndarray               # (3,) linear, positive
    rotation: np.ndarray            # (4,) unit quaternion, scalar first
    opacity: float                  # in (0, 1)
    sh: np.ndarray                  # (3, B) harmonics coefficients
    normal: np.ndarray              # (3,) unit


def _normalize(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("zero-length vector cannot be normalized")
    return v / n


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera rotation and translation for a camera at eye.

    Camera axes: x right, y down, z forward.  Returns (R, t) with
    x_cam = R @ x_world + t.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = _normalize(np.asarray(target, dtype=np.float64) - eye)
    right = np.cross(forward, _normalize(up))
    if np.linalg.norm(right) < 1e-8:
        # looking straight along the up hint; pick any perpendicular
        alt = np.array([1.0, 0.0, 0.0])
        if abs(forward @ alt) > 0.9:
            alt = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, alt)
    right = _normalize(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return R, -R @ eye


@dataclass
class Camera:
    """Pinhole camera with row-major pixel grid; pixel (i, j) centers at (u=j, v=i)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray                    # (3, 3) world -> camera rotation
    t: np.ndarray                    # (3,)
    image: np.ndarray | None = None  # (H, W, 3) float in [0, 1]
    image_path: str | None = None
    cam_id: int = 0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.R.shape != (3, 3) or self.t.shape != (3,):
            raise ValueError(f"Camera: R must be (3,3) and t (3,), got {self.R.shape}, {self.t.shape}")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-8):
            raise ValueError("Camera: R is not orthonormal")
        if self.image is not None:
            self.image = np.asarray(self.image, dtype=np.float64)
            if self.image.shape != (self.height, self.width, 3):
                raise ValueError(
                    f"Camera: image shape {self.image.shape} does not match "
                    f"({self.height}, {self.width}, 3)"
                )
        self._rays = None

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    def ray_directions(self) -> np.ndarray:
        """Unit world-space rays through every pixel center, shape (H*W, 3)."""
        if self._rays is None:
            jj, ii = np.meshgrid(np.arange(self.width), np.arange(self.height))
            d = np.stack(
                [
                    (jj.ravel() - self.cx) / self.fx,
                    (ii.ravel() - self.cy) / self.fy,
                    np.ones(self.width * self.height),
                ],
                axis=1,
            )
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            self._rays = d @ self.R  # R^T @ d per row
        return self._rays

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.R.T + self.t

    def project(self, points: np.ndarray):
        """Pixel coordinates and depth for world points (M, 3) -> (u, v, z)."""
        pc = self.to_camera(np.asarray(points, dtype=np.float64))
        z = pc[:, 2]
        u = self.fx * pc[:, 0] / z + self.cx
        v = self.fy * pc[:, 1] / z + self.cy
        return u, v, z


@dataclass
class Scene:
    """Cameras plus the Gaussian parameter arrays being optimized."""

    cameras: list[Camera]
    positions: np.ndarray        # (N, 3)
    log_scales: np.ndarray       # (N, 3)
    rotations: np.ndarray        # (N, 4) raw quaternions
    opacity_logits: np.ndarray   # (N,)
    sh_coeffs: np.ndarray        # (N, 3, B)
    normals: np.ndarray          # (N, 3) raw, normalized on use
    sh_degree: int = 2
    test_indices: tuple = ()

    def __post_init__(self):
        n = len(self.positions)
        for name in PARAM_NAMES:
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            if len(arr) != n:
                raise ValueError(f"Scene: {name} has {len(arr)} rows, expected {n}")
        b = (self.sh_degree + 1) ** 2
        if self.sh_coeffs.shape[1:] != (3, b):
            raise ValueError(
                f"Scene: sh_coeffs shape {self.sh_coeffs.shape} does not match degree {self.sh_degree}"
            )
        self.test_indices = tuple(int(i) for i in self.test_indices)

    @property
    def num_gaussians(self) -> int:
        return len(self.positions)

    @property
    def train_indices(self) -> tuple:
        test = set(self.test_indices)
        return tuple(i for i in range(len(self.cameras)) if i not in test)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for name in PARAM_NAMES:
            setattr(self, name, np.ascontiguousarray(params[name], dtype=np.float64))

    def parameter_values(self, tape: Tape | None) -> dict[str, Value]:
        """Tape leaves for training, or constants for forward-only evaluation."""
        if tape is None:
            return {name: constant(getattr(self, name)) for name in PARAM_NAMES}
        return {name: tape.leaf(getattr(self, name)) for name in PARAM_NAMES}

    def camera_extent(self) -> float:
        """Radius of the camera bounding sphere; scales position step sizes."""
        centers = np.stack([c.center for c in self.cameras])
        mid = centers.mean(axis=0)
        r = float(np.max(np.linalg.norm(centers - mid, axis=1)))
        return max(r, 1e-6)

    @staticmethod
    def from_gaussians(
        gaussians: list[Gaussian],
        cameras: list[Camera],
        sh_degree: int = 2,
        test_indices=(),
    ) -> "Scene":
        return Scene(
            cameras=cameras,
            positions=np.stack([g.position for g in gaussians]).astype(np.float64),
            log_scales=np.log(np.stack([g.scale for g in gaussians]).astype(np.float64)),
            rotations=np.stack([g.rotation for g in gaussians]).astype(np.float64),
            opacity_logits=inverse_sigmoid([g.opacity for g in gaussians]),
            sh_coeffs=np.stack([g.sh for g in gaussians]).astype(np.float64),
            normals=np.stack([g.normal for g in gaussians]).astype(np.float64),
            sh_degree=sh_degree,
            test_indices=test_indices,
        )

    def gaussian(self, i: int) -> Gaussian:
        """Activated view of one primitive (copies)."""
        q = self.rotations[i]
        n = self.normals[i]
        return Gaussian(
            position=self.positions[i].copy(),
            scale=np.exp(self.log_scales[i]),
            rotation=q / np.linalg.norm(q),
            opacity=float(1.0 / (1.0 + np.exp(-self.opacity_logits[i]))),
            sh=self.sh_coeffs[i].copy(),
            normal=n / np.linalg.norm(n),
        )


def default_normals(positions, log_scales, rotations, toward: np.ndarray) -> np.ndarray:
    """Initial normals: the axis of smallest scale, oriented toward a point."""
    q = np.asarray(rotations, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    rot = quat_to_rotation(constant(q)).data
    axis = np.argmin(np.asarray(log_scales), axis=1)
    normals = rot[np.arange(len(q)), :, axis]  # column of the smallest scale
    to_cam = np.asarray(toward, dtype=np.float64) - np.asarray(positions)
    flip = np.sum(normals * to_cam, axis=1) < 0.0
    normals = normals.copy()
    normals[flip] *= -1.0
    return normals


# ---------------------------------------------------------------------------
# persistence: text header + raw float64 block in one file
# ---------------------------------------------------------------------------

_MAGIC = "viewsplat-scene v1"


def _format_float(x: float) -> str:
    return repr(float(x))


def _camera_fields(cam: Camera, image_rel: str) -> str:
    nums = [cam.fx, cam.fy, cam.cx, cam.cy]
    parts = [str(cam.cam_id)] + [_format_float(v) for v in nums]
    parts += [str(cam.width), str(cam.height)]
    parts += [_format_float(v) for v in cam.R.ravel()]
    parts += [_format_float(v) for v in cam.t]
    parts.append(image_rel)
    return " ".join(parts)


def parse_camera_fields(fields: list[str], base_dir: str | None, load_images: bool) -> Camera:
    """Build a camera from `id fx fy cx cy w h R(9) t(3) image-path` fields."""
    if len(fields) != 20:
        raise ValueError(f"camera line needs 20 fields, got {len(fields)}")
    cam_id = int(fields[0])
    fx, fy, cx, cy = (float(v) for v in fields[1:5])
    w, h = int(fields[5]), int(fields[6])
    R = np.array([float(v) for v in fields[7:16]]).reshape(3, 3)
    t = np.array([float(v) for v in fields[16:19]])
    rel = fields[19]
    image = None
    path = None
    if rel != "-":
        path = rel if base_dir is None else os.path.join(base_dir, rel)
        if load_images:
            from .imgio import read_image

            image = read_image(path)
    return Camera(
        fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h, R=R, t=t,
        image=image, image_path=path, cam_id=cam_id,
    )


def load_camera_list(path, load_images: bool = True) -> list[Camera]:
    """Read a plain-text pose list, one camera per line:

    id fx fy cx cy w h r00 r01 r02 r10 r11 r12 r20 r21 r22 t0 t1 t2 image-path
    """
    base = os.path.dirname(os.path.abspath(path))
    cams = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                cams.append(parse_camera_fields(line.split(), base, load_images))
            except ValueError as e:
                raise ValueError(f"{path}:{ln}: {e}") from e
    return cams


def save_scene(scene: Scene, path, write_images: bool = True) -> None:
    """Write the scene to one file; camera images go to images/ next to it."""
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    os.makedirs(base, exist_ok=True)
    lines = [_MAGIC]
    lines.append(f"sh_degree {scene.sh_degree}")
    if scene.test_indices:
        lines.append("test_indices " + " ".join(str(i) for i in scene.test_indices))
    img_dir = os.path.join(base, "images")
    for i, cam in enumerate(scene.cameras):
        rel = "-"
        if cam.image is not None:
            rel = f"images/view_{i:03d}.png"
            if write_images:
                from .imgio import write_image

                os.makedirs(img_dir, exist_ok=True)
                write_image(os.path.join(base, rel), cam.image)
        elif cam.image_path is not None:
            rel = os.path.relpath(cam.image_path, base)
        lines.append("camera " + _camera_fields(cam, rel))
    n = scene.num_gaussians
    lines.append(f"gaussians {n}")
    blocks = []
    payload = []
    for name in PARAM_NAMES:
        arr = getattr(scene, name)
        blocks.append(name + ":" + "x".join(str(s) for s in arr.shape))
        payload.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    lines.append("blocks " + " ".join(blocks))
    lines.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for chunk in payload:
            fh.write(chunk)


def load_scene(path, load_images: bool = True) -> Scene:
    """Read a scene file written by save_scene.

    Quaternions that drifted off unit length are renormalized with a warning;
    a missing normals block falls back to smallest-axis defaults oriented
    toward the first training camera.
    """
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0 or raw[:nl].decode("utf-8", "replace") != _MAGIC:
        raise ValueError(f"{path}: not a scene file (bad magic line)")
    header_end = raw.find(b"end_header\n")
    if header_end < 0:
        raise ValueError(f"{path}: missing end_header")
    header = raw[:header_end].decode("utf-8").splitlines()
    body = raw[header_end + len(b"end_header\n"):]

    sh_degree = 2
    test_indices: tuple = ()
    cameras: list[Camera] = []
    n_gauss = None
    blocks: list[tuple[str, tuple]] = []
    for ln, line in enumerate(header[1:], 2):
        line = line.strip()
        if not line:
            continue
        key, _, rest = line.partition(" ")
        fields = rest.split()
        if key == "sh_degree":
            sh_degree = int(fields[0])
        elif key == "test_indices":
            test_indices = tuple(int(v) for v in fields)
        elif key == "camera":
            try:
                cameras.append(parse_camera_fields(fields, base, load_images))
            except ValueError as e:
                raise ValueError(f"{path}:{ln}: {e}") from e
        elif key == "gaussians":
            n_gauss = int(fields[0])
        elif key == "blocks":
            for spec_str in fields:
                name, _, dims = spec_str.partition(":")
                blocks.append((name, tuple(int(d) for d in dims.split("x"))))
        else:
            raise ValueError(f"{path}:{ln}: unknown header key {key!r}")
    if n_gauss is None:
        raise ValueError(f"{path}: header missing gaussians count")

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in blocks:
        count = int(np.prod(shape)) if shape else 0
        end = offset + count * 8
        if end > len(body):
            raise ValueError(f"{path}: binary block {name!r} is truncated")
        arrays[name] = (
            np.frombuffer(body[offset:end], dtype="<f8").reshape(shape).copy()
        )
        offset = end

    for name in ("positions", "log_scales", "rotations", "opacity_logits", "sh_coeffs"):
        if name not in arrays:
            raise ValueError(f"{path}: missing required block {name!r}")

    q = arrays["rotations"]
    norms = np.linalg.norm(q, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        warnings.warn(f"{path}: renormalizing {int(np.sum(np.abs(norms-1) > 1e-9))} quaternions")
        arrays["rotations"] = q / norms[:, None]

    if "normals" not in arrays:
        toward = np.zeros(3)
        test = set(test_indices)
        for i, cam in enumerate(cameras):
            if i not in test:
                toward = cam.center
                break
        arrays["normals"] = default_normals(
            arrays["positions"], arrays["log_scales"], arrays["rotations"], toward
        )

    return Scene(
        cameras=cameras,
        sh_degree=sh_degree,
        test_indices=test_indices,
        **{name: arrays[name] for name in PARAM_NAMES},
    )
