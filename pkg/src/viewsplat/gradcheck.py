"""End-to-end gradient verification on a tiny two-Gaussian scene.

Every training loss term is differentiated with respect to every parameter
group (all six Gaussian attribute arrays and all network weight tensors)
and compared against central finite differences.  The scene is kept small
on purpose: two Gaussians on an 8x8 frame keep each probe cheap enough to
sweep hundreds of coordinates in seconds while exercising the exact same
code path as full training.

Source-view selection and consistency masks are recomputed per probe from
the perturbed forward pass; they are discrete choices, so the suite keeps
perturbations tiny and reports any probe that lands on a selection
boundary as a failure instead of hiding it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckResult, finite_difference_check
from .pipeline import frame_losses, render_frame
from .residual import ResidualNet
from .scene import PARAM_NAMES, Scene
from .synth import make_dataset

__all__ = ["CheckRow", "build_check_setup", "run_gradient_suite", "format_report"]

LOSS_NAMES = ("rgb", "photo", "normal", "total")


@dataclass
class CheckRow:
    loss: str
    group: str
    result: GradCheckResult

    @property
    def ok(self) -> bool:
        return len(self.result.failed) == 0 and self.result.max_rel_error < 1e-4


def build_check_setup(seed: int = 0):
    """Two broad surface Gaussians on an 8x8 four-view plane scene.

    Returns the scene and a network whose every layer carries nonzero
    weights, so gradients reach each tensor (a zero final layer would
    silently dead-end the earlier decoder layers).  The scene parameters
    are jittered off the exact surface fit: perfectly aligned normals make
    the normal term identically zero with a vanishing gradient, which
    would turn those rows into vacuous checks.
    """
    ds = make_dataset(kind="plane", n_views=4, width=8, height=8, seed=seed,
                      n_gaussians=2, init="surface", test_every=100)
    scene = ds.scene
    rng = np.random.default_rng(seed + 1)
    scene.positions = scene.positions + 0.02 * rng.normal(size=(2, 3))
    scene.rotations = scene.rotations + 0.05 * rng.normal(size=(2, 4))
    scene.normals = scene.normals + 0.15 * rng.normal(size=(2, 3))
    scene.log_scales = scene.log_scales + 0.05 * rng.normal(size=(2, 3))
    scene.opacity_logits = scene.opacity_logits + 0.1 * rng.normal(size=2)
    scene.sh_coeffs = scene.sh_coeffs + 0.05 * rng.normal(size=(2, 3, 9))
    net = ResidualNet.initialize(rng)
    for name in net.weights:
        net.weights[name] = net.weights[name] + 0.05 * rng.normal(
            size=net.weights[name].shape)
    return scene, net


def _loss_value(scene: Scene, net_arrays: dict, gauss_arrays: dict,
                loss_name: str, target: int):
    gp = {k: ad.as_value(v) for k, v in gauss_arrays.items()}
    npar = {k: ad.as_value(v) for k, v in net_arrays.items()}
    frame = render_frame(scene, gp, npar, target)
    out = frame_losses(frame, scene.cameras[target].image, gamma=0.7,
                       lambda_photo=0.3, lambda_normal=0.03)
    return getattr(out, loss_name)


def run_gradient_suite(seed: int = 0, target: int = 2, step: float = 1e-5,
                       coords_per_group: int = 8) -> list[CheckRow]:
    """Finite-difference every loss against every parameter group.

    Checks a strided subset of coordinates in each tensor.  Gradients that
    are identically zero on both sides (for example warp losses against
    network weights) are skipped by the negligible floor rather than
    reported as spurious matches.
    """
    scene, net = build_check_setup(seed)
    gauss = scene.params()
    netw = dict(net.weights)
    groups = [("gauss", name, arr) for name, arr in gauss.items()]
    groups += [("net", name, arr) for name, arr in netw.items()]

    rows = []
    for li, loss_name in enumerate(LOSS_NAMES):
        for gi, (kind, name, arr) in enumerate(groups):
            # Seeded random coordinates rather than a fixed stride: dead
            # ReLU units cluster, and a stride can land every probe on one.
            pick = np.random.default_rng((seed + 1) * 1000 + li * 100 + gi)
            coords = np.sort(pick.choice(
                arr.size, size=min(coords_per_group, arr.size), replace=False))

            def f(theta, _kind=kind, _name=name, _shape=arr.shape,
                  _loss=loss_name):
                shaped = ad.reshape(theta, _shape)
                ga = {k: v for k, v in gauss.items()}
                na = {k: v for k, v in netw.items()}
                if _kind == "gauss":
                    ga[_name] = shaped
                else:
                    na[_name] = shaped
                return _loss_value(scene, na, ga, _loss, target)

            result = finite_difference_check(
                f, arr.ravel(), step=step, coords=coords,
                negligible_below=1e-10)
            rows.append(CheckRow(loss=loss_name, group=name, result=result))
    return rows


def format_report(rows: list[CheckRow]) -> str:
    lines = []
    worst = 0.0
    bad = 0
    for row in rows:
        r = row.result
        status = "ok" if row.ok else "FAIL"
        lines.append(
            f"{status:4s} loss={row.loss:<6s} group={row.group:<14s} "
            f"max_rel={r.max_rel_error:.3e} checked={len(r.coords)} "
            f"failed={len(r.failed)} skipped={len(r.skipped)}")
        worst = max(worst, r.max_rel_error)
        bad += 0 if row.ok else 1
    lines.append(
        f"gradient suite: {len(rows) - bad}/{len(rows)} groups ok, "
        f"worst max_rel={worst:.3e}")
    return "\n".join(lines)
