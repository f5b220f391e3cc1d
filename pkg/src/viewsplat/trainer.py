"""End-to-end optimization: Adam over scene and network, schedules, pruning.

The loop owns all mutable state and runs single threaded.  Every random
draw comes from one seeded generator, metric records carry no timestamps,
and checkpoints store optimizer moments and the generator state verbatim,
so two runs from the same seed, or a run resumed from a checkpoint,
reproduce each other bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .autodiff import Tape, backward
from .pipeline import frame_losses, render_frame
from .residual import ResidualNet
from .scene import PARAM_NAMES, Scene, load_scene, save_scene

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainResult",
    "schedule",
    "adam_init",
    "adam_step",
    "renormalize_scene",
    "prune_scene",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    """Every knob of the optimization, mirrored one-to-one in config files.

    The desk-scale defaults shrink the reference schedule (30,000 iterations,
    warmup at 7,000, halvings at 18,000 and 25,000, decay over the final
    20,000) proportionally; all breakpoints derive from ``iters`` so the
    schedule keeps its shape at any scale.
    """

    iters: int = 2000
    warmup: int = 300
    gamma_start: float = 1.0
    gamma_end: float = 0.5
    lambda_photo: float = 0.3
    lambda_normal: float = 0.03
    lr_net: float = 1e-3
    lr_position: float = 1.6e-4   # multiplied by the camera ring extent
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_sh: float = 2.5e-3
    lr_normal: float = 1e-3
    prune_threshold: float = 0.05
    prune_every: int = 500
    k_median: int = 4
    n_candidates: int = 4
    m_views: int = 3
    tau: float = 0.001
    exposure_correction: bool = False
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup < self.iters:
            raise ValueError(
                f"warmup {self.warmup} must lie in [0, iters={self.iters})")
        if not 0.0 <= self.prune_threshold < 1.0:
            raise ValueError(
                f"prune_threshold {self.prune_threshold} outside [0, 1)")
        if self.m_views > self.n_candidates:
            raise ValueError("m_views cannot exceed n_candidates")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        data = json.loads(text)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**data)


def schedule(cfg: TrainConfig, it: int):
    """Loss weights and network learning rate at one iteration.

    The warp and normal terms switch on after warmup; gamma decays linearly
    from 1 to 0.5 across the final two thirds of training; the network rate
    halves at 60% and at five sixths of the run.
    """
    lam1 = cfg.lambda_photo if it >= cfg.warmup else 0.0
    lam2 = cfg.lambda_normal if it >= cfg.warmup else 0.0
    decay_start = cfg.iters / 3.0
    if it <= decay_start:
        gamma = cfg.gamma_start
    else:
        frac = min(1.0, (it - decay_start) / (cfg.iters - decay_start))
        gamma = cfg.gamma_start + frac * (cfg.gamma_end - cfg.gamma_start)
    lr = cfg.lr_net
    if it >= int(0.6 * cfg.iters):
        lr *= 0.5
    if it >= int(cfg.iters * 5.0 / 6.0):
        lr *= 0.5
    return gamma, lam1, lam2, lr


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_init(params: dict) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(np.asarray(p, dtype=np.float64)) for k, p in params.items()},
        v={k: np.zeros_like(np.asarray(p, dtype=np.float64)) for k, p in params.items()},
        step=0,
    )


def adam_step(params: dict, grads: dict, state: AdamState, lrs: dict):
    """One bias-corrected Adam update; returns (new params, skipped names).

    A missing or non-finite gradient skips that parameter for the step (its
    moments stay untouched) and reports the name so the loop can log it.
    """
    state.step += 1
    t = state.step
    out = {}
    skipped = []
    for name, p in params.items():
        g = grads.get(name)
        if g is None or not np.all(np.isfinite(g)):
            skipped.append(name)
            out[name] = np.asarray(p, dtype=np.float64).copy()
            continue
        g = np.asarray(g, dtype=np.float64)
        state.m[name] = ADAM_BETA1 * state.m[name] + (1 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1 - ADAM_BETA2) * g * g
        mhat = state.m[name] / (1 - ADAM_BETA1 ** t)
        vhat = state.v[name] / (1 - ADAM_BETA2 ** t)
        out[name] = np.asarray(p, dtype=np.float64) - lrs[name] * mhat / (
            np.sqrt(vhat) + ADAM_EPS)
    return out, skipped


def renormalize_scene(scene: Scene) -> None:
    """Force unit quaternions and unit normals after a gradient step."""
    q = scene.rotations
    scene.rotations = q / np.maximum(
        np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    n = scene.normals
    scene.normals = n / np.maximum(
        np.linalg.norm(n, axis=1, keepdims=True), 1e-12)


def gauss_learning_rates(cfg: TrainConfig, extent: float) -> dict:
    return {
        "positions": cfg.lr_position * extent,
        "log_scales": cfg.lr_scale,
        "rotations": cfg.lr_rotation,
        "opacity_logits": cfg.lr_opacity,
        "sh_coeffs": cfg.lr_sh,
        "normals": cfg.lr_normal,
    }


def prune_scene(scene: Scene, state: AdamState, threshold: float) -> int:
    """Drop Gaussians whose activated opacity fell below the threshold.

    Optimizer moment rows are dropped in lockstep.  Returns the number
    removed; a cut that would empty the scene is refused with a warning and
    leaves everything untouched.
    """
    opacity = 1.0 / (1.0 + np.exp(-scene.opacity_logits))
    keep = opacity >= threshold
    if keep.all():
        return 0
    if not keep.any():
        warnings.warn("prune would remove every Gaussian; keeping the scene")
        return 0
    removed = int((~keep).sum())
    scene.set_params({name: getattr(scene, name)[keep] for name in PARAM_NAMES})
    for name in PARAM_NAMES:
        state.m[name] = state.m[name][keep]
        state.v[name] = state.v[name][keep]
    return removed


@dataclass
class TrainResult:
    scene: Scene
    net: ResidualNet
    metrics: list
    halted: bool = False
    halt_reason: str = ""


def evaluate(scene: Scene, net: ResidualNet, cfg: TrainConfig,
             indices=None) -> list:
    """Held-out quality: PSNR of the base and final images per view."""
    if indices is None:
        indices = scene.test_indices or scene.train_indices
    rows = []
    for idx in indices:
        frame = render_frame(
            scene, scene.parameter_values(None), net.parameter_values(None),
            idx, k_median=cfg.k_median, n_candidates=cfg.n_candidates,
            m_views=cfg.m_views, tau=cfg.tau,
            exposure_on=cfg.exposure_correction)
        real = scene.cameras[idx].image
        rows.append({
            "view": int(idx),
            "psnr_base": losses.psnr(frame.base, real),
            "psnr_final": losses.psnr(frame.final, real),
            "ssim_final": losses.ssim_value(frame.final.data, real),
        })
    return rows


def _mean(rows, key) -> float:
    vals = [r[key] for r in rows]
    return float(np.mean(vals)) if vals else float("nan")


def save_checkpoint(path: str, scene: Scene, net: ResidualNet,
                    gauss_state: AdamState, net_state: AdamState,
                    rng: np.random.Generator, it: int, cfg: TrainConfig,
                    queue=None, write_images: bool = True) -> None:
    """Write everything needed for a bit-compatible resume.

    Layout: scene.txt (cameras, images, parameter blocks), net.bin(+.txt),
    optim.npz (both optimizers' moments), state.json (iteration, config,
    generator state, pending view queue).  The metrics log is appended
    separately by train().
    """
    os.makedirs(path, exist_ok=True)
    save_scene(scene, os.path.join(path, "scene.txt"), write_images=write_images)
    net.save(os.path.join(path, "net.bin"))
    moments = {}
    for prefix, st in (("gauss", gauss_state), ("net", net_state)):
        for name, arr in st.m.items():
            moments[f"{prefix}_m_{name}"] = arr
        for name, arr in st.v.items():
            moments[f"{prefix}_v_{name}"] = arr
    np.savez(os.path.join(path, "optim.npz"), **moments)
    meta = {
        "iteration": int(it),
        "gauss_step": int(gauss_state.step),
        "net_step": int(net_state.step),
        "rng_state": rng.bit_generator.state,
        "sampler_queue": [int(i) for i in (queue or [])],
        "config": dataclasses.asdict(cfg),
    }
    with open(os.path.join(path, "state.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)


def load_checkpoint(path: str, scene: Scene | None = None):
    """Restore (scene, net, gauss_state, net_state, rng, it, cfg, queue).

    When ``scene`` is given, only its parameter arrays are replaced from the
    checkpoint; its cameras and captured images stay as passed, which keeps
    in-memory datasets exact.  Without it the whole scene file is loaded.
    """
    ck = load_scene(os.path.join(path, "scene.txt"), load_images=scene is None)
    if scene is not None:
        scene.set_params(ck.params())
        target = scene
    else:
        target = ck
    net = ResidualNet.load(os.path.join(path, "net.bin"))
    with open(os.path.join(path, "state.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = TrainConfig(**meta["config"])
    data = np.load(os.path.join(path, "optim.npz"))
    gauss_state = AdamState(step=meta["gauss_step"])
    net_state = AdamState(step=meta["net_step"])
    for key in data.files:
        prefix, kind, name = key.split("_", 2)
        st = gauss_state if prefix == "gauss" else net_state
        (st.m if kind == "m" else st.v)[name] = data[key]
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    queue = [int(i) for i in meta.get("sampler_queue", [])]
    return (target, net, gauss_state, net_state, rng, int(meta["iteration"]),
            cfg, queue)


class _ViewSampler:
    """Uniform without replacement per epoch over the training views."""

    def __init__(self, indices, rng: np.random.Generator):
        self.indices = list(indices)
        self.rng = rng
        self.queue: list[int] = []

    def next(self) -> int:
        if not self.queue:
            self.queue = [self.indices[i]
                          for i in self.rng.permutation(len(self.indices))]
        return self.queue.pop()


def train(scene: Scene, cfg: TrainConfig, net: ResidualNet | None = None,
          checkpoint_dir: str | None = None, resume: bool = False,
          stop_after: int | None = None, quiet: bool = True) -> TrainResult:
    """Optimize the scene and network for cfg.iters iterations.

    Per iteration: draw a target training view, run the forward pass, take
    one Adam step on every parameter, renormalize unit-vector attributes,
    and prune on the fixed cadence.  Loss components and held-out PSNR are
    recorded every ``log_every`` iterations.  A non-finite loss halts the
    run and leaves the last finite state in place.

    ``stop_after`` caps the number of iterations this call performs; the
    checkpoint written at the stopping point resumes bit-compatibly, so a
    budgeted session plus a resumed one reproduces an uninterrupted run.
    """
    if len(scene.train_indices) < 2:
        raise ValueError("training needs at least 2 training views")

    rng = np.random.default_rng(cfg.seed)
    if net is None:
        net = ResidualNet.initialize(rng)
    gauss_state = adam_init(scene.params())
    net_state = adam_init(net.weights)
    start_iter = 0
    pending: list[int] = []
    metrics: list = []

    if resume:
        if not checkpoint_dir:
            raise ValueError("resume requires a checkpoint directory")
        (_, net, gauss_state, net_state, rng, start_iter, _,
         pending) = load_checkpoint(checkpoint_dir, scene=scene)

    extent = scene.camera_extent()
    sampler = _ViewSampler(scene.train_indices, rng)
    sampler.queue = pending
    log_path = (os.path.join(checkpoint_dir, "metrics.jsonl")
                if checkpoint_dir else None)
    if log_path and not resume:
        os.makedirs(checkpoint_dir, exist_ok=True)
        open(log_path, "w").close()

    def emit(record: dict) -> None:
        metrics.append(record)
        if log_path:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if not quiet:
            print(json.dumps(record, sort_keys=True))

    end = cfg.iters
    if stop_after is not None:
        if stop_after < 1:
            raise ValueError("stop_after must be positive")
        end = min(cfg.iters, start_iter + stop_after)

    halted = False
    halt_reason = ""
    for it in range(start_iter, end):
        gamma, lam1, lam2, lr_net = schedule(cfg, it)
        target = sampler.next()
        # Stage the graph to the schedule: base only while every extra term
        # is off; add warps once the photo term or exposure fit needs them;
        # run the network only once its output carries loss weight.
        warps_on = (gamma < 1.0) or (lam1 > 0.0) or cfg.exposure_correction
        net_on = gamma < 1.0

        tape = Tape()
        gp = scene.parameter_values(tape)
        npar = net.parameter_values(tape)
        frame = render_frame(
            scene, gp, npar, target, k_median=cfg.k_median,
            n_candidates=cfg.n_candidates, m_views=cfg.m_views, tau=cfg.tau,
            exposure_on=cfg.exposure_correction, with_residual=warps_on,
            need_final=net_on)
        out = frame_losses(frame, scene.cameras[target].image, gamma=gamma,
                           lambda_photo=lam1, lambda_normal=lam2)

        if not np.isfinite(out.total.data):
            halted = True
            halt_reason = f"non-finite loss at iteration {it}"
            emit({"iter": it, "event": "divergence", "reason": halt_reason})
            if checkpoint_dir:
                save_checkpoint(checkpoint_dir, scene, net, gauss_state,
                                net_state, rng, it, cfg, queue=sampler.queue)
            break

        backward(out.total)
        gauss_grads = {k: v.grad if v.grad is not None else np.zeros_like(v.data)
                       for k, v in gp.items()}

        new_gauss, skipped_g = adam_step(
            scene.params(), gauss_grads, gauss_state,
            gauss_learning_rates(cfg, extent))
        scene.set_params(new_gauss)
        renormalize_scene(scene)
        skipped_n: list = []
        if net_on:
            # Without the decoder in the graph the network gradient is
            # structurally zero, which Adam treats as a fixed point anyway.
            net_grads = {k: v.grad if v.grad is not None
                         else np.zeros_like(v.data) for k, v in npar.items()}
            lrs_net = {name: lr_net for name in net.weights}
            new_net, skipped_n = adam_step(net.weights, net_grads, net_state,
                                           lrs_net)
            net.weights = new_net
        if skipped_g or skipped_n:
            emit({"iter": it, "event": "skipped_nonfinite_grads",
                  "groups": skipped_g + skipped_n})

        if cfg.prune_every > 0 and it > 0 and it % cfg.prune_every == 0:
            removed = prune_scene(scene, gauss_state, cfg.prune_threshold)
            if removed:
                emit({"iter": it, "event": "prune", "removed": removed,
                      "remaining": scene.num_gaussians})

        if it % cfg.log_every == 0 or it == cfg.iters - 1:
            rows = evaluate(scene, net, cfg)
            emit({
                "iter": it,
                "total": float(out.total.data),
                "rgb": float(out.rgb.data),
                "photo": float(out.photo.data),
                "normal": float(out.normal.data),
                "gamma": gamma,
                "lr_net": lr_net,
                "n_views": out.n_views,
                "n_gaussians": scene.num_gaussians,
                "psnr_base": _mean(rows, "psnr_base"),
                "psnr_final": _mean(rows, "psnr_final"),
            })

        # Large graphs otherwise linger until the cycle collector runs,
        # which can exhaust memory long before it bothers.
        tape.release()

    if checkpoint_dir and not halted:
        save_checkpoint(checkpoint_dir, scene, net, gauss_state, net_state,
                        rng, end, cfg, queue=sampler.queue)
    return TrainResult(scene=scene, net=net, metrics=metrics, halted=halted,
                       halt_reason=halt_reason)
