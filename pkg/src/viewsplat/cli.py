"""Command-line surface: synth, train, render, eval, check-grads.

Every subcommand takes --seed so all randomness is reproducible, and train
mirrors each configuration field both as a flag and as a key in an optional
JSON config file (explicit flags win over the file).  Scene arguments accept
either a scene file or a directory containing scene.txt; checkpoint
directories written by train work directly because they hold the same
layout plus network weights.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .gradcheck import format_report, run_gradient_suite
from .imgio import write_image
from .pipeline import render_frame
from .residual import ResidualNet
from .scene import Scene, load_scene, save_scene
from .synth import KINDS, make_dataset
from .trainer import TrainConfig, evaluate, train

__all__ = ["main", "build_parser", "KIND_ALIASES"]

# Friendly scene names alongside the internal short kinds.
KIND_ALIASES = {
    "textured-plane": "plane",
    "two-plane-occlusion": "occlusion",
    "specular-sphere": "sphere",
}


def _kind(name: str) -> str:
    return KIND_ALIASES.get(name, name)


def _parse_res(text: str) -> tuple[int, int]:
    """'64' -> (64, 64); '64x48' -> width 64, height 48."""
    parts = text.lower().split("x")
    if len(parts) == 1:
        w = h = int(parts[0])
    elif len(parts) == 2:
        w, h = int(parts[0]), int(parts[1])
    else:
        raise argparse.ArgumentTypeError(f"bad resolution {text!r}")
    if w < 16 or h < 16:
        raise argparse.ArgumentTypeError("resolution must be at least 16x16")
    return w, h


def _scene_file(path: str) -> str:
    if os.path.isdir(path):
        inner = os.path.join(path, "scene.txt")
        if not os.path.exists(inner):
            raise FileNotFoundError(f"no scene.txt inside directory {path}")
        return inner
    return path


_CONFIG_FLAG_FIELDS = [
    f for f in dataclasses.fields(TrainConfig)
    if f.name not in ("exposure_correction", "seed")
]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="viewsplat",
        description="Differentiable Gaussian splatting with warped-view "
                    "residual correction.")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic multi-view scene")
    sp.add_argument("--kind", default="specular-sphere",
                    choices=sorted(set(KINDS) | set(KIND_ALIASES)))
    sp.add_argument("--views", type=int, default=16)
    sp.add_argument("--res", type=_parse_res, default=(64, 64),
                    help="WIDTH or WIDTHxHEIGHT")
    sp.add_argument("--gaussians", type=int, default=400)
    sp.add_argument("--init", default="surface", choices=("surface", "random"))
    sp.add_argument("--exposure-amplitude", type=float, default=0.0,
                    help="per-view affine exposure jitter strength")
    sp.add_argument("--test-every", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output scene directory")

    tp = sub.add_parser("train", help="optimize a scene end to end")
    tp.add_argument("--scene", required=True)
    tp.add_argument("--out", required=True, help="checkpoint directory")
    tp.add_argument("--config", help="JSON file with configuration fields")
    tp.add_argument("--resume", action="store_true")
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--exposure-correction", choices=("on", "off"),
                    default=None)
    for f in _CONFIG_FLAG_FIELDS:
        flag = "--" + f.name.replace("_", "-")
        tp.add_argument(flag, type=type(f.default), default=None,
                        dest=f.name)

    rp = sub.add_parser("render", help="write rendered images for views")
    rp.add_argument("--scene", required=True,
                    help="scene file/directory or checkpoint directory")
    rp.add_argument("--out", required=True, help="output image directory")
    rp.add_argument("--views", default=None,
                    help="comma-separated view indices (default: test views)")
    rp.add_argument("--decompose", action="store_true",
                    help="also write the base image and the offset-mapped "
                         "residual")
    rp.add_argument("--seed", type=int, default=0)
    rp.add_argument("--exposure-correction", choices=("on", "off"),
                    default=None)

    ep = sub.add_parser("eval", help="print held-out quality metrics")
    ep.add_argument("--scene", required=True,
                    help="scene file/directory or checkpoint directory")
    ep.add_argument("--views", default=None,
                    help="comma-separated view indices (default: test views)")
    ep.add_argument("--seed", type=int, default=0)
    ep.add_argument("--exposure-correction", choices=("on", "off"),
                    default=None)

    gp = sub.add_parser("check-grads",
                        help="finite-difference check of every loss against "
                             "every parameter group")
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--coords", type=int, default=8,
                    help="coordinates probed per parameter group")
    gp.add_argument("--step", type=float, default=1e-5)

    return ap


def _load_bundle(scene_arg: str, seed: int, exposure_flag: str | None):
    """Scene + network + configuration from a scene or checkpoint path."""
    scene_path = _scene_file(scene_arg)
    scene = load_scene(scene_path)
    base_dir = os.path.dirname(scene_path)

    cfg = TrainConfig()
    state_path = os.path.join(base_dir, "state.json")
    if os.path.exists(state_path):
        with open(state_path, encoding="utf-8") as fh:
            import json
            cfg = TrainConfig(**json.load(fh)["config"])

    net_path = os.path.join(base_dir, "net.bin")
    if os.path.exists(net_path):
        net = ResidualNet.load(net_path)
    else:
        net = ResidualNet.initialize(np.random.default_rng(seed))

    if exposure_flag is not None:
        cfg = dataclasses.replace(cfg,
                                  exposure_correction=exposure_flag == "on")
    return scene, net, cfg


def _view_list(arg: str | None, scene: Scene) -> list[int]:
    if arg:
        return [int(tok) for tok in arg.split(",") if tok.strip()]
    if scene.test_indices:
        return list(scene.test_indices)
    return list(range(len(scene.cameras)))


def _cmd_synth(args) -> int:
    w, h = args.res
    ds = make_dataset(kind=_kind(args.kind), n_views=args.views, width=w,
                      height=h, seed=args.seed, n_gaussians=args.gaussians,
                      init=args.init,
                      exposure_amplitude=args.exposure_amplitude,
                      test_every=args.test_every)
    os.makedirs(args.out, exist_ok=True)
    save_scene(ds.scene, os.path.join(args.out, "scene.txt"))
    print(f"wrote {args.out}: kind={_kind(args.kind)} views={args.views} "
          f"res={w}x{h} gaussians={ds.scene.num_gaussians} "
          f"test={list(ds.scene.test_indices)}")
    return 0


def _cmd_train(args) -> int:
    scene = load_scene(_scene_file(args.scene))
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = TrainConfig.from_json(fh.read())
    else:
        cfg = TrainConfig()
    overrides = {}
    for f in _CONFIG_FLAG_FIELDS:
        value = getattr(args, f.name)
        if value is not None:
            overrides[f.name] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.exposure_correction is not None:
        overrides["exposure_correction"] = args.exposure_correction == "on"
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)

    result = train(scene, cfg, checkpoint_dir=args.out, resume=args.resume,
                   quiet=False)
    if result.halted:
        print(f"halted: {result.halt_reason}", file=sys.stderr)
        return 1
    print(f"finished {cfg.iters} iterations; checkpoint in {args.out}")
    return 0


def _cmd_render(args) -> int:
    scene, net, cfg = _load_bundle(args.scene, args.seed,
                                   args.exposure_correction)
    views = _view_list(args.views, scene)
    os.makedirs(args.out, exist_ok=True)
    gauss = scene.parameter_values(None)
    weights = net.parameter_values(None)
    for idx in views:
        frame = render_frame(scene, gauss, weights, idx,
                             k_median=cfg.k_median,
                             n_candidates=cfg.n_candidates,
                             m_views=cfg.m_views, tau=cfg.tau,
                             exposure_on=cfg.exposure_correction)
        write_image(os.path.join(args.out, f"final_{idx:03d}.png"),
                    frame.final.data)
        if args.decompose:
            write_image(os.path.join(args.out, f"base_{idx:03d}.png"),
                        frame.base.data)
            # residuals live around zero; offset-map them for viewing
            write_image(os.path.join(args.out, f"residual_{idx:03d}.png"),
                        0.5 + 0.5 * frame.residual.data)
    n = len(views) * (3 if args.decompose else 1)
    print(f"wrote {n} images for views {views} to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    scene, net, cfg = _load_bundle(args.scene, args.seed,
                                   args.exposure_correction)
    views = _view_list(args.views, scene)
    rows = evaluate(scene, net, cfg, indices=views)
    header = f"{'view':>5} {'psnr_base':>10} {'psnr_final':>11} {'ssim_final':>11}"
    print(header)
    for r in rows:
        print(f"{r['view']:>5d} {r['psnr_base']:>10.3f} "
              f"{r['psnr_final']:>11.3f} {r['ssim_final']:>11.4f}")
    mean = lambda key: float(np.mean([r[key] for r in rows]))
    print(f"{'mean':>5} {mean('psnr_base'):>10.3f} "
          f"{mean('psnr_final'):>11.3f} {mean('ssim_final'):>11.4f}")
    return 0


def _cmd_check_grads(args) -> int:
    rows = run_gradient_suite(seed=args.seed, step=args.step,
                              coords_per_group=args.coords)
    print(format_report(rows))
    return 0 if all(r.ok for r in rows) else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "synth": _cmd_synth,
        "train": _cmd_train,
        "render": _cmd_render,
        "eval": _cmd_eval,
        "check-grads": _cmd_check_grads,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
