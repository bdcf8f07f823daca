"""Command-line interface.

Subcommands: fit, render, eval, compare, viz-features, make-toy.
Configuration comes from an optional TOML file plus repeatable
`--set section.key=value` overrides; `--seed`, `--out-dir`, and
`--precision {f32,f64}` are available on every subcommand.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys

import numpy as np
import tomli

from . import autodiff as ad
from .checkpoint import CheckpointError
from .model import MODES
from .optim import NonFiniteGradient
from .render import Camera, render_image
from .scene import (load_blender_scene, look_at_origin, make_toy_scene,
                    save_blender_scene, write_image)
from .train import (TrainConfig, TrainingDiverged, compare_prior, evaluate,
                    load_run, train)
from .viz import export_feature_plane, save_feature_montage

__all__ = ["main", "cli"]


class UsageError(Exception):
    """Bad invocation (missing inputs, malformed overrides): exit 1."""


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract here says usage = 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _global_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="set the param, noise, and data seeds at once")
    common.add_argument("--out-dir", default=None,
                        help="output directory (default depends on command)")
    common.add_argument("--precision", choices=("f32", "f64"), default="f32",
                        help="training/render float width (default f32)")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="deepfield",
                     description="Sparse-view radiance-field reconstruction "
                                 "with untrained-generator feature grids.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("fit", parents=[common],
                       help="train a model on a scene directory")
    p.add_argument("scene_dir")
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   dest="overrides", help="override one config value")
    p.add_argument("--resume", default=None,
                   help="checkpoint to continue from")
    p.add_argument("--val-view", type=int, default=None,
                   help="track best checkpoint by PSNR on this view")

    p = sub.add_parser("render", parents=[common],
                       help="render novel views from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--views", type=int, default=8,
                   help="number of circular-path views (default 8)")
    p.add_argument("--poses", default=None,
                   help="render the poses of this scene manifest instead")
    p.add_argument("--size", type=int, default=64,
                   help="square image size for the circular path")
    p.add_argument("--angle-x", type=float, default=0.5,
                   help="horizontal field of view in radians")
    p.add_argument("--radius", type=float, default=None,
                   help="path radius (default 4 x half extent)")
    p.add_argument("--elevation", type=float, default=30.0,
                   help="path elevation in degrees")

    p = sub.add_parser("eval", parents=[common],
                       help="score a checkpoint against scene views")
    p.add_argument("checkpoint")
    p.add_argument("scene_dir")
    p.add_argument("--views", default=None,
                   help="comma-separated view indices (default: all)")

    p = sub.add_parser("compare", parents=[common],
                       help="matched deep-prior vs direct training runs")
    p.add_argument("scene_dir")
    p.add_argument("-k", type=int, default=4,
                   help="number of training views (default 4)")
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   dest="overrides", help="override one config value")

    p = sub.add_parser("viz-features", parents=[common],
                       help="export factor-plane channel images")
    p.add_argument("checkpoint")
    p.add_argument("--channels", type=int, default=4,
                   help="channels per plane to export (default 4)")

    p = sub.add_parser("make-toy", parents=[common],
                       help="write a procedural multi-sphere scene to disk")
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--image-size", type=int, default=64)

    return parser


# --------------------------------------------------------------------------
# config assembly
# --------------------------------------------------------------------------

def _load_config(args) -> TrainConfig:
    data = {}
    if getattr(args, "config", None):
        if not os.path.isfile(args.config):
            raise UsageError(f"config file not found: {args.config}")
        with open(args.config, "rb") as fh:
            data = tomli.load(fh)
    try:
        cfg = TrainConfig.from_dict(data)
    except (ValueError, TypeError) as err:
        raise UsageError(f"bad config file: {err}") from None
    for item in getattr(args, "overrides", []):
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set needs KEY=VALUE, got {item!r}")
        try:
            cfg = cfg.with_set(key.strip(), value.strip())
        except ValueError as err:
            raise UsageError(str(err)) from None
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, param_seed=args.seed,
                                  noise_seed=args.seed, data_seed=args.seed)
    if getattr(args, "val_view", None) is not None:
        cfg = dataclasses.replace(cfg, val_view=args.val_view)
    return cfg


def _require_scene_dir(path: str) -> str:
    if not os.path.isdir(path):
        raise UsageError(f"scene directory not found: {path}")
    manifest = os.path.join(path, "transforms_train.json")
    if not os.path.isfile(manifest):
        raise UsageError(f"no transforms_train.json in {path}")
    return path


def _set_precision(args) -> None:
    ad.set_default_dtype(
        np.float64 if args.precision == "f64" else np.float32)


def _out_dir(args, default: str) -> str:
    out = args.out_dir or default
    os.makedirs(out, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def _cmd_fit(args) -> int:
    _set_precision(args)
    scene_dir = _require_scene_dir(args.scene_dir)
    cfg = _load_config(args)
    if args.resume and not os.path.isfile(args.resume):
        raise UsageError(f"checkpoint not found: {args.resume}")
    out = _out_dir(args, "run")
    scene = load_blender_scene(scene_dir, background=cfg.background)
    run = train(cfg, scene, out_dir=out, resume=args.resume, log=print)
    final = run.history[-1] if run.history else {}
    print(f"done: iterations={run.iteration} "
          f"final_train_psnr={final.get('train_psnr', float('nan')):.4f} "
          f"checkpoint={os.path.join(out, 'checkpoint.zip')}")
    return 0


def _manifest_cameras(path: str, size: int) -> list[Camera]:
    """Cameras from a transforms-style manifest; images are not needed."""
    from .scene import _check_pose
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    try:
        angle_x = float(manifest["camera_angle_x"])
        frames = manifest["frames"]
    except (KeyError, TypeError) as err:
        raise UsageError(f"malformed pose manifest: missing {err}") from None
    cams = []
    for i, frame in enumerate(frames):
        c2w = _check_pose(np.asarray(frame["transform_matrix"], dtype=np.float64),
                          f"frame {i}")
        cams.append(Camera.from_fov(c2w, size, size, angle_x))
    return cams


def _circular_cameras(n: int, radius: float, elevation_deg: float,
                      size: int, angle_x: float) -> list[Camera]:
    cams = []
    phi = math.radians(elevation_deg)
    for i in range(n):
        theta = 2.0 * math.pi * i / max(n, 1)
        eye = np.array([radius * math.cos(theta) * math.cos(phi),
                        radius * math.sin(theta) * math.cos(phi),
                        radius * math.sin(phi)])
        cams.append(Camera.from_fov(look_at_origin(eye), size, size, angle_x))
    return cams


def _cmd_render(args) -> int:
    if not os.path.isfile(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    _set_precision(args)
    run = load_run(args.checkpoint)  # precision follows the checkpoint
    cfg = run.config
    if args.poses is not None:
        if not os.path.isfile(args.poses):
            raise UsageError(f"pose manifest not found: {args.poses}")
        cameras = _manifest_cameras(args.poses, args.size)
    else:
        radius = args.radius if args.radius is not None \
            else 4.0 * cfg.half_extent
        cameras = _circular_cameras(args.views, radius, args.elevation,
                                    args.size, args.angle_x)
    out = _out_dir(args, "renders")
    sample = run.model.sampler(run.model.grids())
    background = np.asarray(cfg.background, dtype=np.float64)
    poses = []
    for i, cam in enumerate(cameras):
        img = render_image(cam, sample, run.model.decoder, cfg.half_extent,
                           cfg.samples_per_ray, background,
                           occupancy=run.occupancy)
        path = os.path.join(out, f"render_{i:03d}.png")
        write_image(path, img)
        poses.append({"file_path": f"./render_{i:03d}",
                      "transform_matrix": cam.c2w.tolist()})
        print(f"wrote {path}")
    with open(os.path.join(out, "poses.json"), "w", encoding="utf-8") as fh:
        json.dump({"camera_angle_x": cameras[0].angle_x if cameras else 0.0,
                   "frames": poses}, fh, indent=2)
        fh.write("\n")
    return 0


def _cmd_eval(args) -> int:
    if not os.path.isfile(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    scene_dir = _require_scene_dir(args.scene_dir)
    _set_precision(args)
    run = load_run(args.checkpoint)
    scene = load_blender_scene(scene_dir, background=run.config.background)
    if args.views is not None:
        try:
            views = [int(v) for v in args.views.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"bad --views list: {args.views!r}") from None
        bad = [v for v in views if not 0 <= v < len(scene)]
        if bad:
            raise UsageError(f"view indices out of range: {bad}")
    else:
        views = None
    out = _out_dir(args, "eval")
    report = evaluate(run, scene, views, out_dir=out, log=print)
    print(f"mean_psnr={report['mean_psnr']} mean_ssim={report['mean_ssim']}")
    return 0


def _cmd_compare(args) -> int:
    scene_dir = _require_scene_dir(args.scene_dir)
    _set_precision(args)
    cfg = _load_config(args)
    if args.k < 1:
        raise UsageError("k must be >= 1")
    scene = load_blender_scene(scene_dir, background=cfg.background)
    out = _out_dir(args, "comparison")
    report = compare_prior(cfg, scene, args.k, out_dir=out, log=print)
    print(f"deep_mean_psnr={report['deep_mean_psnr']} "
          f"direct_mean_psnr={report['direct_mean_psnr']} "
          f"delta_psnr={report.get('delta_psnr')}")
    return 0


def _cmd_viz_features(args) -> int:
    if not os.path.isfile(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    _set_precision(args)
    run = load_run(args.checkpoint)
    planes, _ = run.model.grids()
    out = _out_dir(args, "features")
    for k, plane in enumerate(planes):
        for ch in range(min(args.channels, plane.data.shape[0])):
            path = os.path.join(out, f"plane{k}_ch{ch}.png")
            export_feature_plane(plane.data, ch, path)
            print(f"wrote {path}")
    save_feature_montage(
        {f"plane{k}": p.data for k, p in enumerate(planes)},
        os.path.join(out, "montage.png"), channels=args.channels)
    print(f"wrote {os.path.join(out, 'montage.png')}")
    return 0


def _cmd_make_toy(args) -> int:
    if args.views < 1:
        raise UsageError("--views must be >= 1")
    out = args.out_dir or "toy-scene"
    scene = make_toy_scene(args.views, seed=args.seed or 0,
                           image_size=args.image_size)
    save_blender_scene(scene, out)
    print(f"wrote {args.views} views to {out}")
    return 0


_COMMANDS = {
    "fit": _cmd_fit,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "compare": _cmd_compare,
    "viz-features": _cmd_viz_features,
    "make-toy": _cmd_make_toy,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return err.code if err.code is not None else 0
    try:
        return _COMMANDS[args.command](args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"deepfield {args.command}: error: {err}", file=sys.stderr)
        return 1
    except (TrainingDiverged, NonFiniteGradient, CheckpointError) as err:
        print(f"deepfield {args.command}: {err}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as err:
        print(f"deepfield {args.command}: {err}", file=sys.stderr)
        return 2


def cli(argv=None) -> int:
    """Alias kept for callers that import the entry point by this name."""
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
