"""Per-scene optimization loop, evaluation, and the prior comparison.

The trainer owns the experiment surface: seeded ray batching over every
training pixel, cosine-decayed AdamW steps, periodic occupancy refreshes,
checkpoints that capture enough state to resume bit-exactly in 64-bit
mode, and report writers (CSV + key=value text + JSON + figures) for the
fit / eval / compare paths.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import viz
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .metrics import psnr as psnr_metric
from .metrics import ssim as ssim_metric
from .model import MODES, SceneModel
from .optim import AdamW, NonFiniteGradient, cosine_lr
from .render import (OccupancyGrid, generate_rays, loss_to_psnr,
                     render_image, render_loss, render_rays)
from .scene import Scene, select_views_kmeans, write_image

__all__ = ["TrainConfig", "RunState", "TrainingDiverged", "train",
           "save_run", "load_run", "evaluate", "compare_prior"]

CHECKPOINT_NAME = "checkpoint.zip"
BEST_CHECKPOINT_NAME = "checkpoint_best.zip"


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite; carries the diagnostic triple."""

    def __init__(self, iteration: int, lr: float, max_grad: float):
        self.iteration = iteration
        self.lr = lr
        self.max_grad = max_grad
        super().__init__(
            f"training diverged at iteration {iteration}: "
            f"lr={lr:.6g}, max |grad|={max_grad:.6g}")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_background(s) -> tuple[float, float, float]:
    if isinstance(s, (list, tuple)):
        vals = [float(v) for v in s]
    else:
        vals = [float(v) for v in str(s).split(",")]
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3:
        raise ValueError("background needs 1 or 3 components")
    return tuple(vals)


def _parse_optional_int(s) -> int | None:
    if s is None or (isinstance(s, str) and s.strip().lower() in ("", "none")):
        return None
    return int(s)


@dataclass
class TrainConfig:
    """All knobs of one run, grouped into the config-file sections."""

    # [train]
    iterations: int = 2000
    rays_per_batch: int = 4096
    lr_start: float = 2e-3
    lr_end: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.2
    occupancy: bool = True
    occupancy_interval: int = 500
    log_interval: int = 100
    val_view: int | None = None
    # [field]
    mode: str = "deep-vm"
    grid_resolution: int = 64
    channels: int = 16
    half_extent: float = 1.5
    decoder_hidden: int = 64
    # [render]
    samples_per_ray: int = 128
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # [generator]
    base_width: int = 32
    noise_channels: int = 8
    zero_noise: bool = False
    # [seeds]
    param_seed: int = 0
    noise_seed: int = 0
    data_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.background = _parse_background(self.background)
        for name in ("iterations", "rays_per_batch", "samples_per_ray",
                     "grid_resolution", "channels", "occupancy_interval",
                     "log_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        """Nested section form (the config-file layout)."""
        out: dict[str, dict] = {}
        for section, fields in _SECTIONS.items():
            out[section] = {}
            for key, (attr, _) in fields.items():
                val = getattr(self, attr)
                if isinstance(val, tuple):
                    val = list(val)
                out[section][key] = val
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        kwargs = {}
        for section, content in data.items():
            fields = _SECTIONS.get(section)
            if fields is None:
                raise ValueError(f"unknown config section [{section}]")
            if not isinstance(content, dict):
                raise ValueError(f"config section [{section}] must be a table")
            for key, value in content.items():
                if key not in fields:
                    raise ValueError(
                        f"unknown config key {section}.{key}")
                attr, conv = fields[key]
                kwargs[attr] = conv(value)
        return cls(**kwargs)

    def with_set(self, key: str, value: str) -> "TrainConfig":
        """Return a copy with one `section.key=value` override applied."""
        section, _, name = key.partition(".")
        fields = _SECTIONS.get(section)
        if fields is None or name not in fields:
            raise ValueError(f"unknown config key {key!r}")
        attr, conv = fields[name]
        return dataclasses.replace(self, **{attr: conv(value)})


def _conv_background(v):
    return _parse_background(v)


def _conv_bool(v):
    return v if isinstance(v, bool) else _parse_bool(str(v))


def _conv_opt_int(v):
    return _parse_optional_int(v)


#: section -> key -> (dataclass attribute, converter from config/CLI value)
_SECTIONS: dict[str, dict[str, tuple]] = {
    "train": {
        "iterations": ("iterations", int),
        "rays_per_batch": ("rays_per_batch", int),
        "lr_start": ("lr_start", float),
        "lr_end": ("lr_end", float),
        "beta1": ("beta1", float),
        "beta2": ("beta2", float),
        "weight_decay": ("weight_decay", float),
        "occupancy": ("occupancy", _conv_bool),
        "occupancy_interval": ("occupancy_interval", int),
        "log_interval": ("log_interval", int),
        "val_view": ("val_view", _conv_opt_int),
    },
    "field": {
        "mode": ("mode", str),
        "grid_resolution": ("grid_resolution", int),
        "channels": ("channels", int),
        "half_extent": ("half_extent", float),
        "decoder_hidden": ("decoder_hidden", int),
    },
    "render": {
        "samples_per_ray": ("samples_per_ray", int),
        "background": ("background", _conv_background),
    },
    "generator": {
        "base_width": ("base_width", int),
        "noise_channels": ("noise_channels", int),
        "zero_noise": ("zero_noise", _conv_bool),
    },
    "seeds": {
        "params": ("param_seed", int),
        "noise": ("noise_seed", int),
        "data": ("data_seed", int),
    },
}


# --------------------------------------------------------------------------
# run state
# --------------------------------------------------------------------------

@dataclass
class RunState:
    """Everything needed to continue, evaluate, or checkpoint a run."""

    config: TrainConfig
    model: SceneModel
    optimizer: AdamW
    data_rng: np.random.Generator
    occupancy: OccupancyGrid | None = None
    iteration: int = 0
    history: list[dict] = field(default_factory=list)
    mean_delta: float = 0.0


def _build_model(config: TrainConfig) -> SceneModel:
    from .generators import GeneratorConfig
    kwargs: dict = {}
    if config.mode.startswith("deep-"):
        kwargs["generator_config"] = GeneratorConfig.for_grid(
            config.grid_resolution, base_width=config.base_width,
            out_channels=config.channels,
            noise_channels=config.noise_channels)
    return SceneModel(
        config.mode, config.grid_resolution, channels=config.channels,
        half_extent=config.half_extent, decoder_hidden=config.decoder_hidden,
        param_seed=config.param_seed, noise_seed=config.noise_seed,
        zero_noise=config.zero_noise, **kwargs)


def new_run(config: TrainConfig) -> RunState:
    model = _build_model(config)
    optimizer = AdamW(model.parameters(), beta1=config.beta1,
                      beta2=config.beta2, weight_decay=config.weight_decay)
    occ = OccupancyGrid(config.grid_resolution, config.half_extent) \
        if config.occupancy else None
    rng = np.random.Generator(np.random.PCG64(config.data_seed))
    mean_delta = 2.0 * config.half_extent / config.samples_per_ray
    return RunState(config, model, optimizer, rng, occ,
                    mean_delta=mean_delta)


# --------------------------------------------------------------------------
# checkpointing
# --------------------------------------------------------------------------

def _precision_name() -> str:
    return "f64" if np.dtype(ad.default_dtype()) == np.float64 else "f32"


def save_run(run: RunState, path: str) -> None:
    """Atomic checkpoint: params, optimizer state, noise, RNG, progress."""
    tensors: dict[str, np.ndarray] = {
        name: p.data for name, p in run.model.parameters().items()}
    tensors.update(run.optimizer.state_tensors())
    tensors.update(run.model.noise_values())
    if run.occupancy is not None:
        tensors["occ.mask"] = run.occupancy.mask.astype(np.uint8)
    meta = {
        "step": run.iteration,
        "opt_t": run.optimizer.t,
        "precision": _precision_name(),
        "mean_delta": run.mean_delta,
        "config": run.config.to_dict(),
        "rng_state": run.data_rng.bit_generator.state,
        "history": [row for row in run.history
                    if row["iter"] % run.config.log_interval == 0],
        "noise_digest": run.model.noise_digests(),
    }
    tmp = path + ".tmp"
    save_checkpoint(tmp, tensors, meta)
    os.replace(tmp, path)


def load_run(path: str) -> RunState:
    """Rebuild a RunState from a checkpoint (sets the saved precision)."""
    tensors, meta = load_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    ad.set_default_dtype(
        np.float64 if meta.get("precision", "f64") == "f64" else np.float32)
    run = new_run(config)
    params = run.model.parameters()
    for name, p in params.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        arr = tensors[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {arr.shape}, "
                f"expected {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
    run.optimizer.load_state_tensors(tensors, meta["opt_t"])
    for name, digest in meta.get("noise_digest", {}).items():
        got = run.model.noise_digests().get(name)
        if got != digest:
            raise CheckpointError(
                f"noise buffer {name!r} does not match checkpoint "
                f"(seeded reconstruction drifted)")
    if run.occupancy is not None and "occ.mask" in tensors:
        run.occupancy.mask = tensors["occ.mask"].astype(bool)
    run.data_rng.bit_generator.state = meta["rng_state"]
    run.iteration = int(meta["step"])
    run.history = list(meta.get("history", []))
    run.mean_delta = float(meta.get("mean_delta", run.mean_delta))
    return run


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def _flatten_rays(scene: Scene):
    """All training rays and targets, concatenated over views."""
    origins, dirs, targets = [], [], []
    for cam, img in zip(scene.cameras, scene.images):
        o, d = generate_rays(cam)
        origins.append(o)
        dirs.append(d)
        targets.append(np.asarray(img, dtype=np.float64).reshape(-1, 3))
    return (np.concatenate(origins), np.concatenate(dirs),
            np.concatenate(targets))


def _max_abs_grad(params: dict) -> float:
    worst = 0.0
    for p in params.values():
        if p.grad is not None:
            m = float(np.abs(p.grad).max())
            if math.isnan(m):
                return float("nan")
            worst = max(worst, m)
    return worst


def train(config: TrainConfig, scene: Scene, *, out_dir: str | None = None,
          resume: str | None = None, stop_after: int | None = None,
          log=print) -> RunState:
    """Optimize the model on `scene`; returns the final run state.

    When `out_dir` is given, writes checkpoint.zip plus the fit report
    (history.csv, summary.txt, summary.json, training_curve.png,
    feature_planes.png). `resume` continues from an earlier checkpoint
    (the checkpoint's config wins, so the schedule stays consistent);
    `stop_after` pauses the run at that iteration without shortening the
    schedule, for split-run checkpointing.
    """
    if log is None:
        def log(_msg):
            pass
    run = load_run(resume) if resume else new_run(config)
    if resume:
        config = run.config
    origins, dirs, targets = _flatten_rays(scene)
    n_pixels = origins.shape[0]
    background = np.asarray(config.background, dtype=np.float64)
    params = run.model.parameters()
    t_start = time.monotonic()
    best_val = -math.inf
    stop = config.iterations if stop_after is None \
        else min(stop_after, config.iterations)

    for it in range(run.iteration, stop):
        lr = cosine_lr(it, config.iterations, config.lr_start, config.lr_end)
        idx = run.data_rng.integers(0, n_pixels, size=config.rays_per_batch)
        run.optimizer.zero_grad()
        with ad.Tape() as tape:
            sample = run.model.sampler()  # regenerates grids (deep modes)
            pix, aux = render_rays(
                origins[idx], dirs[idx], sample, run.model.decoder,
                config.half_extent, config.samples_per_ray, background,
                occupancy=run.occupancy)
            loss = render_loss(pix, targets[idx])
            loss_v = float(loss.data)
            tape.backward(loss)
        if not math.isfinite(loss_v):
            raise TrainingDiverged(it, lr, _max_abs_grad(params))
        try:
            run.optimizer.step(lr)
        except NonFiniteGradient:
            raise TrainingDiverged(it, lr, _max_abs_grad(params)) from None
        run.iteration = it + 1
        if aux["delta"] is not None:
            run.mean_delta = float(aux["delta"].mean())
        row = {"iter": run.iteration, "lr": lr, "loss": loss_v,
               "train_psnr": loss_to_psnr(loss_v)}
        run.history.append(row)
        if run.iteration % config.log_interval == 0:
            log(f"iter={row['iter']} lr={row['lr']:.6g} "
                f"loss={row['loss']:.6g} train_psnr={row['train_psnr']:.4f}")
            if config.val_view is not None and out_dir is not None:
                val = _val_psnr(run, scene, config.val_view)
                if val > best_val:
                    best_val = val
                    save_run(run, os.path.join(out_dir, BEST_CHECKPOINT_NAME))
        if run.occupancy is not None and \
                run.iteration % config.occupancy_interval == 0:
            run.occupancy.update(run.model.density_fn(), run.mean_delta)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_run(run, os.path.join(out_dir, CHECKPOINT_NAME))
        _write_fit_report(run, out_dir, time.monotonic() - t_start)
    return run


def _val_psnr(run: RunState, scene: Scene, view: int) -> float:
    cfg = run.config
    img = render_image(scene.cameras[view], run.model.sampler(),
                       run.model.decoder, cfg.half_extent,
                       cfg.samples_per_ray,
                       np.asarray(cfg.background, dtype=np.float64),
                       occupancy=run.occupancy)
    return psnr_metric(img, scene.images[view])


def _write_kv(path: str, pairs: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in pairs.items():
            fh.write(f"{key}={value}\n")


def _write_fit_report(run: RunState, out_dir: str, wall_s: float) -> None:
    logged = [row for row in run.history
              if row["iter"] % run.config.log_interval == 0]
    with open(os.path.join(out_dir, "history.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["iter", "lr", "loss", "train_psnr"])
        writer.writeheader()
        writer.writerows(logged)
    final = run.history[-1] if run.history else {}
    summary = {
        "mode": run.config.mode,
        "iterations": run.iteration,
        "final_loss": final.get("loss"),
        "final_train_psnr": final.get("train_psnr"),
        "wall_time_s": round(wall_s, 3),
        "occupied_fraction": (run.occupancy.occupied_fraction()
                              if run.occupancy else None),
    }
    _write_kv(os.path.join(out_dir, "summary.txt"), summary)
    with open(os.path.join(out_dir, "summary.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"summary": summary, "config": run.config.to_dict()},
                  fh, indent=2)
        fh.write("\n")
    if logged:
        viz.save_training_curve(
            logged, os.path.join(out_dir, "training_curve.png"))
    planes, _ = run.model.grids()
    viz.save_feature_montage(
        {f"plane{k}": p.data for k, p in enumerate(planes)},
        os.path.join(out_dir, "feature_planes.png"))


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def evaluate(run: RunState, scene: Scene, views=None,
             out_dir: str | None = None, log=print) -> dict:
    """Render the listed views, score PSNR/SSIM, optionally write reports.

    `views` are indices into `scene` (default: all). An empty view list
    yields an empty report without error.
    """
    if log is None:
        def log(_msg):
            pass
    if views is None:
        views = list(range(len(scene)))
    views = list(views)
    cfg = run.config
    background = np.asarray(cfg.background, dtype=np.float64)
    grids = run.model.grids()
    sample = run.model.sampler(grids)
    rows = []
    renders = {}
    for i in views:
        img = render_image(scene.cameras[i], sample, run.model.decoder,
                           cfg.half_extent, cfg.samples_per_ray, background,
                           occupancy=run.occupancy)
        rows.append({"view": int(i),
                     "psnr": psnr_metric(img, scene.images[i]),
                     "ssim": ssim_metric(img, scene.images[i])})
        renders[int(i)] = img
        log(f"view={i} psnr={rows[-1]['psnr']:.4f} "
            f"ssim={rows[-1]['ssim']:.6f}")
    report: dict = {"views": rows}
    if rows:
        report["mean_psnr"] = float(np.mean([r["psnr"] for r in rows]))
        report["mean_ssim"] = float(np.mean([r["ssim"] for r in rows]))
    else:
        report["mean_psnr"] = None
        report["mean_ssim"] = None
    if out_dir is not None:
        _write_eval_report(report, renders, out_dir)
    return report


def _write_eval_report(report: dict, renders: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    render_dir = os.path.join(out_dir, "renders")
    os.makedirs(render_dir, exist_ok=True)
    for i, img in renders.items():
        write_image(os.path.join(render_dir, f"view_{i:03d}.png"), img)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["view", "psnr", "ssim"])
        writer.writeheader()
        writer.writerows(report["views"])
    pairs = {}
    for row in report["views"]:
        pairs[f"view{row['view']}_psnr"] = row["psnr"]
        pairs[f"view{row['view']}_ssim"] = row["ssim"]
    pairs["mean_psnr"] = report["mean_psnr"]
    pairs["mean_ssim"] = report["mean_ssim"]
    _write_kv(os.path.join(out_dir, "metrics.txt"), pairs)
    with open(os.path.join(out_dir, "metrics.json"), "w",
              encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    if report["views"]:
        viz.save_view_bars(
            [r["view"] for r in report["views"]],
            [r["psnr"] for r in report["views"]],
            os.path.join(out_dir, "view_metrics.png"),
            ssims=[r["ssim"] for r in report["views"]])


# --------------------------------------------------------------------------
# prior-vs-baseline comparison
# --------------------------------------------------------------------------

def compare_prior(config: TrainConfig, scene: Scene, k: int, *,
                  out_dir: str | None = None, log=print) -> dict:
    """Train matched deep-prior and direct runs on k selected views.

    Views are chosen by k-means over camera positions; both runs see the
    identical view set, seeds, and render settings, and are scored on the
    held-out remainder. The report pairs per-view scores and their
    difference (deep minus direct).
    """
    if log is None:
        def log(_msg):
            pass
    if len(scene) < k + 4:
        raise ValueError(
            f"comparison needs at least k+4={k + 4} views, scene has "
            f"{len(scene)}")
    suffix = config.mode.split("-", 1)[1]
    train_views = select_views_kmeans(
        scene.camera_positions(), k, seed=config.data_seed)
    held_out = [i for i in range(len(scene)) if i not in set(train_views)]
    train_scene = scene.subset(train_views)

    results = {}
    for label, mode in (("deep", f"deep-{suffix}"),
                        ("direct", f"direct-{suffix}")):
        cfg = dataclasses.replace(config, mode=mode)
        log(f"[{label}] training mode={mode} on views {train_views}")
        sub_dir = os.path.join(out_dir, label) if out_dir else None
        run = train(cfg, train_scene, out_dir=sub_dir, log=log)
        results[label] = evaluate(
            run, scene, held_out,
            out_dir=os.path.join(sub_dir, "eval") if sub_dir else None,
            log=log)

    paired = []
    for drow, brow in zip(results["deep"]["views"],
                          results["direct"]["views"]):
        paired.append({
            "view": drow["view"],
            "deep_psnr": drow["psnr"], "direct_psnr": brow["psnr"],
            "deep_ssim": drow["ssim"], "direct_ssim": brow["ssim"],
            "delta_psnr": drow["psnr"] - brow["psnr"],
        })
    report = {
        "k": k,
        "train_views": train_views,
        "held_out_views": held_out,
        "views": paired,
        "deep_mean_psnr": results["deep"]["mean_psnr"],
        "direct_mean_psnr": results["direct"]["mean_psnr"],
        "deep_mean_ssim": results["deep"]["mean_ssim"],
        "direct_mean_ssim": results["direct"]["mean_ssim"],
    }
    if paired:
        report["delta_psnr"] = (report["deep_mean_psnr"]
                                - report["direct_mean_psnr"])
        report["delta_ssim"] = (report["deep_mean_ssim"]
                                - report["direct_mean_ssim"])
    if out_dir is not None:
        _write_compare_report(report, out_dir)
    log(f"delta_psnr={report.get('delta_psnr')}")
    return report


def _write_compare_report(report: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    fields = ["view", "deep_psnr", "direct_psnr", "deep_ssim",
              "direct_ssim", "delta_psnr"]
    with open(os.path.join(out_dir, "comparison.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(report["views"])
    pairs = {
        "k": report["k"],
        "train_views": ",".join(str(v) for v in report["train_views"]),
        "deep_mean_psnr": report["deep_mean_psnr"],
        "direct_mean_psnr": report["direct_mean_psnr"],
        "deep_mean_ssim": report["deep_mean_ssim"],
        "direct_mean_ssim": report["direct_mean_ssim"],
        "delta_psnr": report.get("delta_psnr"),
        "delta_ssim": report.get("delta_ssim"),
    }
    _write_kv(os.path.join(out_dir, "comparison.txt"), pairs)
    with open(os.path.join(out_dir, "comparison.json"), "w",
              encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    if report["views"]:
        viz.save_comparison_chart(
            [r["view"] for r in report["views"]],
            [r["deep_psnr"] for r in report["views"]],
            [r["direct_psnr"] for r in report["views"]],
            os.path.join(out_dir, "comparison.png"))
