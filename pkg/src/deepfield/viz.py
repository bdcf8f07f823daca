"""Feature-plane exports and report figures.

`export_feature_plane` writes one channel of a factor plane as a min-max
normalized 8-bit grayscale PNG — the visual check that deep-parametrized
planes come out clean while directly optimized ones fill with speckle.
The save_* helpers render the report figures (training curve, per-view
bars, paired comparison) that accompany the delimited outputs.
"""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .scene import write_image  # noqa: E402

__all__ = [
    "normalize_plane",
    "export_feature_plane",
    "save_feature_montage",
    "save_training_curve",
    "save_view_bars",
    "save_comparison_chart",
]


def _channel_image(plane, channel: int) -> np.ndarray:
    data = np.asarray(getattr(plane, "data", plane), dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3:
        raise ValueError(f"expected a (C,H,W) factor plane, got {data.shape}")
    if not 0 <= channel < data.shape[0]:
        raise ValueError(f"channel {channel} out of range "
                         f"for {data.shape[0]} channels")
    return data[channel]


def normalize_plane(img: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0,1]; a constant plane maps to flat 0.5."""
    lo = float(img.min())
    hi = float(img.max())
    if hi - lo < 1e-12:
        return np.full_like(img, 0.5)
    return (img - lo) / (hi - lo)


def export_feature_plane(plane, channel: int, path: str) -> np.ndarray:
    """Write one factor-plane channel as 8-bit grayscale; returns the floats.

    The returned array is the pre-quantization normalized image, so
    ``out*(max-min)+min`` reconstructs the input exactly; the PNG matches
    within 8-bit quantization.
    """
    img = normalize_plane(_channel_image(plane, channel))
    write_image(path, img)
    return img


def save_feature_montage(planes: dict, path: str, channels: int = 4) -> str:
    """Grid of normalized plane channels: one row per factor, one col/channel."""
    names = list(planes)
    rows = len(names)
    fig, axes = plt.subplots(rows, channels,
                             figsize=(2.2 * channels, 2.2 * rows),
                             squeeze=False)
    for r, name in enumerate(names):
        data = np.asarray(getattr(planes[name], "data", planes[name]),
                          dtype=np.float64)
        for c in range(channels):
            ax = axes[r][c]
            ax.set_axis_off()
            if c < data.shape[0]:
                ax.imshow(normalize_plane(data[c]), cmap="gray",
                          vmin=0.0, vmax=1.0, interpolation="nearest")
            if c == 0:
                ax.set_title(name, fontsize=8, loc="left")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_training_curve(history: list[dict], path: str) -> str:
    """Loss (log scale) and train PSNR against iteration."""
    iters = [row["iter"] for row in history]
    loss = [row["loss"] for row in history]
    psnr = [row["train_psnr"] for row in history]
    fig, ax1 = plt.subplots(figsize=(6.4, 3.6))
    ax1.semilogy(iters, loss, color="tab:red", label="loss")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss", color="tab:red")
    ax2 = ax1.twinx()
    ax2.plot(iters, psnr, color="tab:blue", label="train PSNR")
    ax2.set_ylabel("train PSNR (dB)", color="tab:blue")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_view_bars(labels: list, psnrs: list[float], path: str,
                   ssims: list[float] | None = None) -> str:
    """Per-view PSNR bars (plus an SSIM axis when provided)."""
    x = np.arange(len(labels))
    fig, ax1 = plt.subplots(figsize=(max(4.0, 0.6 * len(labels) + 2), 3.6))
    ax1.bar(x, psnrs, color="tab:blue", width=0.6)
    ax1.set_xticks(x, [str(l) for l in labels])
    ax1.set_xlabel("view")
    ax1.set_ylabel("PSNR (dB)", color="tab:blue")
    if ssims is not None:
        ax2 = ax1.twinx()
        ax2.plot(x, ssims, color="tab:orange", marker="o", linestyle="")
        ax2.set_ylabel("SSIM", color="tab:orange")
        ax2.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_comparison_chart(labels: list, deep_psnrs: list[float],
                          direct_psnrs: list[float], path: str,
                          deep_name: str = "deep prior",
                          direct_name: str = "direct") -> str:
    """Paired held-out PSNR bars for matched runs, annotated with the delta."""
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(labels) + 2), 3.8))
    ax.bar(x - 0.18, deep_psnrs, width=0.36, label=deep_name,
           color="tab:green")
    ax.bar(x + 0.18, direct_psnrs, width=0.36, label=direct_name,
           color="tab:gray")
    for xi, (d, g) in enumerate(zip(deep_psnrs, direct_psnrs)):
        ax.annotate(f"{d - g:+.2f}", (xi, max(d, g)),
                    ha="center", va="bottom", fontsize=8)
    ax.set_xticks(x, [str(l) for l in labels])
    ax.set_ylabel("held-out PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
