"""Image quality metrics: PSNR and SSIM on [0,1] float buffers.

Both metrics operate on numpy arrays shaped (H, W) or (H, W, C) with values
in [0, 1]; color images are scored per channel and averaged.  Computation is
done in float64 regardless of input dtype — these run on eval outputs, never
inside the training loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["MetricReport", "psnr", "ssim"]

#: PSNR reported for (near-)identical images instead of +inf.
PSNR_CAP = 99.0

#: Squared-error floor under which images count as identical.
MSE_FLOOR = 1e-10

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_DYNAMIC_RANGE = 1.0


@dataclass(frozen=True)
class MetricReport:
    """Per-image (or aggregated) quality scores."""

    psnr: float
    ssim: float

    def as_dict(self) -> dict[str, float]:
        return {"psnr": self.psnr, "ssim": self.ssim}


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range.

    -10*log10(mean squared error); returns the 99 dB cap when the MSE
    drops below 1e-10 (identical images would otherwise be +inf).
    """
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return float(-10.0 * np.log10(mse))


def _gaussian_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable Gaussian-weighted window sums over all fully valid windows."""
    rows = sliding_window_view(img, len(taps), axis=0) @ taps
    return sliding_window_view(rows, len(taps), axis=1) @ taps


def _ssim_channel(a: np.ndarray, b: np.ndarray, taps: np.ndarray,
                  c1: float, c2: float) -> float:
    mu_a = _filter_valid(a, taps)
    mu_b = _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a * mu_a
    var_b = _filter_valid(b * b, taps) - mu_b * mu_b
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Windows are 'valid' only — the score averages the SSIM map over
    positions where the window fits entirely inside the image.  Color
    images are scored per channel and averaged.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    elif a.ndim != 3:
        raise ValueError(f"expected (H,W) or (H,W,C) images, got {a.shape}")
    h, w = a.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(
            f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    taps = _gaussian_taps()
    c1 = (SSIM_K1 * SSIM_DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_DYNAMIC_RANGE) ** 2
    scores = [_ssim_channel(a[..., c], b[..., c], taps, c1, c2)
              for c in range(a.shape[2])]
    return float(np.mean(scores))
