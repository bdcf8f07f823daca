"""Feature-to-radiance decoding.

Density and color share one linear trunk over the sampled features:

    sigma(p)    = exp( W_sigma . silu(trunk) + b_sigma )
    c(p, d)     = sigmoid( W_color . silu(trunk + W_dir . sh(d)) )
    trunk       = W_base . F(p) + b_base

The trunk is computed once per point batch and reused by both heads. View
direction enters only through a real spherical-harmonics encoding (degree 4,
16 coefficients); positions are never encoded, the feature volume carries all
spatial information. The density bias starts at -1 so fresh models begin
mostly transparent.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# real SH constants, bands 0..3
C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = [1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396]
C3 = [-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435]

SH_DEGREE = 4
SH_DIM = SH_DEGREE * SH_DEGREE  # 16


def sh_encode(dirs: np.ndarray) -> np.ndarray:
    """Evaluate the degree-4 real SH basis at unit directions (N,3) -> (N,16).

    Plain numpy; directions are constants with respect to the tape.
    """
    dirs = np.asarray(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (SH_DIM,), dtype=dirs.dtype)
    out[..., 0] = C0
    out[..., 1] = -C1 * y
    out[..., 2] = C1 * z
    out[..., 3] = -C1 * x
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out[..., 4] = C2[0] * xy
    out[..., 5] = C2[1] * yz
    out[..., 6] = C2[2] * (2.0 * zz - xx - yy)
    out[..., 7] = C2[3] * xz
    out[..., 8] = C2[4] * (xx - yy)
    out[..., 9] = C3[0] * y * (3.0 * xx - yy)
    out[..., 10] = C3[1] * xy * z
    out[..., 11] = C3[2] * y * (4.0 * zz - xx - yy)
    out[..., 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[..., 13] = C3[4] * x * (4.0 * zz - xx - yy)
    out[..., 14] = C3[5] * z * (xx - yy)
    out[..., 15] = C3[6] * x * (xx - 3.0 * yy)
    return out


def _he_uniform(rng: np.random.Generator, fan_in: int, shape, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class RadianceDecoder:
    """Four small linear maps; see module docstring for the wiring."""

    def __init__(self, rng: np.random.Generator, channels: int = 16,
                 hidden: int = 64):
        self.channels = channels
        self.hidden = hidden
        dt = ad.default_dtype()
        self.w_base = ad.parameter(_he_uniform(rng, channels, (channels, hidden), dt))
        self.b_base = ad.parameter(np.zeros(hidden, dtype=dt))
        self.w_sigma = ad.parameter(_he_uniform(rng, hidden, (hidden, 1), dt))
        self.b_sigma = ad.parameter(np.full(1, -1.0, dtype=dt))
        self.w_dir = ad.parameter(_he_uniform(rng, SH_DIM, (SH_DIM, hidden), dt))
        self.w_color = ad.parameter(_he_uniform(rng, hidden, (hidden, 3), dt))
        self.b_color = ad.parameter(np.zeros(3, dtype=dt))

    def parameters(self) -> dict[str, Tensor]:
        return {"decoder.w_base": self.w_base, "decoder.b_base": self.b_base,
                "decoder.w_sigma": self.w_sigma, "decoder.b_sigma": self.b_sigma,
                "decoder.w_dir": self.w_dir, "decoder.w_color": self.w_color,
                "decoder.b_color": self.b_color}

    def trunk(self, feats: Tensor) -> Tensor:
        return ad.matmul(feats, self.w_base) + self.b_base

    def density_from_trunk(self, trunk: Tensor) -> Tensor:
        pre = ad.matmul(ad.silu(trunk), self.w_sigma) + self.b_sigma
        return ad.exp(ad.reshape(pre, (pre.shape[0],)))

    def color_from_trunk(self, trunk: Tensor, sh: np.ndarray) -> Tensor:
        h = trunk + ad.matmul(ad.Tensor(sh, dtype=trunk.dtype), self.w_dir)
        return ad.sigmoid(ad.matmul(ad.silu(h), self.w_color) + self.b_color)

    def decode(self, feats: Tensor, sh: np.ndarray,
               color_idx: np.ndarray | None = None):
        """-> (sigma (N,), rgb (N,3)), sharing one trunk evaluation.

        When `color_idx` is given, color is decoded only for those rows
        (occlusion culling); other rows get zero color. Their compositing
        weight is below the termination threshold by construction.
        """
        t = self.trunk(feats)
        sigma = self.density_from_trunk(t)
        if color_idx is None:
            rgb = self.color_from_trunk(t, sh)
        else:
            sub = self.color_from_trunk(
                ad.index_gather(t, color_idx), sh[color_idx])
            rgb = ad.index_scatter(sub, color_idx, t.shape[0])
        return sigma, rgb
