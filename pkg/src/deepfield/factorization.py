"""Vector-matrix factorized 3-D feature volumes.

A C-channel feature volume over the box [-h, h]^3 is stored as three
(vector, matrix) factor pairs, one per axis:

    pair 0: vector along x, matrix over (y, z)
    pair 1: vector along y, matrix over (x, z)
    pair 2: vector along z, matrix over (x, y)

    feature[c](p) = sum_k  vec_k[c](p_k) * mat_k[c](p_i, p_j)

The three pair contributions are summed per channel (channels are shared
across pairs, not concatenated). Grids are cell-centered: node i of an R-node
axis sits at normalized coordinate (i + 0.5) / R, and queries outside the
node span clamp to the edge value.

In triplane mode the vectors are frozen all-ones, so only the matrices carry
signal. Factor grids can be leaf parameters (optimized directly) or tensors
produced on-tape by a generator network; `sample_volume` takes whatever is
current.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# (matrix axes) for each vector axis
PAIR_AXES = ((1, 2), (0, 2), (0, 1))

MODES = ("vm", "triplane")

DENSE_LIMIT = 32  # dense reconstruction is an O(R^3) debug/oracle path


def node_centers(resolution: int) -> np.ndarray:
    """Normalized coordinates of the grid nodes along one axis."""
    return (np.arange(resolution) + 0.5) / resolution


def normalize_points(pts: np.ndarray, half_extent: float) -> np.ndarray:
    """World points in [-h, h]^3 -> normalized [0, 1]^3."""
    return (np.asarray(pts) + half_extent) / (2.0 * half_extent)


def sample_volume(planes: list[Tensor], vectors: list[Tensor] | None,
                  pts: np.ndarray, half_extent: float,
                  triplane: bool = False) -> Tensor:
    """Query the factorized volume at N world points -> (N, C) features.

    `vectors` may be None in triplane mode (treated as all-ones).
    """
    u = normalize_points(pts, half_extent)
    feats = None
    for k, (i, j) in enumerate(PAIR_AXES):
        term = ad.bilinear_interp_2d(planes[k], u[:, (i, j)])
        if not triplane:
            term = term * ad.linear_interp_1d(vectors[k], u[:, k])
        feats = term if feats is None else feats + term
    return feats


def dense_reconstruct(planes: list[Tensor | np.ndarray],
                      vectors: list[Tensor | np.ndarray] | None,
                      triplane: bool = False) -> np.ndarray:
    """Expand the factors into the full (C, R, R, R) node tensor.

    Independent of `sample_volume` (explicit outer products); kept for small
    grids only as a verification oracle and debugging aid.
    """
    ps = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in planes]
    c, r, _ = ps[0].shape
    if r > DENSE_LIMIT:
        raise ValueError(f"dense reconstruction capped at R={DENSE_LIMIT}")
    if triplane or vectors is None:
        vs = [np.ones((c, r), dtype=ps[0].dtype)] * 3
    else:
        vs = [v.data if isinstance(v, Tensor) else np.asarray(v)
              for v in vectors]
    out = np.zeros((c, r, r, r), dtype=ps[0].dtype)
    out += vs[0][:, :, None, None] * ps[0][:, None, :, :]   # x | (y,z)
    out += vs[1][:, None, :, None] * ps[1][:, :, None, :]   # y | (x,z)
    out += vs[2][:, None, None, :] * ps[2][:, :, :, None]   # z | (x,y)
    return out


class FactorizedField:
    """Directly-optimized factor grids (the no-generator parametrization)."""

    def __init__(self, planes: list[Tensor], vectors: list[Tensor],
                 half_extent: float, triplane: bool = False):
        self.planes = planes
        self.vectors = vectors
        self.half_extent = float(half_extent)
        self.triplane = bool(triplane)

    @classmethod
    def create(cls, rng: np.random.Generator, resolution: int, channels: int,
               half_extent: float = 1.5, triplane: bool = False,
               init_scale: float = 0.1) -> "FactorizedField":
        dt = ad.default_dtype()
        planes = [ad.parameter(
            init_scale * rng.standard_normal((channels, resolution, resolution)),
            dtype=dt) for _ in range(3)]
        if triplane:
            vectors = [Tensor(np.ones((channels, resolution)), dtype=dt)
                       for _ in range(3)]
        else:
            vectors = [ad.parameter(
                init_scale * rng.standard_normal((channels, resolution)),
                dtype=dt) for _ in range(3)]
        return cls(planes, vectors, half_extent, triplane)

    @property
    def resolution(self) -> int:
        return self.planes[0].shape[1]

    @property
    def channels(self) -> int:
        return self.planes[0].shape[0]

    def parameters(self) -> dict[str, Tensor]:
        out = {f"field.plane{k}": p for k, p in enumerate(self.planes)}
        if not self.triplane:
            out.update({f"field.vector{k}": v
                        for k, v in enumerate(self.vectors)})
        return out

    def sample(self, pts: np.ndarray) -> Tensor:
        return sample_volume(self.planes, self.vectors, pts,
                             self.half_extent, triplane=self.triplane)

    def dense(self) -> np.ndarray:
        return dense_reconstruct(self.planes, self.vectors,
                                 triplane=self.triplane)
