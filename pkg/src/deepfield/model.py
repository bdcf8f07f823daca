"""Scene model: factor grids (direct or generator-produced) plus decoder.

Four modes select how the factor grids come to exist:

* ``deep-vm`` / ``deep-triplane`` — grids are *activations*: six (or three,
  for triplane) untrained convolutional generators map frozen noise buffers
  to the planes and vectors anew every step, and the optimizer owns only
  generator and decoder weights.
* ``direct-vm`` / ``direct-triplane`` — grids are raw trainable tensors
  (the no-prior baseline).

The model guarantees mode isolation: deep modes expose no raw grid tensors
and no noise to the optimizer; direct modes expose no generator weights.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .decoder import RadianceDecoder
from .factorization import FactorizedField, sample_volume
from .generators import Generator, GeneratorConfig, NoiseBuffer

__all__ = ["MODES", "SceneModel"]

MODES = ("deep-vm", "deep-triplane", "direct-vm", "direct-triplane")


class SceneModel:
    """Everything the trainer optimizes for one scene."""

    def __init__(self, mode: str, grid_resolution: int, *,
                 channels: int = 16, half_extent: float = 1.5,
                 decoder_hidden: int = 64, param_seed: int = 0,
                 noise_seed: int = 0, generator_base_width: int = 32,
                 generator_config: GeneratorConfig | None = None,
                 zero_noise: bool = False):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.grid_resolution = int(grid_resolution)
        self.channels = int(channels)
        self.half_extent = float(half_extent)
        self.zero_noise = bool(zero_noise)

        rng = np.random.Generator(np.random.PCG64(param_seed))
        self.decoder = RadianceDecoder(rng, channels, decoder_hidden)

        self.field: FactorizedField | None = None
        self.plane_generators: list[Generator] = []
        self.vector_generators: list[Generator] = []
        self.plane_noise: list[NoiseBuffer] = []
        self.vector_noise: list[NoiseBuffer] = []

        if self.is_deep:
            cfg = generator_config or GeneratorConfig.for_grid(
                grid_resolution, base_width=generator_base_width,
                out_channels=channels)
            if cfg.output_resolution != grid_resolution:
                raise ValueError(
                    f"generator output {cfg.output_resolution} does not "
                    f"match grid resolution {grid_resolution}")
            if cfg.out_channels != channels:
                raise ValueError(
                    f"generator emits {cfg.out_channels} channels, "
                    f"field expects {channels}")
            self.generator_config = cfg
            for k in range(3):
                self.plane_generators.append(Generator(rng, cfg, 2))
                self.plane_noise.append(NoiseBuffer(
                    noise_seed * 6 + k, cfg.noise_channels,
                    cfg.noise_resolution, 2))
            if not self.is_triplane:
                for k in range(3):
                    self.vector_generators.append(Generator(rng, cfg, 1))
                    self.vector_noise.append(NoiseBuffer(
                        noise_seed * 6 + 3 + k, cfg.noise_channels,
                        cfg.noise_resolution, 1))
        else:
            self.generator_config = None
            self.field = FactorizedField.create(
                rng, grid_resolution, channels, half_extent,
                triplane=self.is_triplane)

    # ------------------------------------------------------------- modes

    @property
    def is_deep(self) -> bool:
        return self.mode.startswith("deep-")

    @property
    def is_triplane(self) -> bool:
        return self.mode.endswith("-triplane")

    # -------------------------------------------------------- parameters

    def parameters(self) -> dict[str, ad.Tensor]:
        """Optimizer-owned tensors; naming is stable for checkpoints."""
        params = dict(self.decoder.parameters())
        if self.is_deep:
            for k, gen in enumerate(self.plane_generators):
                for name, p in gen.parameters().items():
                    params[f"gen.plane{k}.{name}"] = p
            for k, gen in enumerate(self.vector_generators):
                for name, p in gen.parameters().items():
                    params[f"gen.vector{k}.{name}"] = p
        else:
            params.update(self.field.parameters())
        return params

    def noise_values(self) -> dict[str, np.ndarray]:
        """Frozen noise buffers (float64 masters) keyed for checkpoints."""
        out = {}
        for k, nb in enumerate(self.plane_noise):
            out[f"noise.plane{k}"] = nb.values
        for k, nb in enumerate(self.vector_noise):
            out[f"noise.vector{k}"] = nb.values
        return out

    def noise_digests(self) -> dict[str, str]:
        return {f"noise.plane{k}": nb.digest()
                for k, nb in enumerate(self.plane_noise)} | \
               {f"noise.vector{k}": nb.digest()
                for k, nb in enumerate(self.vector_noise)}

    # ------------------------------------------------------------- grids

    def _noise_tensor(self, nb: NoiseBuffer) -> ad.Tensor:
        if self.zero_noise:
            return ad.Tensor(np.zeros(nb.shape, dtype=ad.default_dtype()))
        return nb.tensor()

    def grids(self) -> tuple[list[ad.Tensor], list[ad.Tensor] | None]:
        """Current factor grids.

        In deep modes this *runs the generators* — by design it happens
        every training step, so the prior acts throughout optimization.
        """
        if not self.is_deep:
            return self.field.planes, (None if self.is_triplane
                                       else self.field.vectors)
        planes = [gen(self._noise_tensor(nb))
                  for gen, nb in zip(self.plane_generators, self.plane_noise)]
        if self.is_triplane:
            return planes, None
        vectors = [gen(self._noise_tensor(nb))
                   for gen, nb in zip(self.vector_generators,
                                      self.vector_noise)]
        return planes, vectors

    # ----------------------------------------------------------- sampling

    def sampler(self, grids=None):
        """sample_fn(pts) -> (N, C) features over the given grids.

        Pass the result of `grids()` to reuse one generator evaluation
        across every render chunk of a step (or of a full-frame render).
        """
        planes, vectors = self.grids() if grids is None else grids
        return lambda pts: sample_volume(planes, vectors, pts,
                                         self.half_extent,
                                         triplane=self.is_triplane)

    def density_fn(self, grids=None):
        """Numpy-in/numpy-out density query for occupancy updates."""
        sample = self.sampler(grids)

        def fn(pts: np.ndarray) -> np.ndarray:
            with ad.no_grad():
                feats = sample(pts.astype(ad.default_dtype(), copy=False))
                sigma = self.decoder.density_from_trunk(
                    self.decoder.trunk(feats))
            return sigma.data

        return fn
