"""Untrained convolutional generators that map frozen noise to factor grids.

Instead of optimizing factor planes and vectors directly, each grid can be
produced by a small convolutional network fed a fixed standard-normal noise
buffer.  The network weights are the trainable state; the noise never
changes.  Untrained convolutional generators fit coherent structure much
faster than they fit incoherent detail, so routing the factor grids through
one acts as a structural prior without any explicit regularization term.

Two families are provided:

* :class:`Generator` — residual convolution stages with progressive nearest
  ×2 upsampling (group norm → SiLU → 3×3 conv blocks).  This is the default
  parametrization for both planes (2-D) and vectors (1-D).
* :class:`DeepDecoder` — bias-free per-pixel (1×1) layers with fixed
  bilinear upsampling and per-channel normalization, a deliberately minimal
  alternative whose only spatial mixing is the upsampling itself.

All spatial convolutions use replicate ("edge") padding so that a spatially
constant input produces a spatially constant output for *any* weight
setting — zeroing the noise therefore collapses the generated grids to
constants, which is exactly the ablation contract the trainer relies on.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "GeneratorConfig",
    "NoiseBuffer",
    "Generator",
    "DeepDecoder",
    "init_noise",
    "generate",
    "build_generator",
    "build_deep_decoder",
    "paper_scale_config",
    "count_parameters",
]

#: Spatial growth of the default stage plan (product of the ×2 upsamples).
UPSAMPLE_FACTOR = 16


@dataclass(frozen=True)
class GeneratorConfig:
    """Stage plan shared by both generator families.

    ``stage_scales`` gives each stage's resolution relative to the noise
    input; consecutive entries either repeat (same resolution) or double
    (one nearest/bilinear ×2 upsample runs before the stage).  Stage
    channel widths are ``round(base_width * width_multipliers[s])``.
    """

    noise_resolution: int
    noise_channels: int = 8
    out_channels: int = 16
    base_width: int = 32
    stage_scales: tuple[int, ...] = (1, 2, 4, 8, 16, 16)
    blocks_per_stage: tuple[int, ...] = (2, 4, 4, 4, 4, 4)
    width_multipliers: tuple[float, ...] = (3.0, 3.0, 2.0, 1.5, 1.0, 1.0)

    def __post_init__(self):
        if self.noise_resolution < 2:
            raise ValueError("noise_resolution must be >= 2")
        n = len(self.stage_scales)
        if len(self.blocks_per_stage) != n or len(self.width_multipliers) != n:
            raise ValueError("stage plan lists must all have the same length")
        if self.stage_scales[0] != 1:
            raise ValueError("the first stage must run at the noise resolution")
        for a, b in zip(self.stage_scales, self.stage_scales[1:]):
            if b != a and b != 2 * a:
                raise ValueError(
                    f"stage scales must grow by x2 steps, got {a} -> {b}")
        if min(self.blocks_per_stage) < 1:
            raise ValueError("every stage needs at least one block")

    @property
    def stage_widths(self) -> tuple[int, ...]:
        return tuple(int(round(self.base_width * m))
                     for m in self.width_multipliers)

    @property
    def upsample_factor(self) -> int:
        return self.stage_scales[-1]

    @property
    def output_resolution(self) -> int:
        return self.noise_resolution * self.stage_scales[-1]

    @classmethod
    def for_grid(cls, grid_resolution: int, **kwargs) -> "GeneratorConfig":
        """Config whose output matches a factor grid of the given size."""
        factor = kwargs.get("stage_scales", cls.stage_scales)[-1]
        if grid_resolution % factor:
            raise ValueError(
                f"grid resolution {grid_resolution} is not a multiple of the "
                f"generator upsample factor {factor}")
        return cls(noise_resolution=grid_resolution // factor, **kwargs)


def paper_scale_config() -> GeneratorConfig:
    """Full-size plan: 320-pixel planes from 20-pixel noise, ~7M weights."""
    return GeneratorConfig(noise_resolution=20, base_width=64)


class NoiseBuffer:
    """Frozen standard-normal generator input.

    Drawn once from ``seed`` and never updated: the buffer is the fixed
    random scaffold whose features the generator weights learn to reshape.
    ``values`` keeps a float64 master copy; :meth:`tensor` serves casts in
    the active precision as non-trainable tensors.
    """

    def __init__(self, seed: int, channels: int, resolution: int,
                 dimension: int = 2):
        if resolution < 2:
            raise ValueError("noise resolution must be >= 2")
        if dimension not in (1, 2):
            raise ValueError("dimension must be 1 or 2")
        self.seed = int(seed)
        self.channels = int(channels)
        self.resolution = int(resolution)
        self.dimension = int(dimension)
        shape = (self.channels,) + (self.resolution,) * self.dimension
        rng = np.random.Generator(np.random.PCG64(self.seed))
        self.values = rng.standard_normal(shape)
        self.values.flags.writeable = False
        self._cache: dict[str, ad.Tensor] = {}

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def tensor(self) -> ad.Tensor:
        """The noise as a constant tensor in the active precision."""
        key = np.dtype(ad.default_dtype()).name
        t = self._cache.get(key)
        if t is None:
            t = ad.Tensor(self.values.astype(key), requires_grad=False)
            t.data.flags.writeable = False
            self._cache[key] = t
        return t

    def digest(self) -> str:
        """SHA-256 of the raw buffer bytes, for byte-identity checks."""
        return hashlib.sha256(self.values.tobytes()).hexdigest()


def init_noise(seed: int, channels: int, resolution: int,
               dimension: int = 2) -> NoiseBuffer:
    """Draw a frozen noise buffer (see :class:`NoiseBuffer`)."""
    return NoiseBuffer(seed, channels, resolution, dimension)


def _group_count(channels: int) -> int:
    """Group-norm group count: min(8, channels), reduced to divide evenly."""
    g = min(8, channels)
    while channels % g:
        g -= 1
    return g


class _ParamBuilder:
    """Collects named conv/norm parameters with He-uniform init."""

    def __init__(self, rng: np.random.Generator, dimension: int):
        self.rng = rng
        self.dimension = dimension
        self.params: dict[str, ad.Tensor] = {}

    def conv(self, name: str, cin: int, cout: int, k: int, bias: bool = True):
        fan_in = cin * k ** self.dimension
        limit = float(np.sqrt(6.0 / fan_in))
        shape = (cout, cin) + (k,) * self.dimension
        self.params[name + ".w"] = ad.parameter(
            self.rng.uniform(-limit, limit, size=shape))
        if bias:
            self.params[name + ".b"] = ad.parameter(np.zeros(cout))

    def norm(self, name: str, channels: int):
        self.params[name + ".g"] = ad.parameter(np.ones(channels))
        self.params[name + ".b"] = ad.parameter(np.zeros(channels))


class _GeneratorBase:
    """Shared plumbing: named parameters plus 1-D/2-D conv dispatch."""

    def __init__(self, config: GeneratorConfig, dimension: int):
        if dimension not in (1, 2):
            raise ValueError("dimension must be 1 or 2")
        self.config = config
        self.dimension = dimension
        self._params: dict[str, ad.Tensor] = {}

    def parameters(self) -> dict[str, ad.Tensor]:
        """Trainable tensors keyed by stable dotted names."""
        return dict(self._params)

    def _conv(self, x: ad.Tensor, name: str) -> ad.Tensor:
        w = self._params[name + ".w"]
        b = self._params.get(name + ".b")
        if self.dimension == 2:
            return ad.conv2d(x, w, b, pad_mode="edge")
        return ad.conv1d(x, w, b, pad_mode="edge")

    def _norm(self, x: ad.Tensor, name: str) -> ad.Tensor:
        return ad.group_norm(x, _group_count(x.shape[0]),
                             self._params[name + ".g"],
                             self._params[name + ".b"])

    def _check_noise(self, noise: ad.Tensor) -> None:
        cfg = self.config
        expect = (cfg.noise_channels,) + (cfg.noise_resolution,) * self.dimension
        if tuple(noise.shape) != expect:
            raise ValueError(
                f"noise shape {tuple(noise.shape)} does not match the "
                f"configured {expect}")

    def _upsample_here(self, stage: int) -> bool:
        scales = self.config.stage_scales
        return stage > 0 and scales[stage] == 2 * scales[stage - 1]


class Generator(_GeneratorBase):
    """Residual convolutional generator.

    conv_in lifts the noise to the first stage width; each stage applies
    residual blocks (group norm → SiLU → 3×3 conv, twice, plus a skip that
    is a 1×1 conv when the width changes); a nearest ×2 upsample followed
    by a 3×3 conv runs before every stage whose scale doubles; a final
    norm → SiLU → 3×3 conv head emits the output channels.
    """

    family = "residual"

    def __init__(self, rng: np.random.Generator, config: GeneratorConfig,
                 dimension: int = 2):
        super().__init__(config, dimension)
        pb = _ParamBuilder(rng, dimension)
        widths = config.stage_widths
        pb.conv("conv_in", config.noise_channels, widths[0], 3)
        prev = widths[0]
        for s, width in enumerate(widths):
            if self._upsample_here(s):
                pb.conv(f"stage{s}.upsample", prev, prev, 3)
            for b in range(config.blocks_per_stage[s]):
                cin = prev if b == 0 else width
                base = f"stage{s}.block{b}"
                pb.norm(base + ".gn1", cin)
                pb.conv(base + ".conv1", cin, width, 3)
                pb.norm(base + ".gn2", width)
                pb.conv(base + ".conv2", width, width, 3)
                if cin != width:
                    pb.conv(base + ".skip", cin, width, 1)
            prev = width
        pb.norm("head.norm", prev)
        pb.conv("head.conv", prev, config.out_channels, 3)
        self._params = pb.params

    def _block(self, x: ad.Tensor, base: str) -> ad.Tensor:
        h = self._norm(x, base + ".gn1")
        h = ad.silu(h)
        h = self._conv(h, base + ".conv1")
        h = self._norm(h, base + ".gn2")
        h = ad.silu(h)
        h = self._conv(h, base + ".conv2")
        if base + ".skip.w" in self._params:
            x = self._conv(x, base + ".skip")
        return x + h

    def __call__(self, noise: ad.Tensor) -> ad.Tensor:
        self._check_noise(noise)
        cfg = self.config
        x = self._conv(noise, "conv_in")
        for s in range(len(cfg.stage_scales)):
            if self._upsample_here(s):
                x = ad.nearest_upsample2x(x)
                x = self._conv(x, f"stage{s}.upsample")
            for b in range(cfg.blocks_per_stage[s]):
                x = self._block(x, f"stage{s}.block{b}")
        x = self._norm(x, "head.norm")
        x = ad.silu(x)
        return self._conv(x, "head.conv")


def _relu(x: ad.Tensor) -> ad.Tensor:
    """relu(x) as x * 1[x>0] with a constant mask.

    Composed from the ``mul`` primitive: the value is exact and the mul
    backward multiplies incoming gradients by the mask, which is exactly
    the relu subgradient.
    """
    mask = ad.Tensor((x.data > 0).astype(x.data.dtype), requires_grad=False)
    return x * mask


class DeepDecoder(_GeneratorBase):
    """Per-pixel generator: 1×1 convs plus fixed bilinear upsampling.

    Each stage is a bias-free 1×1 conv followed by ReLU and (optionally) a
    per-channel norm; spatial structure enters only through the bilinear
    upsamples.  Because every layer is bias-free and positively
    homogeneous, with ``use_norm=False`` scaling the noise by any α ≥ 0
    scales the output by exactly α.
    """

    family = "pixel"

    def __init__(self, rng: np.random.Generator, config: GeneratorConfig,
                 dimension: int = 2, use_norm: bool = True):
        super().__init__(config, dimension)
        self.use_norm = use_norm
        pb = _ParamBuilder(rng, dimension)
        prev = config.noise_channels
        for s, width in enumerate(config.stage_widths):
            pb.conv(f"stage{s}.mix", prev, width, 1, bias=False)
            if use_norm:
                pb.norm(f"stage{s}.norm", width)
            prev = width
        pb.conv("head.conv", prev, config.out_channels, 1, bias=False)
        self._params = pb.params
        self._tent: dict[tuple[int, str], ad.Tensor] = {}

    def _tent_kernel(self, channels: int, dtype) -> ad.Tensor:
        key = (channels, np.dtype(dtype).name)
        t = self._tent.get(key)
        if t is None:
            tap = np.array([0.25, 0.5, 0.25])
            eye = np.arange(channels)
            if self.dimension == 2:
                k = np.zeros((channels, channels, 3, 3))
                k[eye, eye] = np.outer(tap, tap)
            else:
                k = np.zeros((channels, channels, 3))
                k[eye, eye] = tap
            t = ad.Tensor(k.astype(dtype), requires_grad=False)
            self._tent[key] = t
        return t

    def _bilinear_up(self, x: ad.Tensor) -> ad.Tensor:
        # nearest x2 then a fixed per-channel tent filter with edge padding
        # equals half-pixel-aligned bilinear x2 upsampling exactly.
        x = ad.nearest_upsample2x(x)
        k = self._tent_kernel(x.shape[0], x.data.dtype)
        if self.dimension == 2:
            return ad.conv2d(x, k, pad_mode="edge")
        return ad.conv1d(x, k, pad_mode="edge")

    def __call__(self, noise: ad.Tensor) -> ad.Tensor:
        self._check_noise(noise)
        x = noise
        for s in range(len(self.config.stage_scales)):
            if self._upsample_here(s):
                x = self._bilinear_up(x)
            x = _relu(self._conv(x, f"stage{s}.mix"))
            if self.use_norm:
                x = self._norm(x, f"stage{s}.norm")
        return self._conv(x, "head.conv")


def build_generator(rng: np.random.Generator, config: GeneratorConfig,
                    dimension: int = 2) -> Generator:
    """The default (residual) generator family."""
    return Generator(rng, config, dimension)


def build_deep_decoder(rng: np.random.Generator, config: GeneratorConfig,
                       dimension: int = 2, use_norm: bool = True) -> DeepDecoder:
    """The per-pixel linear alternative family."""
    return DeepDecoder(rng, config, dimension, use_norm)


def generate(gen, noise) -> ad.Tensor:
    """Run a generator on a noise buffer (or raw tensor) -> factor grid."""
    if isinstance(noise, NoiseBuffer):
        noise = noise.tensor()
    return gen(noise)


def count_parameters(module) -> int:
    """Total trainable scalar count of anything exposing parameters()."""
    return int(sum(p.data.size for p in module.parameters().values()))
