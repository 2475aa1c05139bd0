"""SHARK encoder-decoder: R-CBAM blocks, MultiChannelBlocks, gating and output head.

Data flow for an ``(n, 3, h, w)`` image with level widths ``b, 2b, 4b, 8b``::

    for each level i:      x = rcbam(x) -> multichannel -> skip[i]; x = maxpool2(skip[i])
    bottleneck:            x = rcbam(x)                       (8b -> 8b, at h/16)
    for i = 3 .. 0:        x = gate(rcbam(concat(upsample2(x), skip[i])))
    head:                  sigmoid(conv1x1(x))                (b -> 3)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, ShapeError, ValidationError

DEPTH = 4
SPATIAL_KERNEL = 7


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 16
    cbam_reduction: int = 8
    input_channels: int = 3
    output_channels: int = 3

    def __post_init__(self):
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.cbam_reduction < 1:
            raise ConfigError(f"cbam_reduction must be >= 1, got {self.cbam_reduction}")
        if self.input_channels != 3 or self.output_channels != 3:
            raise ConfigError("the network maps RGB to RGB (3 -> 3 channels)")

    @property
    def depth(self) -> int:
        return DEPTH

    def widths(self) -> list[int]:
        return [self.base_channels * 2**level for level in range(DEPTH)]

    def hidden(self, channels: int) -> int:
        """Width of the channel-attention MLP for a block with ``channels`` outputs."""
        return max(1, channels // self.cbam_reduction)

    def to_dict(self) -> dict:
        return {"base_channels": self.base_channels, "cbam_reduction": self.cbam_reduction}


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor | None = None

    @property
    def out_c(self) -> int:
        return self.weight.shape[0]

    @property
    def in_c(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias)


@dataclass
class RCBAMParams:
    conv1: ConvParams
    conv2: ConvParams
    mlp1: ConvParams
    mlp2: ConvParams
    spatial: ConvParams
    shortcut: ConvParams | None = None

    @property
    def in_c(self) -> int:
        return self.conv1.in_c

    @property
    def out_c(self) -> int:
        return self.conv2.out_c


@dataclass
class MultiChannelParams:
    conv3a: ConvParams
    conv3b: ConvParams
    conv1: ConvParams


@dataclass
class NetworkParams:
    config: ModelConfig
    encoders: list[RCBAMParams]
    multichannel: list[MultiChannelParams]
    bottleneck: RCBAMParams
    decoders: list[RCBAMParams]
    gates: list[ConvParams]
    head: ConvParams
    _named: dict[str, Tensor] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        widths = self.config.widths()
        for level, dec in enumerate(self.decoders):
            deeper = widths[level + 1] if level + 1 < DEPTH else self.bottleneck.out_c
            if dec.in_c != widths[level] + deeper:
                raise ShapeError(
                    f"decoder {level} takes {dec.in_c} channels, "
                    f"skip ({widths[level]}) + upsampled ({deeper}) = {widths[level] + deeper}"
                )
        self._named = dict(_walk(self))

    def named_parameters(self) -> dict[str, Tensor]:
        """All learnable tensors keyed by dotted path, in a fixed order."""
        return dict(self._named)

    def num_parameters(self) -> int:
        return sum(t.size for t in self._named.values())


def _conv_items(prefix: str, conv: ConvParams):
    yield f"{prefix}.weight", conv.weight
    if conv.bias is not None:
        yield f"{prefix}.bias", conv.bias


def _rcbam_items(prefix: str, p: RCBAMParams):
    for name in ("conv1", "conv2", "mlp1", "mlp2", "spatial", "shortcut"):
        conv = getattr(p, name)
        if conv is not None:
            yield from _conv_items(f"{prefix}.{name}", conv)


def _walk(params: NetworkParams):
    for i, block in enumerate(params.encoders):
        yield from _rcbam_items(f"encoders.{i}", block)
    for i, block in enumerate(params.multichannel):
        for name in ("conv3a", "conv3b", "conv1"):
            yield from _conv_items(f"multichannel.{i}.{name}", getattr(block, name))
    yield from _rcbam_items("bottleneck", params.bottleneck)
    for i, block in enumerate(params.decoders):
        yield from _rcbam_items(f"decoders.{i}", block)
    for i, gate in enumerate(params.gates):
        yield from _conv_items(f"gates.{i}", gate)
    yield from _conv_items("head", params.head)


# -- construction ----------------------------------------------------------------


def layer_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter name -> shape for a network built from ``config``."""
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout, k):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (1, cout, 1, 1)

    def rcbam(name, cin, cout):
        conv(f"{name}.conv1", cin, cout, 3)
        conv(f"{name}.conv2", cout, cout, 3)
        hidden = config.hidden(cout)
        conv(f"{name}.mlp1", cout, hidden, 1)
        conv(f"{name}.mlp2", hidden, cout, 1)
        conv(f"{name}.spatial", 2, 1, SPATIAL_KERNEL)
        if cin != cout:
            conv(f"{name}.shortcut", cin, cout, 1)

    widths = config.widths()
    cin = config.input_channels
    for i, w in enumerate(widths):
        rcbam(f"encoders.{i}", cin, w)
        cin = w
    for i, w in enumerate(widths):
        conv(f"multichannel.{i}.conv3a", w, w, 3)
        conv(f"multichannel.{i}.conv3b", w, w, 3)
        conv(f"multichannel.{i}.conv1", w, w, 1)
    rcbam("bottleneck", widths[-1], widths[-1])
    for i, w in enumerate(widths):
        deeper = widths[i + 1] if i + 1 < DEPTH else widths[-1]
        rcbam(f"decoders.{i}", w + deeper, w)
    for i, w in enumerate(widths):
        conv(f"gates.{i}", w, 1, 1)
    conv("head", widths[0], config.output_channels, 1)
    return shapes


def expected_parameter_count(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in layer_shapes(config).values()))


def params_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray], requires_grad: bool = True) -> NetworkParams:
    """Assemble :class:`NetworkParams` from named arrays (e.g. a checkpoint)."""
    shapes = layer_shapes(config)
    missing = set(shapes) - set(arrays)
    extra = set(arrays) - set(shapes)
    if missing or extra:
        raise ShapeError(f"parameter names do not match config: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
    for name, shape in shapes.items():
        if tuple(arrays[name].shape) != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {arrays[name].shape}")

    def conv(prefix):
        return ConvParams(
            Tensor(arrays[f"{prefix}.weight"], requires_grad=requires_grad),
            Tensor(arrays[f"{prefix}.bias"], requires_grad=requires_grad),
        )

    def rcbam(prefix):
        short = conv(f"{prefix}.shortcut") if f"{prefix}.shortcut.weight" in arrays else None
        return RCBAMParams(
            conv(f"{prefix}.conv1"), conv(f"{prefix}.conv2"), conv(f"{prefix}.mlp1"),
            conv(f"{prefix}.mlp2"), conv(f"{prefix}.spatial"), short,
        )

    return NetworkParams(
        config=config,
        encoders=[rcbam(f"encoders.{i}") for i in range(DEPTH)],
        multichannel=[
            MultiChannelParams(*(conv(f"multichannel.{i}.{n}") for n in ("conv3a", "conv3b", "conv1")))
            for i in range(DEPTH)
        ],
        bottleneck=rcbam("bottleneck"),
        decoders=[rcbam(f"decoders.{i}") for i in range(DEPTH)],
        gates=[conv(f"gates.{i}") for i in range(DEPTH)],
        head=conv("head"),
    )


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> NetworkParams:
    """Kaiming-uniform kernels (bound ``sqrt(6 / fan_in)``) and zero biases."""
    if not isinstance(config, ModelConfig):
        raise ConfigError(f"expected a ModelConfig, got {type(config).__name__}")
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in layer_shapes(config).items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            arrays[name] = np.zeros(shape, dtype=dtype)
    return params_from_arrays(config, arrays)


# -- blocks --------------------------------------------------------------------


def _check_channels(x: Tensor, expected: int, what: str) -> None:
    if x.shape[1] != expected:
        raise ShapeError(f"{what} expects {expected} channels, got {x.shape[1]}")


def channel_attention(f2: Tensor, p: RCBAMParams) -> Tensor:
    """Reweight channels by ``sigmoid(mlp(avgpool) + mlp(maxpool))``; MLP weights are shared."""
    _check_channels(f2, p.out_c, "channel attention")

    def mlp(v):
        return p.mlp2(ad.relu(p.mlp1(v)))

    weights = ad.sigmoid(mlp(ad.global_avg_pool(f2)) + mlp(ad.global_max_pool(f2)))
    return f2 * weights


def spatial_attention(fc: Tensor, p: RCBAMParams) -> Tensor:
    avg, mx = ad.channel_stats(fc)
    weights = ad.sigmoid(p.spatial(ad.concat_channels(avg, mx)))
    return fc * weights


def rcbam_forward(x: Tensor, p: RCBAMParams) -> Tensor:
    _check_channels(x, p.in_c, "R-CBAM block")
    f1 = ad.silu(p.conv1(x))
    f2 = p.conv2(f1)
    refined = spatial_attention(channel_attention(f2, p), p)
    residual = x if p.shortcut is None else p.shortcut(x)
    return refined + residual


def multichannel_forward(x: Tensor, p: MultiChannelParams) -> Tensor:
    _check_channels(x, p.conv3a.in_c, "MultiChannelBlock")
    return p.conv1(ad.silu(p.conv3b(ad.silu(p.conv3a(x)))))


def gating_forward(f_dec: Tensor, p: ConvParams) -> Tensor:
    return f_dec * ad.sigmoid(p(f_dec))


def check_image(image: Tensor, channels: int = 3, multiple: int = 2**DEPTH) -> None:
    n, c, h, w = image.shape
    if c != channels:
        raise ShapeError(f"expected {channels}-channel images, got {c}")
    if h % multiple or w % multiple:
        raise ShapeError(f"spatial size {h}x{w} is not divisible by {multiple}")
    data = image.data
    if not np.all(np.isfinite(data)):
        raise ValidationError("image contains NaN or Inf")
    if data.min() < 0 or data.max() > 1:
        raise ValidationError(f"image values must lie in [0, 1], got [{data.min()}, {data.max()}]")


def shark_forward(image: Tensor, params: NetworkParams, validate: bool = True) -> Tensor:
    """Restore an ``(n, 3, h, w)`` batch; ``h`` and ``w`` must be multiples of 16."""
    if validate:
        check_image(image)
    x = image
    skips = []
    for enc, mc in zip(params.encoders, params.multichannel):
        x = multichannel_forward(rcbam_forward(x, enc), mc)
        skips.append(x)
        x = ad.max_pool2(x)
    x = rcbam_forward(x, params.bottleneck)
    for level in reversed(range(DEPTH)):
        x = ad.concat_channels(ad.bilinear_upsample2(x), skips[level])
        x = gating_forward(rcbam_forward(x, params.decoders[level]), params.gates[level])
    return ad.sigmoid(params.head(x))
