"""NPNet: stride-2 convolution blocks, channel attention, dilated feature
enhancement, and a 1x1 classifier upsampled back to the input size."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .layers import BatchNorm2d, Conv2d, ConvBNReLU, Layer, LayerMacs, Linear, Parameter

ATTENTION_VARIANTS = ("none", "se", "cam")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 2
    widths: tuple[int, int, int] = (32, 64, 128)
    reduction: int = 16
    dilation_rates: tuple[int, ...] = (1, 5, 15, 20)
    attention: str = "cam"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "dilation_rates", tuple(int(d) for d in self.dilation_rates))
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.in_channels < 1:
            problems.append(f"in_channels must be >= 1 (got {self.in_channels})")
        if self.num_classes < 2:
            problems.append(f"num_classes must be >= 2 (got {self.num_classes})")
        if len(self.widths) != 3 or any(w < 1 for w in self.widths):
            problems.append(f"widths must be three positive integers (got {self.widths})")
        if self.reduction < 1:
            problems.append(f"reduction must be >= 1 (got {self.reduction})")
        elif self.attention != "none":
            for w in self.widths:
                if w % self.reduction:
                    problems.append(f"width {w} is not divisible by reduction {self.reduction}")
        if self.widths and self.widths[-1] % 2:
            problems.append(f"last width must be even for the feature-enhancement branches (got {self.widths[-1]})")
        if len(self.dilation_rates) != 4 or any(d < 1 for d in self.dilation_rates):
            problems.append(f"dilation_rates must be four positive integers (got {self.dilation_rates})")
        if self.attention not in ATTENTION_VARIANTS:
            problems.append(f"attention must be one of {ATTENTION_VARIANTS} (got {self.attention!r})")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_items(self) -> list[tuple[str, str]]:
        """Flat ``key=value`` form used by the checkpoint header."""
        out = []
        for key, value in asdict(self).items():
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            out.append((key, str(value)))
        return out

    @classmethod
    def from_items(cls, items) -> "ModelConfig":
        raw = dict(items)
        kwargs = {}
        for key in ("in_channels", "num_classes", "reduction"):
            if key in raw:
                kwargs[key] = int(raw[key])
        for key in ("widths", "dilation_rates"):
            if key in raw:
                kwargs[key] = tuple(int(v) for v in raw[key].split(","))
        if "attention" in raw:
            kwargs["attention"] = raw["attention"]
        return cls(**kwargs)


class BasicBlock(Layer):
    """Stride-2 3x3 conv, then two stride-1 3x3 convs, each with bn+relu."""

    def __init__(self, name, cin, cout, seed=0):
        self.units = [
            ConvBNReLU(f"{name}.conv1", cin, cout, stride=2, seed=seed),
            ConvBNReLU(f"{name}.conv2", cout, cout, seed=seed),
            ConvBNReLU(f"{name}.conv3", cout, cout, seed=seed),
        ]

    def children(self):
        return self.units

    def forward(self, x):
        for u in self.units:
            x = u.forward(x)
        return x

    def backward(self, dout):
        for u in reversed(self.units):
            dout = u.backward(dout)
        return dout

    def trace(self, shape, rows):
        for u in self.units:
            shape = u.trace(shape, rows)
        return shape


class ChannelAttention(Layer):
    """Squeeze (global average pool), bottleneck C -> C/r -> C, sigmoid gate.

    ``variant="cam"`` implements the bottleneck with 1x1 convolutions,
    ``variant="se"`` with fully-connected maps on the pooled vector.
    """

    def __init__(self, name, channels, reduction, variant="cam", seed=0):
        if channels % reduction:
            raise ConfigError(f"{name}: {channels} channels not divisible by reduction {reduction}")
        if variant not in ("se", "cam"):
            raise ConfigError(f"{name}: unknown attention variant {variant!r}")
        self.variant = variant
        hidden = channels // reduction
        if variant == "cam":
            self.reduce = Conv2d(f"{name}.reduce", channels, hidden, kernel=1, bias=True, seed=seed)
            self.expand = Conv2d(f"{name}.expand", hidden, channels, kernel=1, bias=True, seed=seed)
        else:
            self.reduce = Linear(f"{name}.reduce", channels, hidden, seed=seed)
            self.expand = Linear(f"{name}.expand", hidden, channels, seed=seed)
        self._cache = None

    def children(self):
        return [self.reduce, self.expand]

    def forward(self, x):
        pooled = ops.global_avg_pool(x)
        hidden_pre = self.reduce.forward(pooled)
        gate_pre = self.expand.forward(ops.relu(hidden_pre))
        gate = ops.sigmoid(gate_pre)
        self._cache = (x, hidden_pre, gate_pre, gate)
        return ops.channel_scale(x, gate)

    def backward(self, dout):
        x, hidden_pre, gate_pre, gate = self._cache
        dx, dgate = ops.channel_scale_backward(dout, x, gate)
        dh = self.expand.backward(ops.sigmoid_backward(dgate, gate_pre))
        dpooled = self.reduce.backward(ops.relu_backward(dh, hidden_pre))
        return dx + ops.global_avg_pool_backward(dpooled, x)

    def relu_inputs(self):
        return [] if self._cache is None else [self._cache[1]]

    def trace(self, shape, rows):
        self.expand.trace(self.reduce.trace((shape[0], 1, 1), rows), rows)
        return shape


class FeatureEnhancement(Layer):
    """Four parallel dilated 3x3 branches (C -> C/2 each), 1x1 fusion to C,
    concatenation with the block input, and a final 1x1 fusion to C."""

    def __init__(self, name, channels, rates=(1, 5, 15, 20), seed=0):
        half = channels // 2
        self.channels = channels
        self.branches = [
            ConvBNReLU(f"{name}.branch{i + 1}", channels, half, dilation=r, seed=seed) for i, r in enumerate(rates)
        ]
        self.fuse1 = ConvBNReLU(f"{name}.fuse1", half * len(rates), channels, kernel=1, seed=seed)
        self.fuse2 = ConvBNReLU(f"{name}.fuse2", 2 * channels, channels, kernel=1, seed=seed)
        self.last_concat_channels: Optional[int] = None

    def children(self):
        return [*self.branches, self.fuse1, self.fuse2]

    def forward(self, x):
        stacked = ops.concat_many([b.forward(x) for b in self.branches])
        self.last_concat_channels = stacked.shape[1]
        fused = self.fuse1.forward(stacked)
        return self.fuse2.forward(ops.concat_channels(fused, x))

    def backward(self, dout):
        dcat = self.fuse2.backward(dout)
        dfused, dx = ops.split_channels(dcat, [self.channels, self.channels])
        dstacked = self.fuse1.backward(dfused)
        pieces = ops.split_channels(dstacked, [b.conv.weight.value.shape[0] for b in self.branches])
        for branch, g in zip(self.branches, pieces):
            dx = dx + branch.backward(g)
        return dx

    def trace(self, shape, rows):
        for b in self.branches:
            b.trace(shape, rows)
        mid = self.fuse1.trace((self.branches[0].conv.weight.value.shape[0] * len(self.branches),) + shape[1:], rows)
        return self.fuse2.trace((mid[0] + shape[0],) + shape[1:], rows)


class Identity(Layer):
    def forward(self, x):
        return x

    def backward(self, dout):
        return dout

    def trace(self, shape, rows):
        return shape


class NPNet(Layer):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        c1, c2, c3 = config.widths
        cin = config.in_channels
        self.stages: list[tuple[Layer, Layer]] = []
        for i, width in enumerate(config.widths, 1):
            block = BasicBlock(f"block{i}", cin, width, seed=seed)
            if config.attention == "none":
                attn = Identity()
            else:
                attn = ChannelAttention(f"attn{i}", width, config.reduction, config.attention, seed=seed)
            self.stages.append((block, attn))
            cin = width
        self.fem = FeatureEnhancement("fem", c3, config.dilation_rates, seed=seed)
        self.classifier = Conv2d("classifier", c3, config.num_classes, kernel=1, bias=True, seed=seed)
        self._in_hw = None
        self.last_bottleneck_shape = None

    def children(self):
        layers = [layer for pair in self.stages for layer in pair]
        return [*layers, self.fem, self.classifier]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def check_input(self, x: np.ndarray) -> None:
        n, c, h, w = x.shape
        if c != self.config.in_channels:
            raise ops.ShapeError(f"channel dimension: model expects {self.config.in_channels} channels, got {c}")
        if h % 8 or w % 8:
            hint = f"{max(8, round(h / 8) * 8)}x{max(8, round(w / 8) * 8)}"
            raise ops.ShapeError(
                f"input {h}x{w} (HxW) is not divisible by 8; resize it first (e.g. to {hint})"
            )

    def encode(self, x):
        """Run the three block/attention stages (output is 1/8 resolution)."""
        for block, attn in self.stages:
            x = attn.forward(block.forward(x))
        return x

    def forward(self, x):
        x = ops.as_tensor(x)
        self.check_input(x)
        self._in_hw = x.shape[2:]
        feats = self.encode(x)
        self.last_bottleneck_shape = feats.shape
        logits = self.classifier.forward(self.fem.forward(feats))
        self._low = logits
        return ops.bilinear_resize(logits, *self._in_hw)

    __call__ = forward

    def backward(self, dlogits):
        d = ops.bilinear_resize_backward(dlogits, self._low)
        d = self.fem.backward(self.classifier.backward(d))
        for block, attn in reversed(self.stages):
            d = block.backward(attn.backward(d))
        return d

    def trace(self, in_h: int, in_w: int) -> list[LayerMacs]:
        rows: list[LayerMacs] = []
        shape = (self.config.in_channels, in_h, in_w)
        for block, attn in self.stages:
            shape = attn.trace(block.trace(shape, rows), rows)
        shape = self.fem.trace(shape, rows)
        self.classifier.trace(shape, rows)
        return rows


def build_npnet(config: Optional[ModelConfig] = None, seed: int = 0) -> NPNet:
    return NPNet(config or ModelConfig(), seed)


def npnet_forward(x, model: NPNet, mode: str = "eval") -> np.ndarray:
    model.set_mode(mode)
    return model.forward(x)


def count_params(model: NPNet) -> int:
    return sum(p.value.size for p in model.parameters())


def param_count_formula(config: ModelConfig) -> int:
    """Closed-form parameter total for ``config`` (no model is built)."""
    k = 3
    total = 0
    cin = config.in_channels
    for c in config.widths:
        total += cin * c * k * k + 2 * c * c * k * k + 3 * 2 * c
        if config.attention != "none":
            h = c // config.reduction
            total += 2 * c * h + h + c
        cin = c
    c3 = config.widths[-1]
    half = c3 // 2
    nb = len(config.dilation_rates)
    total += nb * (c3 * half * k * k + 2 * half)
    total += nb * half * c3 + 2 * c3
    total += 2 * c3 * c3 + 2 * c3
    total += c3 * config.num_classes + config.num_classes
    return total


@dataclass
class MacReport:
    in_h: int
    in_w: int
    layers: list[LayerMacs] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(r.macs for r in self.layers)


def count_macs(model: NPNet, in_h: int, in_w: int) -> MacReport:
    """Multiply-accumulates of every convolution (and fully-connected map) for
    one ``in_h`` x ``in_w`` image."""
    if in_h % 8 or in_w % 8:
        raise ops.ShapeError(f"input {in_h}x{in_w} is not divisible by 8")
    return MacReport(in_h, in_w, model.trace(in_h, in_w))
