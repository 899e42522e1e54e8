"""Residual building blocks: simple, basic and bottleneck.

All three share the same outer structure::

    out = residual_path(x) + shortcut(x)      # short skip on
    out = residual_path(x)                    # short skip off

The residual path uses pre-activation ordering ([BN] -> ReLU -> conv).
Downsampling is a stride-2 first convolution; upsampling repeats rows and
columns after the last convolution. The shortcut decimates or repeats to
match resolution and, when widths differ, applies a 1x1 convolution.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Iterator, List, Optional

import numpy as np

from .autodiff import Tensor, add, get_default_dtype
from .exceptions import ConfigError
from .ops import (
    TRAIN,
    BatchNormState,
    batch_norm,
    conv2d,
    decimate_downsample,
    dropout,
    he_normal,
    relu,
    repeat_upsample,
)

RESAMPLE_MODES = ("none", "down", "up")


class Parameter(Tensor):
    """A trainable tensor with a unique hierarchical name.

    ``layer`` groups parameters for update telemetry; ``depth_index`` is the
    layer's position along the contracting -> across -> expanding path.
    """

    def __init__(self, data, name: str, depth_index: int = 0, layer: Optional[str] = None):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.depth_index = depth_index
        self.layer = layer if layer is not None else name.rsplit(".", 2)[0]

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed on (seed, parameter name).

    Networks that differ only in topology therefore initialize every shared
    parameter identically.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


class Conv:
    """Convolution layer owning a weight and bias parameter."""

    def __init__(self, name, in_channels, out_channels, kernel_size, stride=1, seed=0,
                 depth_index=0, layer=None):
        self.name = name
        self.stride = stride
        self.padding = kernel_size // 2
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Parameter(
            he_normal(shape, fan_in, param_rng(seed, name + ".weight")),
            name + ".weight", depth_index, layer,
        )
        self.bias = Parameter(
            np.zeros(out_channels, dtype=get_default_dtype()), name + ".bias", depth_index, layer
        )

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]


class BatchNorm:
    def __init__(self, name, channels, depth_index=0, layer=None, momentum=0.1, eps=1e-5):
        self.name = name
        dtype = get_default_dtype()
        self.state = BatchNormState(
            gamma=Parameter(np.ones(channels, dtype=dtype), name + ".gamma", depth_index, layer),
            beta=Parameter(np.zeros(channels, dtype=dtype), name + ".beta", depth_index, layer),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batch_norm(x, self.state, mode)

    def parameters(self) -> List[Parameter]:
        return [self.state.gamma, self.state.beta]

    def buffers(self) -> dict:
        return {
            self.name + ".running_mean": self.state.running_mean,
            self.name + ".running_var": self.state.running_var,
        }


@dataclass(frozen=True)
class BlockOpts:
    in_channels: int
    out_channels: int
    resample: str = "none"
    use_batch_norm: bool = True
    dropout_rate: float = 0.0
    use_short_skip: bool = True

    def __post_init__(self):
        if self.resample not in RESAMPLE_MODES:
            raise ConfigError(f"resample must be one of {RESAMPLE_MODES}, got {self.resample!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


def shortcut_adapt(x: Tensor, opts: BlockOpts, projection: Optional[Conv] = None) -> Tensor:
    """Match ``x`` to the residual output: resample first, then project channels.

    Identity when neither resolution nor width changes. ``projection`` must
    be a 1x1 convolution whenever the widths differ.
    """
    if opts.resample == "down":
        x = decimate_downsample(x, 2)
    elif opts.resample == "up":
        x = repeat_upsample(x, 2)
    if opts.in_channels != opts.out_channels:
        if projection is None:
            raise ConfigError(
                f"shortcut {opts.in_channels}->{opts.out_channels} channels needs a 1x1 projection"
            )
        x = projection(x)
    return x


class Block:
    """Common machinery of the three residual block types."""

    kind = "block"

    def __init__(self, name: str, opts: BlockOpts, seed: int = 0, depth_index: int = 0):
        self.name = name
        self.opts = opts
        self.seed = seed
        self.depth_index = depth_index
        self._convs: List[Conv] = []
        self._norms: List[BatchNorm] = []
        self.projection: Optional[Conv] = None
        if opts.use_short_skip and opts.in_channels != opts.out_channels:
            self.projection = self._conv("shortcut", opts.in_channels, opts.out_channels, 1)

    def _conv(self, suffix, cin, cout, k, stride=1) -> Conv:
        conv = Conv(f"{self.name}.{suffix}", cin, cout, k, stride, self.seed, self.depth_index, self.name)
        if suffix != "shortcut":
            self._convs.append(conv)
        return conv

    def _norm(self, suffix, channels) -> Optional[BatchNorm]:
        if not self.opts.use_batch_norm:
            return None
        bn = BatchNorm(f"{self.name}.{suffix}", channels, self.depth_index, self.name)
        self._norms.append(bn)
        return bn

    @staticmethod
    def _preact(x, norm, mode):
        if norm is not None:
            x = norm(x, mode)
        return relu(x)

    def _maybe_upsample(self, x):
        return repeat_upsample(x, 2) if self.opts.resample == "up" else x

    def residual(self, x, mode, rng, rate, dropout_mode):
        raise NotImplementedError

    def __call__(self, x: Tensor, mode: str = TRAIN, rng: Optional[np.random.Generator] = None,
                 dropout_rate: Optional[float] = None, dropout_mode: Optional[str] = None) -> Tensor:
        """Apply the block. ``dropout_mode`` lets dropout sample while the
        rest of the block runs in ``mode`` (Monte-Carlo dropout)."""
        rate = self.opts.dropout_rate if dropout_rate is None else dropout_rate
        out = self.residual(x, mode, rng, rate, dropout_mode or mode)
        if not self.opts.use_short_skip:
            return out
        short = shortcut_adapt(x, self.opts, self.projection)
        if short.shape != out.shape:
            raise AssertionError(
                f"{self.name}: shortcut shape {short.shape} != residual shape {out.shape}"
            )
        return add(out, short)

    def parameters(self) -> List[Parameter]:
        params = []
        for bn in self._norms:
            params.extend(bn.parameters())
        for conv in self._convs:
            params.extend(conv.parameters())
        if self.projection is not None:
            params.extend(self.projection.parameters())
        return params

    def buffers(self) -> dict:
        out = {}
        for bn in self._norms:
            out.update(bn.buffers())
        return out

    def conv_layers(self) -> Iterator[Conv]:
        yield from self._convs
        if self.projection is not None:
            yield self.projection


class SimpleBlock(Block):
    """[BN] -> ReLU -> conv3x3 -> [dropout] -> [repeat-upsample]."""

    kind = "simple"

    def __init__(self, name, opts, seed=0, depth_index=0):
        super().__init__(name, opts, seed, depth_index)
        stride = 2 if opts.resample == "down" else 1
        self.bn1 = self._norm("bn1", opts.in_channels)
        self.conv1 = self._conv("conv1", opts.in_channels, opts.out_channels, 3, stride)

    def residual(self, x, mode, rng, rate, dropout_mode):
        h = self.conv1(self._preact(x, self.bn1, mode))
        h = dropout(h, rate, dropout_mode, rng)
        return self._maybe_upsample(h)


class BasicBlock(Block):
    """Two pre-activated 3x3 convolutions with dropout in between."""

    kind = "basic"

    def __init__(self, name, opts, seed=0, depth_index=0):
        super().__init__(name, opts, seed, depth_index)
        stride = 2 if opts.resample == "down" else 1
        self.bn1 = self._norm("bn1", opts.in_channels)
        self.conv1 = self._conv("conv1", opts.in_channels, opts.out_channels, 3, stride)
        self.bn2 = self._norm("bn2", opts.out_channels)
        self.conv2 = self._conv("conv2", opts.out_channels, opts.out_channels, 3)

    def residual(self, x, mode, rng, rate, dropout_mode):
        h = self.conv1(self._preact(x, self.bn1, mode))
        h = dropout(h, rate, dropout_mode, rng)
        h = self.conv2(self._preact(h, self.bn2, mode))
        return self._maybe_upsample(h)


class BottleneckBlock(Block):
    """1x1 reduce -> 3x3 -> 1x1 expand, inner width ``out_channels // 4``."""

    kind = "bottleneck"

    def __init__(self, name, opts, seed=0, depth_index=0):
        if opts.out_channels % 4:
            raise ConfigError(
                f"bottleneck output width must be divisible by 4, got {opts.out_channels}"
            )
        super().__init__(name, opts, seed, depth_index)
        inner = opts.out_channels // 4
        self.inner_channels = inner
        stride = 2 if opts.resample == "down" else 1
        self.bn1 = self._norm("bn1", opts.in_channels)
        self.conv1 = self._conv("conv1", opts.in_channels, inner, 1, stride)
        self.bn2 = self._norm("bn2", inner)
        self.conv2 = self._conv("conv2", inner, inner, 3)
        self.bn3 = self._norm("bn3", inner)
        self.conv3 = self._conv("conv3", inner, opts.out_channels, 1)

    def residual(self, x, mode, rng, rate, dropout_mode):
        h = self.conv1(self._preact(x, self.bn1, mode))
        h = self.conv2(self._preact(h, self.bn2, mode))
        h = dropout(h, rate, dropout_mode, rng)
        h = self.conv3(self._preact(h, self.bn3, mode))
        return self._maybe_upsample(h)


class ConvLayer(Block):
    """A single convolution row (no shortcut), e.g. the stem or classifier.

    With ``preactivate`` the input passes through [BN] -> ReLU first.
    """

    kind = "conv"

    def __init__(self, name, opts, kernel_size=3, preactivate=True, seed=0, depth_index=0):
        opts = BlockOpts(opts.in_channels, opts.out_channels, opts.resample,
                         opts.use_batch_norm, opts.dropout_rate, use_short_skip=False)
        super().__init__(name, opts, seed, depth_index)
        self.kernel_size = kernel_size
        self.preactivate = preactivate
        stride = 2 if opts.resample == "down" else 1
        self.bn1 = self._norm("bn1", opts.in_channels) if preactivate else None
        self.conv1 = self._conv("conv", opts.in_channels, opts.out_channels, kernel_size, stride)

    def residual(self, x, mode, rng, rate, dropout_mode):
        if self.preactivate:
            x = self._preact(x, self.bn1, mode)
        return self._maybe_upsample(self.conv1(x))


BLOCK_TYPES = {
    "simple": SimpleBlock,
    "basic": BasicBlock,
    "bottleneck": BottleneckBlock,
}


def make_block(kind: str, name: str, opts: BlockOpts, seed: int = 0, depth_index: int = 0,
               preactivate: bool = True) -> Block:
    if kind == "conv3x3":
        return ConvLayer(name, opts, 3, preactivate, seed=seed, depth_index=depth_index)
    if kind == "conv1x1":
        return ConvLayer(name, opts, 1, preactivate, seed=seed, depth_index=depth_index)
    try:
        cls = BLOCK_TYPES[kind]
    except KeyError:
        raise ConfigError(f"unknown block type {kind!r}") from None
    return cls(name, opts, seed, depth_index)
