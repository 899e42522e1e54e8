"""Differentiable neural-network operators on NCHW tensors."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, List, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, get_default_dtype, make_result, tensor
from .exceptions import ConfigError, DimensionError

TRAIN, EVAL = "train", "eval"


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, EVAL):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected an NCHW tensor, got shape {x.shape}")


@dataclass
class Conv2dParams:
    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N, C, H, W) with ``weight`` (O, C, k, k).

    Output spatial size is ``(H + 2*padding - k) // stride + 1``.
    """
    _require_4d(x, "conv2d")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise DimensionError(
            f"conv2d: input has {c} channels but weight {weight.shape} expects {c_in}"
        )
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {c_out} outputs")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: invalid stride={stride} / padding={padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"conv2d: input {x.shape} smaller than kernel {kh}x{kw}")

    xd, wd = x.data, weight.data
    if kh == 1 and kw == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        ho, wo = xs.shape[2], xs.shape[3]
        w2 = wd.reshape(c_out, c_in)
        out = np.einsum("nchw,oc->nohw", xs, w2, optimize=True)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def backward(g):
            gw = np.einsum("nohw,nchw->oc", g, xs, optimize=True).reshape(wd.shape)
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            gxs = np.einsum("nohw,oc->nchw", g, w2, optimize=True)
            if stride > 1:
                gx = np.zeros_like(xd)
                gx[:, :, ::stride, ::stride] = gxs
            else:
                gx = gxs
            return (gx, gw, gb)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        ho, wo = windows.shape[2], windows.shape[3]
        # (N, Ho, Wo, C*k*k) column matrix
        cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c_in * kh * kw)
        w2 = wd.reshape(c_out, -1)
        out = (cols @ w2.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def backward(g):
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
            gw = (g2.T @ cols).reshape(wd.shape)
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            gcols = (g2 @ w2).reshape(n, ho, wo, c_in, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


_relu_log: Optional[List[np.ndarray]] = None


@contextmanager
def record_relu_signs() -> Iterator[List[np.ndarray]]:
    """Collect the sign mask of every relu input evaluated inside the block.

    The gradient suite uses this to tell when a finite-difference step
    crossed a kink.
    """
    global _relu_log
    previous, _relu_log = _relu_log, []
    try:
        yield _relu_log
    finally:
        _relu_log = previous


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    if _relu_log is not None:
        _relu_log.append(mask)
    return make_result(np.where(mask, xd, 0).astype(xd.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid_array(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_array(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def activation(x: Tensor, kind: str = "relu") -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation {kind!r}")


@dataclass
class BatchNormState:
    """Affine parameters and running statistics of one batch-norm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=None) -> "BatchNormState":
        dtype = dtype or get_default_dtype()
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


def batch_norm(x: Tensor, state: BatchNormState, mode: str = TRAIN) -> Tensor:
    """Per-channel normalization followed by a learned scale and shift.

    Training mode normalizes with the (biased) batch statistics and moves the
    running statistics towards them by ``momentum``; eval mode uses the
    running statistics only.
    """
    _require_4d(x, "batch_norm")
    _check_mode(mode)
    xd = x.data
    gamma, beta = state.gamma, state.beta
    if gamma.shape != (xd.shape[1],):
        raise DimensionError(f"batch_norm: {xd.shape[1]} channels but gamma has shape {gamma.shape}")
    gd = gamma.data[None, :, None, None]
    axes = (0, 2, 3)

    if mode == TRAIN:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        if m < 2:
            raise DimensionError(
                f"batch_norm: training mode needs at least 2 values per channel, got input {xd.shape}"
            )
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[...] = (1 - mom) * state.running_var + mom * var

        def backward(g):
            dbeta = g.sum(axis=axes)
            dgamma = (g * xhat).sum(axis=axes)
            dxhat = g * gd
            s1 = dxhat.sum(axis=axes)[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
            dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            return (dx, dgamma, dbeta)
    else:
        inv_std = (1.0 / np.sqrt(state.running_var + state.eps)).astype(xd.dtype)
        xhat = (xd - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]

        def backward(g):
            return (g * gd * inv_std[None, :, None, None], (g * xhat).sum(axis=axes), g.sum(axis=axes))

    out = (xhat * gd + beta.data[None, :, None, None]).astype(xd.dtype, copy=False)
    return make_result(out, (x, gamma, beta), backward, "batch_norm")


def dropout(x: Tensor, rate: float, mode: str = TRAIN, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` in training mode."""
    _check_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == EVAL or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def decimate_downsample(x: Tensor, factor: int = 2) -> Tensor:
    """Keep every ``factor``-th row and column, starting at index 0."""
    _require_4d(x, "decimate_downsample")
    if factor < 1:
        raise ConfigError(f"factor must be positive, got {factor}")
    if factor == 1:
        return x
    h, w = x.shape[2:]
    if h % factor or w % factor:
        raise DimensionError(f"decimate_downsample: {h}x{w} not divisible by {factor}")
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, :, ::factor, ::factor] = g
        return (gx,)

    return make_result(np.ascontiguousarray(x.data[:, :, ::factor, ::factor]), (x,), backward, "decimate")


def repeat_upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Replicate every pixel into a ``factor`` x ``factor`` tile."""
    _require_4d(x, "repeat_upsample")
    if factor < 1:
        raise ConfigError(f"factor must be positive, got {factor}")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, "repeat")


def he_normal(shape, fan_in: int, rng: np.random.Generator, dtype=None) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype or get_default_dtype())


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return tensor(np.zeros(shape), requires_grad=requires_grad)
