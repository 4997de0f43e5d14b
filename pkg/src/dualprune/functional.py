"""Differentiable ops on NCHW tensors.

Convolutions go through a strided window view of the padded input, which
keeps the direct-convolution semantics without materialising an explicit
im2col matrix on the forward pass.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dualprune.tensor import Function, ShapeError, Tensor

__all__ = [
    "add",
    "add_scalar",
    "avgpool2d",
    "batch_norm2d",
    "channel_mask",
    "concat_channels",
    "conv2d",
    "conv_output_size",
    "depthwise_conv2d",
    "mean",
    "mse_loss",
    "mul",
    "pointwise_conv2d",
    "relu",
    "scale",
    "sum",
    "upsample_nearest2d",
]


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_nchw(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects a 4-d NCHW input, got shape {x.shape}")


def _windows(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, tuple[int, ...]]:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"kernel {k}x{k} larger than padded input {x.shape[2]}x{x.shape[3]}")
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win, x.shape


def _scatter_windows(dcols: np.ndarray, padded_shape, k: int, stride: int, padding: int) -> np.ndarray:
    # dcols: (N, H', W', C, K, K) -> gradient of the unpadded input
    ho, wo = dcols.shape[1:3]
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    view = dxp.transpose(0, 2, 3, 1)
    for i in range(k):
        for j in range(k):
            view[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[..., i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp)


def _shifted(xp: np.ndarray, i: int, j: int, ho: int, wo: int, stride: int) -> np.ndarray:
    return xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


class Conv2d(Function):
    def forward(self, x, w, b=None, *, stride=1, padding=0):
        _check_nchw(x, "conv2d")
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv2d weight must be [Cout, Cin, K, K], got {w.shape}")
        if w.shape[1] != x.shape[1]:
            raise ShapeError(f"conv2d weight {w.shape} does not match input {x.shape} (Cin {w.shape[1]} != {x.shape[1]})")
        if b is not None and b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d bias {b.shape} does not match weight {w.shape}")
        if stride < 1 or padding < 0:
            raise ShapeError(f"invalid stride={stride} / padding={padding}")
        k = w.shape[2]
        win, self.padded_shape = _windows(x, k, stride, padding)
        self.win, self.w, self.k, self.stride, self.padding = win, w, k, stride, padding
        self.has_bias = b is not None
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if b is not None:
            out = out + b[None, :, None, None]
        return np.ascontiguousarray(out)

    def backward(self, g):
        gx = gw = gb = None
        if self.needs_grad[0]:
            dcols = np.tensordot(g, self.w, axes=([1], [0]))  # N, H', W', C, K, K
            gx = _scatter_windows(dcols, self.padded_shape, self.k, self.stride, self.padding)
        if self.needs_grad[1]:
            gw = np.tensordot(g, self.win, axes=([0, 2, 3], [0, 2, 3]))
        if self.has_bias and self.needs_grad[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if self.has_bias else (gx, gw)


class DepthwiseConv2d(Function):
    # per-channel filters: accumulate K*K shifted slices instead of a window contraction
    def forward(self, x, w, b=None, *, stride=1, padding=0):
        _check_nchw(x, "depthwise_conv2d")
        if w.ndim != 4 or w.shape[1] != 1 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"depthwise weight must be [C, 1, K, K], got {w.shape}")
        if w.shape[0] != x.shape[1]:
            raise ShapeError(f"depthwise weight {w.shape} has {w.shape[0]} channels, input {x.shape} has {x.shape[1]}")
        if b is not None and b.shape != (w.shape[0],):
            raise ShapeError(f"depthwise bias {b.shape} does not match weight {w.shape}")
        if stride < 1 or padding < 0:
            raise ShapeError(f"invalid stride={stride} / padding={padding}")
        k = w.shape[2]
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        if xp.shape[2] < k or xp.shape[3] < k:
            raise ShapeError(f"kernel {k}x{k} larger than padded input {xp.shape[2]}x{xp.shape[3]}")
        ho = (xp.shape[2] - k) // stride + 1
        wo = (xp.shape[3] - k) // stride + 1
        self.xp, self.w, self.k, self.stride, self.padding = xp, w, k, stride, padding
        self.has_bias = b is not None
        out = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=np.result_type(x, w))
        for i in range(k):
            for j in range(k):
                out += _shifted(xp, i, j, ho, wo, stride) * w[None, :, 0, i, j, None, None]
        if b is not None:
            out += b[None, :, None, None]
        return out

    def backward(self, g):
        gx = gw = gb = None
        k, s = self.k, self.stride
        ho, wo = g.shape[2:]
        if self.needs_grad[0]:
            dxp = np.zeros(self.xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    _shifted(dxp, i, j, ho, wo, s)[...] += g * self.w[None, :, 0, i, j, None, None]
            p = self.padding
            gx = np.ascontiguousarray(dxp[:, :, p:-p, p:-p]) if p else dxp
        if self.needs_grad[1]:
            gw = np.empty_like(self.w)
            for i in range(k):
                for j in range(k):
                    gw[:, 0, i, j] = (g * _shifted(self.xp, i, j, ho, wo, s)).sum(axis=(0, 2, 3))
        if self.has_bias and self.needs_grad[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if self.has_bias else (gx, gw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    args = (x, weight) if bias is None else (x, weight, bias)
    return Conv2d.apply(*args, stride=stride, padding=padding)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    args = (x, weight) if bias is None else (x, weight, bias)
    return DepthwiseConv2d.apply(*args, stride=stride, padding=padding)


def pointwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if weight.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise weight must be [Cout, Cin, 1, 1], got {weight.shape}")
    return conv2d(x, weight, bias, stride=1, padding=0)


class BatchNorm2d(Function):
    def forward(self, x, scale, shift, *, running_mean, running_var, training, momentum=0.1, eps=1e-5):
        _check_nchw(x, "batch_norm2d")
        c = x.shape[1]
        if scale.shape != (c,) or shift.shape != (c,) or running_mean.shape != (c,):
            raise ShapeError(f"batch_norm2d: input {x.shape} has {c} channels, scale {scale.shape}, shift {shift.shape}")
        self.training = training
        if training:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            if m < 2:
                raise ShapeError(f"batch_norm2d in training mode needs N*H*W >= 2, got input {x.shape}")
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            assert np.all(var >= 0)
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * (m / (m - 1))
            self.m = m
        else:
            mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
        inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
        self.xhat, self.inv, self.scale = xhat, inv, scale
        return xhat * scale[None, :, None, None] + shift[None, :, None, None]

    def backward(self, g):
        xhat, inv = self.xhat, self.inv
        gscale = (g * xhat).sum(axis=(0, 2, 3)) if self.needs_grad[1] else None
        gshift = g.sum(axis=(0, 2, 3)) if self.needs_grad[2] else None
        gx = None
        if self.needs_grad[0]:
            dxhat = g * self.scale[None, :, None, None]
            if self.training:
                s1 = dxhat.mean(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
                gx = (dxhat - s1 - xhat * s2) * inv[None, :, None, None]
            else:
                gx = dxhat * inv[None, :, None, None]
        return gx, gscale, gshift


def batch_norm2d(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalise per channel, then apply the caller's (possibly masked) affine.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place.
    """
    return BatchNorm2d.apply(
        x, scale, shift, running_mean=running_mean, running_var=running_var, training=training, momentum=momentum, eps=eps
    )


class ChannelMask(Function):
    # forward: hard indicator; backward: clipped straight-through estimate
    def forward(self, gamma, tau, *, epsilon_band):
        if tau.shape != (1,):
            raise ShapeError(f"threshold must have shape (1,), got {tau.shape}")
        z = np.abs(gamma) - tau[0]
        self.band = (np.abs(z) <= epsilon_band).astype(gamma.dtype)
        self.sign = np.sign(gamma)
        return (z >= 0).astype(gamma.dtype)

    def backward(self, g):
        ggamma = g * self.sign * self.band if self.needs_grad[0] else None
        gtau = -np.sum(g * self.band, keepdims=True).reshape(1) if self.needs_grad[1] else None
        return ggamma, gtau


def channel_mask(gamma: Tensor, tau: Tensor, epsilon_band: float = 1.0) -> Tensor:
    """Binary keep-mask ``|gamma| - tau >= 0`` with a banded straight-through gradient."""
    return ChannelMask.apply(gamma, tau, epsilon_band=epsilon_band)


class Add(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        return a + b

    def backward(self, g):
        return g, g


class AddScalar(Function):
    def forward(self, a, *, value):
        return a + a.dtype.type(value)

    def backward(self, g):
        return (g,)


class Mul(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return g * self.b, g * self.a


class Scale(Function):
    def forward(self, a, *, factor):
        self.factor = a.dtype.type(factor)
        return a * self.factor

    def backward(self, g):
        return (g * self.factor,)


class Sum(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.sum(), dtype=a.dtype).reshape(())

    def backward(self, g):
        return (np.broadcast_to(g, self.shape).astype(g.dtype),)


class Mean(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.mean(), dtype=a.dtype).reshape(())

    def backward(self, g):
        return (np.full(self.shape, g / np.prod(self.shape), dtype=g.dtype),)


class ReLU(Function):
    def forward(self, x):
        self.pos = x > 0
        return np.where(self.pos, x, x.dtype.type(0))

    def backward(self, g):
        return (np.where(self.pos, g, g.dtype.type(0)),)


class MSELoss(Function):
    def forward(self, pred, target):
        if pred.shape != target.shape:
            raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
        self.diff = pred - target
        return np.asarray(np.mean(self.diff * self.diff), dtype=pred.dtype).reshape(())

    def backward(self, g):
        gp = g * 2.0 * self.diff / self.diff.size
        gp = gp.astype(self.diff.dtype)
        return gp, -gp


class AvgPool2d(Function):
    def forward(self, x, *, factor):
        _check_nchw(x, "avgpool2d")
        n, c, h, w = x.shape
        if h % factor or w % factor:
            raise ShapeError(f"avgpool2d: spatial size {h}x{w} not divisible by {factor}")
        self.factor = factor
        return x.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))

    def backward(self, g):
        f = self.factor
        up = np.repeat(np.repeat(g, f, axis=2), f, axis=3)
        return (up / g.dtype.type(f * f),)


class UpsampleNearest2d(Function):
    def forward(self, x, *, factor):
        _check_nchw(x, "upsample_nearest2d")
        self.factor = factor
        return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)

    def backward(self, g):
        f = self.factor
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5)),)


class ConcatChannels(Function):
    def forward(self, *xs):
        ref = xs[0].shape
        for x in xs:
            _check_nchw(x, "concat_channels")
            if x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
                raise ShapeError(f"concat_channels: shapes {ref} and {x.shape} differ outside the channel axis")
        self.splits = np.cumsum([x.shape[1] for x in xs])[:-1]
        return np.concatenate(xs, axis=1)

    def backward(self, g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, self.splits, axis=1))


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def add_scalar(a: Tensor, value: float) -> Tensor:
    return AddScalar.apply(a, value=value)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def sum(a: Tensor) -> Tensor:  # noqa: A001
    return Sum.apply(a)


def mean(a: Tensor) -> Tensor:
    return Mean.apply(a)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    return MSELoss.apply(pred, target)


def avgpool2d(x: Tensor, factor: int = 2) -> Tensor:
    return AvgPool2d.apply(x, factor=factor)


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    return UpsampleNearest2d.apply(x, factor=factor)


def concat_channels(*xs: Tensor) -> Tensor:
    return ConcatChannels.apply(*xs)
