"""Differentiable operators over NCHW tensors.

Each op computes its forward value with numpy and registers a closure that maps
the output gradient to input gradients.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, get_default_dtype, make_node

PADDINGS = ("same", "valid")


class _KinkTracker:
    """Smallest distance to a non-differentiable point seen while active."""

    def __init__(self):
        self.active = False
        self.distance = math.inf

    def record(self, value: float) -> None:
        if value < self.distance:
            self.distance = value


_kinks = _KinkTracker()


@contextlib.contextmanager
def track_kinks() -> Iterator[_KinkTracker]:
    """Record how close relu inputs and maxpool window winners come to a tie."""
    _kinks.active = True
    _kinks.distance = math.inf
    try:
        yield _kinks
    finally:
        _kinks.active = False


def _check_stride(stride: int) -> None:
    if int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride}")


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    # odd padding puts the extra pixel on the bottom/right
    return out, total // 2, total - total // 2


def _out_and_pads(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if padding == "same":
        ho, pt, pb = _same_pads(h, kh, stride)
        wo, pl, pr = _same_pads(w, kw, stride)
    elif padding == "valid":
        if kh > h or kw > w:
            raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be one of {PADDINGS}, got {padding!r}")
    if kh > h + pt + pb or kw > w + pl + pr:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input")
    return ho, wo, (pt, pb, pl, pr)


def _pad(x: np.ndarray, pads, value=0.0) -> np.ndarray:
    pt, pb, pl, pr = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=value)


def _unpad(x: np.ndarray, pads) -> np.ndarray:
    pt, pb, pl, pr = pads
    h, w = x.shape[2], x.shape[3]
    return x[:, :, pt:h - pb, pl:w - pr]


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Strided (N, C, Ho, Wo, kh, kw) view of sliding windows."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def _im2col(xp, kh, kw, stride, ho, wo) -> np.ndarray:
    n, c = xp.shape[:2]
    if kh == kw == stride and xp.shape[2] == ho * kh and xp.shape[3] == wo * kw:
        cols = xp.reshape(n, c, ho, kh, wo, kw).transpose(0, 1, 3, 5, 2, 4)
    else:
        cols = _windows(xp, kh, kw, stride, ho, wo).transpose(0, 1, 4, 5, 2, 3)
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape, kh, kw, stride, ho, wo) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add columns back onto an (N, C, H, W) grid."""
    n, c, h, w = shape
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    if kh == kw == stride and h == ho * kh and w == wo * kw:
        return np.ascontiguousarray(cols.transpose(0, 1, 4, 2, 5, 3)).reshape(n, c, h, w)
    out = np.zeros(shape, dtype=cols.dtype)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + span_h:stride, j:j + span_w:stride] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of ``x`` (N, Cin, H, W) with ``w`` (Cout, Cin, kh, kw)."""
    _check_stride(stride)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise DimensionError(f"input has {cin} channels but kernel expects {wcin}")
    ho, wo, pads = _out_and_pads(h, wd, kh, kw, stride, padding)
    wmat = w.data.reshape(cout, cin * kh * kw)
    if kh == kw == 1 and stride == 1:
        cols = x.data.reshape(n, cin, h * wd)
        xp_shape = x.shape
    else:
        xp = _pad(x.data, pads)
        xp_shape = xp.shape
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)

    def backward(g):
        g = g.reshape(n, cout, ho * wo)
        gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g)
            if kh == kw == 1 and stride == 1:
                gx = gcols.reshape(x.shape)
            else:
                gx = _unpad(_col2im(gcols, xp_shape, kh, kw, stride, ho, wo), pads)
        return gx, gw

    return make_node("conv2d", out, (x, w), backward)


def conv2d_transpose(x: Tensor, w: Tensor, stride: int = 2) -> Tensor:
    """Adjoint of valid ``conv2d``; ``w`` is (Cin, Cout, kh, kw).

    Output spatial size is ``(H - 1) * stride + k``, i.e. ``H * stride`` when
    the kernel equals the stride.
    """
    _check_stride(stride)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d_transpose expects 4-D input and weight")
    n, cin, h, wd = x.shape
    wcin, cout, kh, kw = w.shape
    if cin != wcin:
        raise DimensionError(f"input has {cin} channels but kernel expects {wcin}")
    out_shape = (n, cout, (h - 1) * stride + kh, (wd - 1) * stride + kw)
    wmat = w.data.reshape(cin, cout * kh * kw)
    xf = x.data.reshape(n, cin, h * wd)
    out = _col2im(np.matmul(wmat.T, xf), out_shape, kh, kw, stride, h, wd)

    def backward(g):
        gcols = _im2col(g, kh, kw, stride, h, wd)
        gx = np.matmul(wmat, gcols).reshape(x.shape) if x.requires_grad else None
        gw = np.matmul(xf, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        return gx, gw

    return make_node("conv2d_transpose", out, (x, w), backward)


def maxpool2d(x: Tensor, k: int, stride: int | None = None, padding: str = "valid") -> Tensor:
    """Window maximum; ties go to the first element in row-major window order."""
    if k < 1:
        raise ValueError(f"window must be >= 1, got {k}")
    stride = k if stride is None else stride
    _check_stride(stride)
    n, c, h, w = x.shape
    ho, wo, pads = _out_and_pads(h, w, k, k, stride, padding)
    xp = _pad(x.data, pads, value=-np.inf)
    flat = _windows(xp, k, k, stride, ho, wo).reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if _kinks.active and k * k > 1:
        top2 = np.partition(flat, k * k - 2, axis=-1)[..., -2:]
        gap = top2[..., 1] - top2[..., 0]
        # exact ties come from zeroed relu outputs and stay tied under small nudges
        gap = gap[gap > 0]
        if gap.size:
            _kinks.record(float(gap.min()))
    del flat

    def backward(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                hit = idx == i * k + j
                gp[:, :, i:i + span_h:stride, j:j + span_w:stride] += np.where(hit, g, 0)
        return (_unpad(gp, pads),)

    return make_node("maxpool2d", out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise DimensionError("global_avg_pool needs a non-empty spatial map")
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return make_node("global_avg_pool", out, (x,), backward)


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, name: str = "bn", momentum: float = 0.9, eps: float = 1e-5):
        dtype = get_default_dtype()
        return cls(
            gamma=Tensor(np.ones(channels, dtype), requires_grad=True, name=f"{name}.gamma"),
            beta=Tensor(np.zeros(channels, dtype), requires_grad=True, name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]


def batch_norm(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalization over (N, H, W); updates running stats in train mode."""
    c = x.shape[1]
    if c != state.channels:
        raise DimensionError(f"batch norm over {state.channels} channels got {c}")
    gamma, beta = state.gamma, state.beta
    shape = (1, c, 1, 1)
    if mode == "train":
        count = x.data.size // c
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(shape)
        var = np.mean(centered * centered, axis=(0, 2, 3))
        state.running_mean *= state.momentum
        state.running_mean += (1 - state.momentum) * mean
        state.running_var *= state.momentum
        state.running_var += (1 - state.momentum) * var
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
        centered = x.data - mean.reshape(shape)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv = (1.0 / np.sqrt(var + state.eps)).astype(x.data.dtype)
    xhat = centered * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        ggamma = np.sum(g * xhat, axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            scale = (gamma.data * inv).reshape(shape)
            if mode == "train":
                sum_g = g.sum(axis=(0, 2, 3)) if gbeta is None else gbeta
                sum_gx = np.sum(g * xhat, axis=(0, 2, 3)) if ggamma is None else ggamma
                gx = scale * (g - (sum_g / count).reshape(shape) - xhat * (sum_gx / count).reshape(shape))
            else:
                gx = g * scale
        return gx, ggamma, gbeta

    return make_node("batch_norm", out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    if _kinks.active and x.data.size:
        _kinks.record(float(np.min(np.abs(x.data))))
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return make_node("relu", out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add needs identical shapes, got {a.shape} and {b.shape}")

    def backward(g):
        return g, g

    return make_node("add", a.data + b.data, (a, b), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias vector of length C to an (N, C, H, W) tensor."""
    if b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise DimensionError(f"bias {b.shape} does not match {x.shape[1]} channels")
    out = x.data + b.data.reshape(1, -1, 1, 1)

    def backward(g):
        return g, g.sum(axis=(0, 2, 3))

    return make_node("add_bias", out, (x, b), backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise DimensionError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors:
        if t.data.ndim != 4 or (t.shape[0], *t.shape[2:]) != (ref[0], *ref[2:]):
            raise DimensionError(f"concat needs matching N,H,W; got {ref} and {t.shape}")
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        return [g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]

    return make_node("concat_channels", out, tuple(tensors), backward)


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map of (N, C, 1, 1) features through a (C, K) matrix plus bias."""
    n, c, h, wd = x.shape
    if (h, wd) != (1, 1):
        raise DimensionError(f"fully_connected expects 1x1 spatial input, got {h}x{wd}")
    if w.shape[0] != c or b.shape != (w.shape[1],):
        raise DimensionError(f"weight {w.shape} / bias {b.shape} incompatible with {c} features")
    flat = x.data.reshape(n, c)
    out = (flat @ w.data + b.data).reshape(n, -1, 1, 1)

    def backward(g):
        g2 = g.reshape(n, -1)
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return make_node("fully_connected", out, (x, w, b), backward)


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels, reduction: str | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits).

    ``per_sample_mean`` takes (N, K, 1, 1) logits and N labels;
    ``per_pixel_mean`` takes (N, K, H, W) logits and (N, H, W) labels.
    """
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if reduction is None:
        reduction = "per_sample_mean" if (h, w) == (1, 1) and labels.ndim == 1 else "per_pixel_mean"
    if reduction == "per_sample_mean":
        if (h, w) != (1, 1) or labels.shape != (n,):
            raise DimensionError(f"per_sample_mean needs (N,K,1,1) logits and N labels")
        labels = labels.reshape(n, 1, 1)
    elif reduction == "per_pixel_mean":
        if labels.shape != (n, h, w):
            raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    if labels.dtype.kind not in "iu":
        raise ValueError("labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    count = labels.size
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, labels[:, None].astype(np.intp), axis=1)
    loss = np.asarray(-picked.sum() / count, dtype=logits.data.dtype)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, labels[:, None].astype(np.intp),
                          np.take_along_axis(grad, labels[:, None].astype(np.intp), axis=1) - 1, axis=1)
        return (grad * (g / count),)

    return make_node("softmax_cross_entropy", loss, (logits,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node("sum", np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    def backward(g):
        return (g * factor,)

    return make_node("scale", x.data * factor, (x,), backward)


def inner(x: Tensor, y: np.ndarray) -> Tensor:
    """Scalar <x, y> against a constant array; handy for turning tensors into losses."""
    y = np.asarray(y, dtype=x.data.dtype)

    def backward(g):
        return (g * y,)

    return make_node("inner", np.asarray(np.sum(x.data * y), dtype=x.data.dtype), (x,), backward)
