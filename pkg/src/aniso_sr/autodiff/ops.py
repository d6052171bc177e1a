"""Differentiable operations used by the autoencoder.

Every op takes and returns :class:`Tensor` objects and records a backward
closure when any input requires a gradient. Spatial tensors are NCHW.
"""
from __future__ import annotations

import numpy as np

from .tensor import GradientError, ShapeError, Tensor, accumulate, make_result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# convolution


def _pad_channel_major(x: np.ndarray, padding: int) -> np.ndarray:
    # NCHW -> zero-padded CNHW, the layout the shifted-GEMM kernels expect
    n, c, h, w = x.shape
    out = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding:padding + h, padding:padding + w] = x.transpose(1, 0, 2, 3)
    return out


def _gather_index(n: int, hp: int, wp: int, ho: int, wo: int, k: int) -> np.ndarray:
    # flat positions of every (tap, output pixel) pair in the padded CNHW buffer
    base = (np.arange(n)[:, None, None] * (hp * wp)
            + np.arange(ho)[None, :, None] * wp
            + np.arange(wo)[None, None, :]).ravel()
    offsets = np.array([dy * wp + dx for dy in range(k) for dx in range(k)])
    return offsets[:, None] + base[None, :]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 1) -> Tensor:
    """Stride-1 2D cross-correlation with zero padding (NCHW, OCkk).

    Two equivalent kernels are used. For large feature maps the padded
    input is flattened to ``(C, N*Hp*Wp)`` and every tap ``(dy, dx)`` becomes
    a constant column offset ``dy*Wp + dx``, so the convolution is ``k*k``
    GEMMs over contiguous column windows with no im2col copy (outputs that
    land on padding columns are computed and dropped). For single-channel
    inputs and small maps an explicit im2col gather feeding one GEMM is
    cheaper.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OCkk weights, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, wc, kh, kw = w.shape
    if wc != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {wc}")
    if kh != kw:
        raise ShapeError(f"conv2d needs square kernels, got {kh}x{kw}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match {o} output channels")
    k = kh
    hp, wp = h + 2 * padding, wd + 2 * padding
    ho, wo = hp - k + 1, wp - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {k} larger than padded input {hp}x{wp}")

    dtype = x.data.dtype
    wdata = w.data.astype(dtype, copy=False)
    xflat = _pad_channel_major(x.data, padding).reshape(c, -1)
    total = xflat.shape[1]
    use_gather = c == 1 or ho * wo <= 64

    if use_gather:
        idx = _gather_index(n, hp, wp, ho, wo, k)
        col = xflat[:, idx].reshape(c * k * k, -1)  # rows ordered (c, dy, dx)
        wmat = wdata.reshape(o, c * k * k)
        out = (wmat @ col).reshape(o, n, ho, wo)
    else:
        span = total - ((k - 1) * wp + (k - 1))
        offsets = [dy * wp + dx for dy in range(k) for dx in range(k)]
        taps = [np.ascontiguousarray(wdata[:, :, dy, dx]) for dy in range(k) for dx in range(k)]
        acc = np.zeros((o, total), dtype=dtype)
        head = acc[:, :span]
        for tap, off in zip(taps, offsets):
            head += tap @ xflat[:, off:off + span]
        out = acc.reshape(o, n, hp, wp)[:, :, :ho, :wo]
    if b is not None:
        out = out + b.data.astype(dtype, copy=False)[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def _backward_gather(g: np.ndarray) -> None:
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        if x.requires_grad:
            dcol = (wmat.T @ gmat).reshape(c, k * k, -1)
            dx = np.zeros((c, total), dtype=dtype)
            for t in range(k * k):
                dx[:, idx[t]] += dcol[:, t]
            dx = dx.reshape(c, n, hp, wp)[:, :, padding:padding + h, padding:padding + wd]
            accumulate(x, dx.transpose(1, 0, 2, 3))
        if w.requires_grad:
            accumulate(w, (gmat @ col.T).reshape(o, c, k, k))
        if b is not None and b.requires_grad:
            accumulate(b, gmat.sum(axis=1, dtype=np.float64))

    def _backward_shift(g: np.ndarray) -> None:
        gfull = np.zeros((o, n, hp, wp), dtype=dtype)
        gfull[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        gflat = gfull.reshape(o, -1)[:, :span]
        if x.requires_grad:
            dx = np.zeros((c, total), dtype=dtype)
            for tap, off in zip(taps, offsets):
                dx[:, off:off + span] += tap.T @ gflat
            dx = dx.reshape(c, n, hp, wp)[:, :, padding:padding + h, padding:padding + wd]
            accumulate(x, dx.transpose(1, 0, 2, 3))
        if w.requires_grad:
            dw = np.empty_like(wdata)
            for i, off in enumerate(offsets):
                dy, dxk = divmod(i, k)
                dw[:, :, dy, dxk] = gflat @ xflat[:, off:off + span].T
            accumulate(w, dw)
        if b is not None and b.requires_grad:
            accumulate(b, g.sum(axis=(0, 2, 3), dtype=np.float64))

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, _backward_gather if use_gather else _backward_shift)


# --------------------------------------------------------------------------
# elementwise / pointwise


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    data = x.data
    # x == 0 takes the negative-side slope, the usual subgradient choice
    neg = data <= 0
    out = np.where(neg, data * data.dtype.type(slope), data)

    def _backward(g: np.ndarray) -> None:
        accumulate(x, np.where(neg, g * g.dtype.type(slope), g))

    return make_result(out, (x,), _backward)


def clamp(x: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient passes only where ``lo <= x <= hi``."""
    if lo > hi:
        raise ValueError(f"clamp bounds out of order: {lo} > {hi}")
    data = x.data
    inside = (data >= lo) & (data <= hi)
    out = np.clip(data, data.dtype.type(lo), data.dtype.type(hi))

    def _backward(g: np.ndarray) -> None:
        accumulate(x, np.where(inside, g, g.dtype.type(0)))

    return make_result(out, (x,), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")

    def _backward(g: np.ndarray) -> None:
        accumulate(a, g)
        accumulate(b, g)

    return make_result(a.data + b.data, (a, b), _backward)


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.dtype.type(factor)

    def _backward(g: np.ndarray) -> None:
        accumulate(x, g * f)

    return make_result(x.data * f, (x,), _backward)


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)

    def _backward(g: np.ndarray) -> None:
        accumulate(x, np.full(x.shape, g.reshape(()), dtype=x.dtype))

    return make_result(out, (x,), _backward)


# --------------------------------------------------------------------------
# normalization


class BatchNormStats:
    """Running mean/variance of one batch-norm layer, stored in float32."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Training mode normalizes with the biased batch variance and updates
    the running buffers with the unbiased one; eval mode applies the
    running buffers.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,) or stats.mean.shape != (c,):
        raise ShapeError(f"batch_norm2d parameters do not match {c} channels")
    dtype = x.dtype
    count = n * h * w
    if training:
        if count < 2:
            raise ShapeError("batch_norm2d in train mode needs more than one value per channel")
        xd = x.data.astype(np.float64)
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        stats.mean = ((1.0 - momentum) * stats.mean.astype(np.float64)
                      + momentum * mean).astype(np.float32)
        stats.var = ((1.0 - momentum) * stats.var.astype(np.float64)
                     + momentum * var * count / (count - 1)).astype(np.float32)
    else:
        mean, var = stats.mean.astype(np.float64), stats.var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mean.astype(dtype)[None, :, None, None])
            * inv_std.astype(dtype)[None, :, None, None])
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def _backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64))
        if beta.requires_grad:
            accumulate(beta, g.sum(axis=(0, 2, 3), dtype=np.float64))
        if not x.requires_grad:
            return
        scale_c = (gamma.data.astype(np.float64) * inv_std).astype(dtype)[None, :, None, None]
        if training:
            g_mean = g.mean(axis=(0, 2, 3), dtype=np.float64).astype(dtype)[None, :, None, None]
            gx_mean = (g * xhat).mean(axis=(0, 2, 3), dtype=np.float64).astype(dtype)[None, :, None, None]
            accumulate(x, scale_c * (g - g_mean - xhat * gx_mean))
        else:
            accumulate(x, g * scale_c)

    return make_result(out.astype(dtype, copy=False), (x, gamma, beta), _backward)


# --------------------------------------------------------------------------
# resampling


def avg_pool2d(x: Tensor, window: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"avg_pool2d needs spatial dims divisible by {window}, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // window, window, w // window, window)
    out = blocks.mean(axis=(3, 5), dtype=np.float64).astype(x.dtype)
    inv = x.dtype.type(1.0 / (window * window))

    def _backward(g: np.ndarray) -> None:
        spread = np.broadcast_to((g * inv)[:, :, :, None, :, None],
                                 (n, c, h // window, window, w // window, window))
        accumulate(x, spread.reshape(n, c, h, w))

    return make_result(out, (x,), _backward)


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None],
                          (n, c, h, factor, w, factor)).reshape(n, c, h * factor, w * factor)

    def _backward(g: np.ndarray) -> None:
        accumulate(x, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return make_result(np.ascontiguousarray(out), (x,), _backward)


# --------------------------------------------------------------------------
# loss


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error, accumulated in float64."""
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def _backward(g: np.ndarray) -> None:
        coef = 2.0 * float(g.reshape(())) / n
        gd = (diff * coef)
        accumulate(pred, gd.astype(pred.dtype))
        if target.requires_grad:
            accumulate(target, (-gd).astype(target.dtype))

    return make_result(out, (pred, target), _backward)


def require_grad(t: Tensor) -> np.ndarray:
    if t.grad is None:
        raise GradientError(f"parameter {t.name or t.shape} has no gradient")
    return t.grad
