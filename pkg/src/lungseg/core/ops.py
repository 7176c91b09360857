"""Differentiable primitives over :class:`Tensor`.

Every function takes tensors (or arrays, treated as constants) and returns a
tensor whose backward closure produces the gradient for each input.  Shape
errors raise ``ValueError`` naming the offending dimension.
"""

from __future__ import annotations

import builtins
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result

BCE_EPS = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# Piecewise ops (relu, max selections, clamps, |x|) report which branch each
# element took while a recorder is active; finite-difference checks use this to
# notice when a perturbation crosses a kink.
_branch_log = None


@contextmanager
def record_branches():
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def _note_branch(choice: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(np.ascontiguousarray(choice).tobytes())


def _check_rank4(x: Tensor, name: str = "x") -> None:
    if x.ndim != 4:
        raise ValueError(f"{name} must be rank-4 (N,C,H,W), got shape {x.shape}")


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        for axis, (da, db) in enumerate(zip(a.shape, b.shape)):
            if da != db:
                raise ValueError(f"{what}: dimension {axis} differs ({da} vs {db})")
        raise ValueError(f"{what}: rank differs ({a.shape} vs {b.shape})")


# --------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,Hp,Wp) padded input -> (C*kh*kw, N*ho*wo) patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, padded_shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add a patch matrix back onto a zero (N,C,Hp,Wp) canvas."""
    n, c, hp, wp = padded_shape
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for a in range(kh):
        for b in range(kw):
            out[:, :, a : a + hspan : stride, b : b + wspan : stride] += cols[:, a, b].transpose(1, 0, 2, 3)
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,Cin,H,W) with ``kernel`` (Cout,Cin,Kh,Kw)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_rank4(x)
    _check_rank4(kernel, "kernel")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise ValueError(f"conv2d: input channel dimension {cin} does not match kernel Cin {kcin}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: output spatial size {ho}x{wo} is empty for input {h}x{w}, kernel {kh}x{kw}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias length {bias.shape} does not match Cout {cout}")

    xp = _pad(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = kernel.data.reshape(cout, -1)
    out = (wm @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = gk = gb = None
        if x.requires_grad:
            gxp = _col2im(wm.T @ gm, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if kernel.requires_grad:
            gk = (gm @ cols.T).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, backward, "conv2d")


def conv2d_transpose(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input.

    ``kernel`` has the layout of the forward convolution it transposes,
    (Cx, Cout, Kh, Kw): ``x`` carries Cx channels and the result carries Cout.
    Output size is ``(H-1)*stride - 2*padding + Kh``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_rank4(x)
    _check_rank4(kernel, "kernel")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    n, cx, h, w = x.shape
    kcx, cout, kh, kw = kernel.shape
    if cx != kcx:
        raise ValueError(f"conv2d_transpose: input channel dimension {cx} does not match kernel dim 0 ({kcx})")
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d_transpose: output spatial size {ho}x{wo} is empty")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d_transpose: bias length {bias.shape} does not match Cout {cout}")

    wm = kernel.data.reshape(cx, -1)
    xm = x.data.transpose(1, 0, 2, 3).reshape(cx, -1)
    full = _col2im(wm.T @ xm, (n, cout, hf, wf), kh, kw, stride, h, w)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        cols = _im2col(_pad(g, padding), kh, kw, stride, h, w)
        gx = gk = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((wm @ cols).reshape(cx, n, h, w).transpose(1, 0, 2, 3))
        if kernel.requires_grad:
            gk = (xm @ cols.T).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, backward, "conv2d_transpose")


# --------------------------------------------------------------------------
# pooling


def max_pool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; ties resolve to the first element in scan order."""
    x = as_tensor(x)
    _check_rank4(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"max_pool2d: spatial size {h}x{w} not divisible by k={k}")
    ho, wo = h // k, w // k
    v = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = v.argmax(axis=-1)[..., None]
    _note_branch(idx)
    out = np.take_along_axis(v, idx, axis=-1)[..., 0]

    def backward(g):
        gv = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(gv, idx, g[..., None], axis=-1)
        return (gv.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return make_result(out, (x,), backward, "max_pool2d")


def max_pool2d_same(x) -> Tensor:
    """2x2 max pooling at stride 1, padded bottom/right so H and W are preserved."""
    x = as_tensor(x)
    _check_rank4(x)
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, 1), (0, 1)), constant_values=-np.inf)
    offsets = ((0, 0), (0, 1), (1, 0), (1, 1))
    stack = np.stack([xp[:, :, a : a + h, b : b + w] for a, b in offsets], axis=-1)
    idx = stack.argmax(axis=-1)
    _note_branch(idx)
    out = np.take_along_axis(stack, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for q, (a, b) in enumerate(offsets):
            gp[:, :, a : a + h, b : b + w] += np.where(idx == q, g, 0)
        return (gp[:, :, :h, :w],)

    return make_result(out, (x,), backward, "max_pool2d_same")


def channel_pool(x) -> Tensor:
    """Per-channel spatial max (row 0) and mean (row 1) as an (N, 2, C) matrix."""
    x = as_tensor(x)
    _check_rank4(x)
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=-1)[..., None]
    _note_branch(idx)
    mx = np.take_along_axis(flat, idx, axis=-1)[..., 0]
    out = np.stack([mx, flat.mean(axis=-1)], axis=1)

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx, g[:, 0, :, None], axis=-1)
        gflat += g[:, 1, :, None] / (h * w)
        return (gflat.reshape(n, c, h, w),)

    return make_result(out, (x,), backward, "channel_pool")


def spatial_pool(x) -> Tensor:
    """Across-channel max (channel 0) and mean (channel 1) maps, shape (N, 2, H, W)."""
    x = as_tensor(x)
    _check_rank4(x)
    c = x.shape[1]
    idx = x.data.argmax(axis=1)[:, None]
    _note_branch(idx)
    mx = np.take_along_axis(x.data, idx, axis=1)
    out = np.concatenate([mx, x.data.mean(axis=1, keepdims=True)], axis=1)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g[:, :1], axis=1)
        gx += g[:, 1:2] / c
        return (gx,)

    return make_result(out, (x,), backward, "spatial_pool")


# --------------------------------------------------------------------------
# affine / shape ops


def dense(x, weights, bias=None) -> Tensor:
    """Affine map of (N, D) rows by a (D, M) weight matrix."""
    x, weights = as_tensor(x), as_tensor(weights)
    if x.ndim != 2:
        raise ValueError(f"dense: input must be (N, D), got shape {x.shape}")
    d, m = weights.shape
    if x.shape[1] != d:
        raise ValueError(f"dense: input dimension 1 ({x.shape[1]}) does not match weight rows ({d})")
    out = x.data @ weights.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (m,):
            raise ValueError(f"dense: bias length {bias.shape} does not match M={m}")
        out = out + bias.data

    def backward(g):
        gx = g @ weights.data.T if x.requires_grad else None
        gw = x.data.T @ g if weights.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weights) if bias is None else (x, weights, bias)
    return make_result(out, parents, backward, "dense")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def flatten(x) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def concat_channels(*xs) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    for t in xs:
        _check_rank4(t)
    ref = xs[0].shape
    for t in xs[1:]:
        for axis in (0, 2, 3):
            if t.shape[axis] != ref[axis]:
                raise ValueError(f"concat_channels: dimension {axis} differs ({t.shape[axis]} vs {ref[axis]})")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=1)

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return make_result(out, tuple(xs), backward, "concat_channels")


def hflip(x) -> Tensor:
    """Reverse the last (W) axis."""
    x = as_tensor(x)
    out = np.ascontiguousarray(x.data[..., ::-1])
    return make_result(out, (x,), lambda g: (np.ascontiguousarray(g[..., ::-1]),), "hflip")


# --------------------------------------------------------------------------
# pointwise


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    _note_branch(mask)
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, alpha: float = 0.2) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    _note_branch(mask)
    slope = np.where(mask, 1, alpha).astype(x.dtype)
    out = x.data * slope
    return make_result(out, (x,), lambda g: (g * slope,), "leaky_relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1 / (1 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1 + e)
    # keep results inside the open interval when rounding would hit 0 or 1 exactly
    info = np.finfo(out.dtype)
    return np.clip(out, info.smallest_subnormal, 1 - info.epsneg, out=out)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def channel_scale(x, w) -> Tensor:
    """Multiply every pixel of channel c in item n by ``w[n, c]``."""
    x, w = as_tensor(x), as_tensor(w)
    _check_rank4(x)
    if w.shape != x.shape[:2]:
        raise ValueError(f"channel_scale: weight shape {w.shape} does not match (N, C) = {x.shape[:2]}")
    wb = w.data[:, :, None, None]
    out = x.data * wb

    def backward(g):
        return g * wb, (g * x.data).sum(axis=(2, 3))

    return make_result(out, (x, w), backward, "channel_scale")


def spatial_scale(x, m) -> Tensor:
    """Multiply every channel of ``x`` by a one-channel (N,1,H,W) map."""
    x, m = as_tensor(x), as_tensor(m)
    _check_rank4(x)
    expect = (x.shape[0], 1, x.shape[2], x.shape[3])
    if m.shape != expect:
        raise ValueError(f"spatial_scale: map shape {m.shape} does not match {expect}")
    out = x.data * m.data

    def backward(g):
        return g * m.data, (g * x.data).sum(axis=1, keepdims=True)

    return make_result(out, (x, m), backward, "spatial_scale")


def sum(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    return make_result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, size = x.shape, x.data.size
    return make_result(
        np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / size, shape).copy(),), "mean"
    )


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.dtype.type(c)
    return make_result(x.data * c, (x,), lambda g: (g * c,), "scale")


# --------------------------------------------------------------------------
# normalisation


def batchnorm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, as the running estimate).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_rank4(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: gamma/beta must have length C={c}")
    gb = gamma.data[None, :, None, None]

    if training:
        count = x.data.size // c
        mu = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mu[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv = 1 / np.sqrt(var + x.dtype.type(eps))
        xhat = centered * inv[None, :, None, None]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (count / builtins.max(count - 1, 1))

        def backward(g):
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gbeta = g.sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                dxhat = g * gb
                gx = (inv / count)[None, :, None, None] * (
                    count * dxhat
                    - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                )
            return gx, ggamma, gbeta

    else:
        inv = 1 / np.sqrt(running_var.astype(x.dtype) + x.dtype.type(eps))
        xhat = (x.data - running_mean.astype(x.dtype)[None, :, None, None]) * inv[None, :, None, None]

        def backward(g):
            gx = g * gb * inv[None, :, None, None] if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * gb + beta.data[None, :, None, None]
    return make_result(out, (x, gamma, beta), backward, "batchnorm2d")


# --------------------------------------------------------------------------
# losses


def bce(pred, target, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy with the prediction clamped to [eps, 1-eps]."""
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    t = np.broadcast_to(t, pred.shape).astype(pred.dtype, copy=False)
    lo, hi = pred.dtype.type(eps), pred.dtype.type(1 - eps)
    p = np.clip(pred.data, lo, hi)
    _note_branch((pred.data >= lo) & (pred.data <= hi))
    size = p.size
    loss = -(t * np.log(p) + (1 - t) * np.log(1 - p)).mean()

    def backward(g):
        inside = (pred.data >= lo) & (pred.data <= hi)
        gp = -(t / p - (1 - t) / (1 - p)) / size
        return (g * np.where(inside, gp, 0).astype(pred.dtype, copy=False),)

    return make_result(np.asarray(loss, dtype=pred.dtype), (pred,), backward, "bce")


def l1(a, b) -> Tensor:
    """Mean absolute difference; ``b`` may be a constant array."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "l1")
    diff = a.data - b.data
    _note_branch(np.sign(diff))
    size = diff.size

    def backward(g):
        s = np.sign(diff) * (g / size)
        return s, -s

    return make_result(np.asarray(np.abs(diff).mean()), (a, b), backward, "l1")

