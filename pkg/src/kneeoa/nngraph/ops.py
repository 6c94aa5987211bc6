"""Differentiable operations.

Layout conventions: feature maps are ``(N, C, H, W)``, dense inputs are
``(N, features)``, dense weights are ``(out, in)``.  Every op keeps the dtype
of its first operand.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, emit


def _shape_error(op: str, *shapes) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _need_rank(op: str, x: Tensor, rank: int) -> None:
    if x.data.ndim != rank:
        raise ShapeError(f"{op}: expected a rank-{rank} input, got shape {x.shape}")


# -- elementwise -------------------------------------------------------------

def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    try:
        out = x.data + y.data
    except ValueError:
        raise _shape_error("add", x.shape, y.shape) from None
    xs, ys = x.shape, y.shape
    return emit(out, (x, y), lambda g: (_unbroadcast(g, xs), _unbroadcast(g, ys)))


def sub(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    try:
        out = x.data - y.data
    except ValueError:
        raise _shape_error("sub", x.shape, y.shape) from None
    xs, ys = x.shape, y.shape
    return emit(out, (x, y), lambda g: (_unbroadcast(g, xs), -_unbroadcast(g, ys)))


def mul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    try:
        out = x.data * y.data
    except ValueError:
        raise _shape_error("mul", x.shape, y.shape) from None
    xd, yd = x.data, y.data
    return emit(out, (x, y), lambda g: (_unbroadcast(g * yd, xd.shape), _unbroadcast(g * xd, yd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return emit(x.data * c, (x,), lambda g: (g * c,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", old, shape) from None
    return emit(out, (x,), lambda g: (g.reshape(old),))


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return emit(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return emit(np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return emit(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    xd = x.data

    def back(g):
        return (g * (sig * (1 + xd * (1 - sig))),)

    return emit(xd * sig, (x,), back)


# -- dense / conv ------------------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape (N, in) and ``w`` of shape (out, in)."""
    _need_rank("dense", x, 2)
    if w.data.ndim != 2 or w.shape[1] != x.shape[1]:
        raise _shape_error("dense", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise _shape_error("dense", w.shape, b.shape)
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def back(g):
        gx = g @ wd
        gw = g.T @ xd
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return emit(out, inputs, back)


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation.

    Args:
        x: input maps, (N, C, H, W).
        k: kernels, (O, C, kh, kw).
        b: optional per-output-channel bias, (O,).
        stride: step between windows.
        pad: zero padding on every border.
    """
    _need_rank("conv2d", x, 4)
    if k.data.ndim != 4 or k.shape[1] != x.shape[1]:
        raise _shape_error("conv2d", x.shape, k.shape)
    if b is not None and b.shape != (k.shape[0],):
        raise _shape_error("conv2d", k.shape, b.shape)
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise _shape_error("conv2d", x.shape, k.shape)
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = k.data.reshape(o, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (gmat.T @ cols).reshape(k.shape)
        gcols = (gmat @ kmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        if b is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    inputs = (x, k) if b is None else (x, k, b)
    return emit(out, inputs, back)


# -- pooling / resampling ----------------------------------------------------

def _blocks(op: str, x: Tensor, kernel: int) -> np.ndarray:
    _need_rank(op, x, 4)
    n, c, h, w = x.shape
    if kernel < 1 or h % kernel or w % kernel:
        raise ShapeError(f"{op}: spatial shape {(h, w)} not divisible by kernel {kernel}")
    return x.data.reshape(n, c, h // kernel, kernel, w // kernel, kernel)


def avg_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    blocks = _blocks("avg_pool2d", x, kernel)
    area = kernel * kernel

    def back(g):
        return (np.repeat(np.repeat(g / area, kernel, axis=2), kernel, axis=3),)

    return emit(blocks.mean(axis=(3, 5)), (x,), back)


def max_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    blocks = _blocks("max_pool2d", x, kernel)
    n, c, hb, _, wb, _ = blocks.shape
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hb, wb, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, hb, wb, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(x.shape),)

    return emit(out, (x,), back)


def upsample_nearest2x(x: Tensor) -> Tensor:
    _need_rank("upsample_nearest2x", x, 4)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return emit(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def global_avg_pool(x: Tensor) -> Tensor:
    _need_rank("global_avg_pool", x, 4)
    n, c, h, w = x.shape
    return emit(x.data.mean(axis=(2, 3)), (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


def concat(x: Tensor, y: Tensor, axis: int = 1) -> Tensor:
    xs, ys = x.shape, y.shape
    if len(xs) != len(ys) or any(a != b for i, (a, b) in enumerate(zip(xs, ys)) if i != axis % len(xs)):
        raise _shape_error("concat", xs, ys)
    split = xs[axis]
    return emit(np.concatenate([x.data, y.data], axis=axis), (x, y), lambda g: tuple(np.split(g, [split], axis=axis)))


# -- normalization / embeddings ----------------------------------------------

def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes."""
    _need_rank("instance_norm", x, 4)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise _shape_error("instance_norm", x.shape, gamma.shape, beta.shape)
    xd = x.data
    mu = xd.mean(axis=(2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def back(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=(2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=(2, 3), keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return emit(out, (x, gamma, beta), back)


def sinusoidal_embed(t, dim: int) -> Tensor:
    """Timestep features, ``[sin(t w0), cos(t w0), sin(t w1), ...]``.

    Angular frequencies are geometrically spaced, ``w_k = 10000 ** (-k / (dim/2 - 1))``,
    so wavelengths run from 2*pi up to 2*pi * 1e4.
    """
    if dim < 2 or dim % 2:
        raise ShapeError(f"sinusoidal_embed: dim must be an even number >= 2, got {dim}")
    t = as_tensor(t)
    half = dim // 2
    expo = np.arange(half) / max(half - 1, 1)
    freqs = (10000.0 ** -expo).astype(t.dtype)
    tv = t.data.reshape(-1)
    ang = tv[:, None] * freqs[None, :]
    out = np.empty((tv.size, dim), dtype=t.dtype)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)

    def back(g):
        gt = (g[:, 0::2] * np.cos(ang) - g[:, 1::2] * np.sin(ang)) @ freqs
        return (gt.reshape(t.shape),)

    return emit(out, (t,), back)


# -- losses --------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    _need_rank("softmax_cross_entropy", logits, 2)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape != (n,):
        raise _shape_error("softmax_cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {c})")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return emit(np.asarray(loss, dtype=logits.dtype), (logits,), back)


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("mse", a.shape, b.shape)
    diff = a.data - b.data
    n = diff.size

    def back(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return emit(np.asarray((diff * diff).mean(), dtype=a.dtype), (a, b), back)
