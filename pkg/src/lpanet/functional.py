"""Differentiable primitives used by the alignment stack.

Tensors are unbatched: feature maps are ``[C, H, W]``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DimensionError, ValidationError
from .tensor import Tensor, as_tensor, make_result

BCE_EPS = 1e-7
KL_EPS = 1e-12


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return make_result(a.data @ b.data, (a, b), backward, "matmul")


def pad2d(x, pad) -> Tensor:
    """Zero-pad the two trailing axes. ``pad`` is an int or (top, bottom, left, right)."""
    x = as_tensor(x)
    top, bottom, left, right = (pad,) * 4 if isinstance(pad, int) else pad
    if min(top, bottom, left, right) < 0:
        raise ConfigError(f"negative padding {pad}")
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    H, W = x.shape[-2:]
    return make_result(np.pad(x.data, widths), (x,),
                       lambda g: (g[..., top:top + H, left:left + W],), "pad2d")


def conv2d(x, kernel, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[C_in,H,W]`` with ``kernel[C_out,C_in,K,K]``, zero padded."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected [C,H,W] and [O,C,K,K], got {x.shape}, {kernel.shape}")
    c_out, c_in, K, K2 = kernel.shape
    if c_in != x.shape[0]:
        raise DimensionError(f"conv2d: kernel {kernel.shape} expects {c_in} channels, input {x.shape}")
    if K != K2 or K % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be square with odd size, got {K}x{K2}")
    if pad < 0 or stride < 1:
        raise ConfigError(f"conv2d: invalid pad={pad} stride={stride}")
    H, W = x.shape[1:]
    span_h, span_w = H + 2 * pad - K, W + 2 * pad - K
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ConfigError(
            f"conv2d: output extent not integral for input {H}x{W}, K={K}, pad={pad}, stride={stride}")
    Ho, Wo = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (K, K), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # [C_in, Ho, Wo, K, K]
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c_in * K * K, Ho * Wo)
    wmat = kernel.data.reshape(c_out, c_in * K * K)
    out = (wmat @ cols).reshape(c_out, Ho, Wo)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
        out = out + bias.data[:, None, None]
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(c_out, Ho * Wo)
        grads = [None, None]
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c_in, K, K, Ho, Wo)
            dxp = np.zeros_like(xp)
            for ky in range(K):
                for kx in range(K):
                    dxp[:, ky:ky + stride * (Ho - 1) + 1:stride,
                        kx:kx + stride * (Wo - 1) + 1:stride] += dcols[:, ky, kx]
            grads[0] = dxp[:, pad:pad + H, pad:pad + W] if pad else dxp
        if kernel.requires_grad:
            grads[1] = (g2 @ cols.T).reshape(kernel.shape)
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads

    return make_result(out, parents, backward, "conv2d")


def _corner_setup(ys: np.ndarray, xs: np.ndarray, H: int, W: int):
    y = np.clip(ys, 0, H - 1)
    x = np.clip(xs, 0, W - 1)
    y0 = np.minimum(np.floor(y), max(H - 2, 0)).astype(np.int64)
    x0 = np.minimum(np.floor(x), max(W - 2, 0)).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (y - y0).astype(ys.dtype)
    wx = (x - x0).astype(xs.dtype)
    inside_y = (ys >= 0) & (ys <= H - 1)
    inside_x = (xs >= 0) & (xs <= W - 1)
    return y0, y1, x0, x1, wy, wx, inside_y, inside_x


def sample_points(x, ys, xs) -> Tensor:
    """Bilinear samples of ``x[C,H,W]`` at fractional (ys, xs); returns ``[C, *ys.shape]``.

    Coordinates are clamped to ``[0, H-1] x [0, W-1]`` (replicate edge); the
    coordinate gradient is zero where clamping is active.
    """
    x = as_tensor(x)
    ys, xs = as_tensor(ys), as_tensor(xs)
    if x.ndim != 3:
        raise DimensionError(f"sample_points: expected [C,H,W], got {x.shape}")
    if ys.shape != xs.shape:
        raise DimensionError(f"sample_points: coordinate shapes differ {ys.shape} vs {xs.shape}")
    C, H, W = x.shape
    pshape = ys.shape
    yv = ys.data.reshape(-1).astype(x.dtype)
    xv = xs.data.reshape(-1).astype(x.dtype)
    P = yv.size
    y0, y1, x0, x1, wy, wx, in_y, in_x = _corner_setup(yv, xv, H, W)
    idx = np.concatenate([y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1])
    wts = np.concatenate([(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx])
    cols = np.tile(np.arange(P), 4)
    interp = sp.csr_matrix((wts, (idx, cols)), shape=(H * W, P))
    flat = x.data.reshape(C, H * W)
    out = np.asarray((interp.T @ flat.T).T, dtype=x.dtype).reshape((C,) + pshape)

    def backward(g):
        g2 = g.reshape(C, P)
        gx = gy_ = gx_ = None
        if x.requires_grad:
            gx = np.asarray((interp @ g2.T).T, dtype=x.dtype).reshape(C, H, W)
        if ys.requires_grad or xs.requires_grad:
            v00 = flat[:, y0 * W + x0]
            v01 = flat[:, y0 * W + x1]
            v10 = flat[:, y1 * W + x0]
            v11 = flat[:, y1 * W + x1]
            if ys.requires_grad:
                dy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
                gy_ = ((g2 * dy).sum(axis=0) * in_y).reshape(pshape)
            if xs.requires_grad:
                dx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
                gx_ = ((g2 * dx).sum(axis=0) * in_x).reshape(pshape)
        return gx, gy_, gx_

    return make_result(out, (x, ys, xs), backward, "sample_points")


def bilinear_sample(x, y, x_coord) -> Tensor:
    """Sample ``x[C,H,W]`` at one fractional location; returns ``[C]``."""
    out = sample_points(x, as_tensor(y).reshape(()), as_tensor(x_coord).reshape(()))
    return out


def _align_corners_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1
        return m
    src = np.arange(n_out) * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1 - frac
    m[rows, lo + 1] += frac
    return m


def upsample_bilinear(x, H: int, W: int) -> Tensor:
    """Align-corners bilinear resize of ``x[C,h,w]`` to ``[C,H,W]`` (H >= h, W >= w)."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"upsample_bilinear: expected [C,h,w], got {x.shape}")
    _, h, w = x.shape
    if H < h or W < w:
        raise ConfigError(f"upsample_bilinear: target {H}x{W} smaller than source {h}x{w}")
    ay = _align_corners_matrix(H, h, x.dtype)
    ax = _align_corners_matrix(W, w, x.dtype)
    out = ay @ x.data @ ax.T
    return make_result(out, (x,), lambda g: (ay.T @ g @ ax,), "upsample_bilinear")


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-subtracted softmax. Entries where ``mask`` is False get weight exactly 0."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return make_result(out, (x,),
                       lambda g: (g - probs * g.sum(axis=axis, keepdims=True),), "log_softmax")


def cross_entropy(logits, labels) -> Tensor:
    """Mean over positions of -log softmax(logits)[label]; class axis is 0."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[1:] != labels.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n_cls = logits.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValidationError(f"cross_entropy: labels outside [0, {n_cls})")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    picked = np.take_along_axis(logp, labels[None], axis=0)[0]
    count = labels.size

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, labels[None],
                          np.take_along_axis(grad, labels[None], axis=0) - 1, axis=0)
        return (grad * (g / count),)

    return make_result(np.asarray(-picked.mean(), dtype=logits.dtype), (logits,), backward,
                       "cross_entropy")


def bce_loss(pred, target) -> Tensor:
    """Mean binary cross-entropy; ``pred`` is clamped to [eps, 1-eps] with eps = 1e-7."""
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise DimensionError(f"bce_loss: pred {pred.shape} vs target {t.shape}")
    t = t.astype(pred.dtype)
    lo, hi = pred.dtype.type(BCE_EPS), pred.dtype.type(1 - BCE_EPS)
    p = np.clip(pred.data, lo, hi)
    loss = -(t * np.log(p) + (1 - t) * np.log1p(-p)).mean()
    active = (pred.data >= lo) & (pred.data <= hi)

    def backward(g):
        return (g * active * (p - t) / (p * (1 - p)) / p.size,)

    return make_result(np.asarray(loss, dtype=pred.dtype), (pred,), backward, "bce_loss")


def kl_div(p, q, tol: float = 1e-6) -> Tensor:
    """KL(p || q) = sum p ln(p/q) for two distributions; logs are clamped at 1e-12."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_div: shapes differ {p.shape} vs {q.shape}")
    for name, t in (("p", p), ("q", q)):
        total = float(t.data.astype(np.float64).sum())
        if abs(total - 1.0) > tol or (t.data < 0).any():
            raise ValidationError(f"kl_div: {name} is not a distribution (sum={total!r})")
    pc = np.maximum(p.data, KL_EPS)
    qc = np.maximum(q.data, KL_EPS)
    log_ratio = np.log(pc) - np.log(qc)
    value = (p.data * log_ratio).sum()

    def backward(g):
        gp = g * (log_ratio + np.where(p.data >= KL_EPS, 1.0, 0.0)) if p.requires_grad else None
        gq = g * np.where(q.data >= KL_EPS, -p.data / qc, 0.0) if q.requires_grad else None
        return gp, gq

    return make_result(np.asarray(value, dtype=p.dtype), (p, q), backward, "kl_div")
