"""Layer operations with forward and backward passes.

Convolutions are cross-correlations lowered to one matrix product over an
im2col buffer. Internally the buffers use a channel-major ``(C, N, H, W)``
layout so the products need no extra transposes; results are exposed as
``(N, C, H, W)`` views.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, make


def _out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _pad_cn(x: np.ndarray, p: int) -> np.ndarray:
    """(N, C, H, W) -> zero-padded (C, N, H + 2p, W + 2p)."""
    n, c, h, w = x.shape
    out = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p:p + h, p:p + w] = x.transpose(1, 0, 2, 3)
    return out


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Padded (C, N, Hp, Wp) -> (C*k*k, N*ho*wo)."""
    c, n = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
    return cols.reshape(c * k * k, n * ho * wo)


def _col2im(cols: np.ndarray, c: int, n: int, h: int, w: int, k: int, s: int, p: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns into an (N, C, h, w) view."""
    hp, wp = max(h + 2 * p, s * (ho - 1) + k), max(w + 2 * p, s * (wo - 1) + k)
    xp = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    c6 = cols.reshape(c, k, k, n, ho, wo)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += c6[:, i, j]
    return xp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3)


def _as_cn_matrix(g: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C, N*H*W), free when ``g`` is a view of a (C, N, H, W) buffer."""
    n, c, h, w = g.shape
    return np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c, n * h * w)


def _from_cn_matrix(m: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    c = m.shape[0]
    return m.reshape(c, n, h, w).transpose(1, 0, 2, 3)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2D cross-correlation. ``weight`` is (out, in, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4D input and weight")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ci} (kernel {k}x{k2})")
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError("conv2d: kernel larger than padded input")
    cols = _im2col(_pad_cn(x.data, padding), k, stride, ho, wo)
    wm = weight.data.reshape(o, -1)
    out = wm @ cols
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = _as_cn_matrix(g)
        gx = _col2im(wm.T @ gm, c, n, h, w, k, stride, padding, ho, wo) if x.requires_grad else None
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=1))
        return grads

    return make(_from_cn_matrix(out, n, ho, wo), parents, backward)


def conv_transpose2d(x, weight, bias=None, stride: int = 2, padding: int = 1,
                     output_padding: int = 1) -> Tensor:
    """Transposed convolution (adjoint of :func:`conv2d` w.r.t. its input).

    ``weight`` is (in, out, kh, kw): the same array a conv2d mapping ``out``
    channels to ``in`` channels would use.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    n, c, h, w = x.shape
    ci, o, k, _ = weight.shape
    if ci != c:
        raise ValueError(f"conv_transpose2d: input has {c} channels, weight expects {ci}")
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (w - 1) * stride - 2 * padding + k + output_padding
    wm = weight.data.reshape(c, -1)
    xm = _as_cn_matrix(x.data)
    out = _col2im(wm.T @ xm, o, n, ho, wo, k, stride, padding, h, w)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        cols = _im2col(_pad_cn(g, padding), k, stride, h, w)
        gx = _from_cn_matrix(wm @ cols, n, h, w) if x.requires_grad else None
        gw = (xm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make(out, parents, backward)


def batch_norm(x, gamma, beta, running_mean=None, running_var=None, training: bool = True,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    In training mode the running statistics are updated in place. Evaluation mode requires running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: {c} channels but scale/shift shapes {gamma.shape}/{beta.shape}")
    shape = (1, c, 1, 1)
    xd = x.data
    if training:
        m = xd.size // c
        mean = xd.mean(axis=(0, 2, 3), dtype=np.float64)
        var = np.square(xd - mean.reshape(shape).astype(xd.dtype)).mean(axis=(0, 2, 3), dtype=np.float64)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var * (m / max(m - 1, 1))
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm: evaluation mode needs running statistics")
        mean, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.astype(xd.dtype).reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        gg = g.sum(axis=(0, 2, 3), dtype=np.float64)
        gxh = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
        dgamma = gxh.astype(gamma.dtype)
        dbeta = gg.astype(beta.dtype)
        if not x.requires_grad:
            return [None, dgamma, dbeta]
        scale = (gamma.data.astype(np.float64) * inv).astype(xd.dtype).reshape(shape)
        if training:
            mm = xd.size // c
            a = (gg / mm).astype(xd.dtype).reshape(shape)
            b = (gxh / mm).astype(xd.dtype).reshape(shape)
            dx = scale * (g - a - xhat * b)
        else:
            dx = g * scale
        return [dx, dgamma, dbeta]

    return make(out, (x, gamma, beta), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make(x.data * mask, (x,), lambda g: [g * mask])


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = make(s, (x,), lambda g: [g * s * (1 - s)])
    out._pre = x
    return out


def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    return make(np.concatenate([a.data, b.data], axis=1), (a, b),
                lambda g: [g[:, :ca], g[:, ca:]])


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data + b.data, (a, b), lambda g: [g, g])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data * b.data, (a, b), lambda g: [g * b.data, g * a.data])


def dot(x, weights) -> Tensor:
    """Scalar ``sum(x * weights)`` accumulated in float64; ``weights`` is a constant."""
    x = as_tensor(x)
    wts = np.asarray(weights)
    val = np.sum(x.data.astype(np.float64) * wts)
    return make(np.asarray(val), (x,), lambda g: [(float(g) * wts).astype(x.dtype)])


BCE_EPS = 1e-7


def _softplus(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0) + np.log1p(np.exp(-np.abs(a)))


def bce_with_logits(logits, target, pos_weight: float = 1.0) -> Tensor:
    """Mean weighted binary cross entropy of ``sigmoid(logits)`` against ``target``."""
    logits = as_tensor(logits)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != logits.shape:
        raise ValueError(f"bce: prediction shape {logits.shape} != target shape {t.shape}")
    if pos_weight <= 0:
        raise ValueError("pos_weight must be positive")
    z = logits.data.astype(np.float64)
    loss = (pos_weight * t * _softplus(-z) + (1 - t) * _softplus(z)).mean()
    m = z.size

    def backward(g):
        s = _sigmoid(z)
        d = (pos_weight * t * (s - 1) + (1 - t) * s) * (float(g) / m)
        return [d.astype(logits.dtype)]

    return make(np.asarray(loss), (logits,), backward)


def weighted_bce(pred, target, pos_weight: float = 1.0) -> Tensor:
    """Mean of ``-[w t log p + (1 - t) log(1 - p)]``.

    When ``pred`` is the output of :func:`sigmoid` the loss is evaluated from
    the logits and the gradient bypasses the sigmoid; otherwise ``pred`` is
    clamped to ``[eps, 1 - eps]``.
    """
    pred = as_tensor(pred)
    if pred._pre is not None:
        return bce_with_logits(pred._pre, target, pos_weight)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ValueError(f"bce: prediction shape {pred.shape} != target shape {t.shape}")
    if pos_weight <= 0:
        raise ValueError("pos_weight must be positive")
    raw = pred.data.astype(np.float64)
    p = np.clip(raw, BCE_EPS, 1 - BCE_EPS)
    loss = -(pos_weight * t * np.log(p) + (1 - t) * np.log1p(-p)).mean()
    inside = (raw > BCE_EPS) & (raw < 1 - BCE_EPS)
    m = p.size

    def backward(g):
        d = (-pos_weight * t / p + (1 - t) / (1 - p)) * inside * (float(g) / m)
        return [d.astype(pred.dtype)]

    return make(np.asarray(loss), (pred,), backward)
