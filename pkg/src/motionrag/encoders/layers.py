"""Forward/backward primitives. Each forward returns ``(out, cache)``."""

from __future__ import annotations

import numpy as np

from ..numerics import DomainError

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


def linear(x, w, b):
    return x @ w + b, x


def linear_backward(dy, x, w):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, x2.T @ dy2, dy2.sum(axis=0)


def layer_norm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def layer_norm_backward(dy, cache):
    xhat, inv, gamma = cache
    n = xhat.shape[-1]
    dgamma = (dy * xhat).reshape(-1, n).sum(axis=0)
    dbeta = dy.reshape(-1, n).sum(axis=0)
    dxhat = dy * gamma
    dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def gelu(x):
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def l2_normalize(x):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise DomainError("cannot normalize a zero embedding")
    y = x / norm
    return y, (y, norm)


def l2_normalize_backward(dy, cache):
    y, norm = cache
    return (dy - y * (y * dy).sum(axis=-1, keepdims=True)) / norm


def _split_heads(x, heads):
    b, m, w = x.shape
    return x.reshape(b, m, heads, w // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, m, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, m, h * d)


def self_attention(x, p, prefix, heads):
    """Multi-head self-attention over axis 1 of ``x`` (batch, frames, width)."""
    q, _ = linear(x, p[prefix + "wq"], p[prefix + "bq"])
    k = x @ p[prefix + "wk"]  # a key bias cancels in the softmax
    v, _ = linear(x, p[prefix + "wv"], p[prefix + "bv"])
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scale = 1.0 / np.sqrt(qh.shape[-1])
    s = qh @ kh.transpose(0, 1, 3, 2) * scale
    s = s - s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    ctx = _merge_heads(a @ vh)
    out, _ = linear(ctx, p[prefix + "wo"], p[prefix + "bo"])
    return out, (x, qh, kh, vh, a, ctx, scale)


def self_attention_backward(dout, cache, p, prefix, heads, grads):
    x, qh, kh, vh, a, ctx, scale = cache
    dctx, grads[prefix + "wo"], grads[prefix + "bo"] = linear_backward(dout, ctx, p[prefix + "wo"])
    dctxh = _split_heads(dctx, heads)
    da = dctxh @ vh.transpose(0, 1, 3, 2)
    dvh = a.transpose(0, 1, 3, 2) @ dctxh
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dqh = ds @ kh
    dkh = ds.transpose(0, 1, 3, 2) @ qh
    dx = np.zeros_like(x)
    for name, dh in (("q", dqh), ("k", dkh), ("v", dvh)):
        dxi, grads[prefix + "w" + name], db = linear_backward(_merge_heads(dh), x, p[prefix + "w" + name])
        if name != "k":
            grads[prefix + "b" + name] = db
        dx += dxi
    return dx
