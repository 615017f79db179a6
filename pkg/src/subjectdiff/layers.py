"""Float64 layer primitives with explicit backward passes.

Every ``*_fwd`` returns ``(output, cache)``; the matching ``*_bwd`` takes the
cache and the upstream gradient.  Activations are row-per-token matrices.
"""
import numpy as np

from .tensor import softmax64

RMS_EPS = 1e-6
_GELU_C = np.sqrt(2.0 / np.pi)


def rmsnorm_fwd(x):
    s = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    y = x / s
    return y, (y, s)


def rmsnorm_bwd(cache, dy):
    y, s = cache
    return (dy - y * np.mean(dy * y, axis=-1, keepdims=True)) / s


def gelu_fwd(x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_bwd(cache, dy):
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def mlp_fwd(x, p, prefix):
    """Two-layer perceptron ``gelu(x W1 + b1) W2 + b2``."""
    u = x @ p[prefix + "w1"] + p[prefix + "b1"]
    g, gc = gelu_fwd(u)
    return g @ p[prefix + "w2"] + p[prefix + "b2"], (x, g, gc)


def mlp_bwd(cache, dy, p, prefix, grads=None):
    x, g, gc = cache
    if grads is not None:
        _acc(grads, prefix + "w2", g.T @ dy)
        _acc(grads, prefix + "b2", dy.sum(axis=0))
    du = gelu_bwd(gc, dy @ p[prefix + "w2"].T)
    if grads is not None:
        _acc(grads, prefix + "w1", x.T @ du)
        _acc(grads, prefix + "b1", du.sum(axis=0))
    return du @ p[prefix + "w1"].T


def attention_fwd(q, k, v, heads=1):
    """Multi-head scaled dot-product attention.

    Returns the concatenated head outputs and the per-head probability maps
    (heads x n_q x n_k), each row-stochastic.
    """
    n_q, d = q.shape
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    qh = q.reshape(n_q, heads, dh).transpose(1, 0, 2)
    kh = k.reshape(k.shape[0], heads, dh).transpose(1, 0, 2)
    vh = v.reshape(v.shape[0], heads, -1).transpose(1, 0, 2)
    probs = softmax64(qh @ kh.transpose(0, 2, 1) * scale)
    out = (probs @ vh).transpose(1, 0, 2).reshape(n_q, -1)
    return out, (qh, kh, vh, probs, scale)


def attention_bwd(cache, dout):
    qh, kh, vh, probs, scale = cache
    heads, n_q, _ = qh.shape
    doh = dout.reshape(n_q, heads, -1).transpose(1, 0, 2)
    dv = probs.transpose(0, 2, 1) @ doh
    dp = doh @ vh.transpose(0, 2, 1)
    ds = probs * (dp - np.sum(dp * probs, axis=-1, keepdims=True)) * scale
    dq = ds @ kh
    dk = ds.transpose(0, 2, 1) @ qh

    def merge(t):
        return t.transpose(1, 0, 2).reshape(t.shape[1], -1)

    return merge(dq), merge(dk), merge(dv)


def _acc(grads, name, g):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g
