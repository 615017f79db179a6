"""Cross-layer cross-scale subject projector.

Deep encoder features act as queries twice: once over the token-wise
concatenation of the shallow taps (structure) and once over the four
high-resolution quadrant encodings (detail).  Each result goes through its own
MLP and the three streams are combined into the visual condition ``f_ci``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import attention_bwd, attention_fwd, mlp_bwd, mlp_fwd
from .tensor import ShapeError, resize_2d

# (shallow vs deep, high vs deep); "concat_add" is the default
COMBINE_MODES = ("concat_add", "concat_concat", "add_concat")


@dataclass
class SubjectFeatures:
    f_deep: np.ndarray
    f_shallow_concat: np.ndarray
    f_high: np.ndarray
    f_shallow_prime: np.ndarray
    f_high_prime: np.ndarray
    f_ci: np.ndarray


def projector_weights(params: dict) -> dict:
    """The ``ccp.*`` entries of a parameter dict, as float64."""
    return {k: np.asarray(v, dtype=np.float64) for k, v in params.items() if k.startswith("ccp.")}


def _attend(q_src, kv_src, w, wq, wk, wv):
    q = q_src @ w[wq]
    out, cache = attention_fwd(q, kv_src @ w[wk], kv_src @ w[wv], 1)
    return out, (cache, q_src, kv_src)


def _attend_bwd(cache, dout, w, wq, wk, wv, grads):
    att, q_src, kv_src = cache
    dq, dk, dv = attention_bwd(att, dout)
    grads[wq] = q_src.T @ dq
    grads[wk] = kv_src.T @ dk
    grads[wv] = kv_src.T @ dv


def cross_layer_attend(f_deep, f_shallow, weights) -> np.ndarray:
    """Deep features query the token-wise concatenation of the shallow taps."""
    out, _ = _cross_layer64(np.asarray(f_deep, np.float64), f_shallow, projector_weights(weights))
    return out.astype(np.float32)


def _cross_layer64(f_deep, f_shallow, w):
    levels = [np.asarray(f, dtype=np.float64) for f in f_shallow]
    n = f_deep.shape[0]
    if not levels or any(f.shape != f_deep.shape for f in levels):
        raise ShapeError(f"shallow levels {[f.shape for f in levels]} must each match f_deep {f_deep.shape}")
    concat = np.concatenate(levels, axis=0)
    att, ac = _attend(f_deep, concat, w, "ccp.wqs", "ccp.wks", "ccp.wvs")
    out, mc = mlp_fwd(att, w, "ccp.shallow.")
    assert out.shape[0] == n
    return out, (ac, mc)


def cross_scale_attend(f_deep, f_high, weights) -> np.ndarray:
    """Deep features query the 4 * n_image high-resolution tokens."""
    out, _ = _cross_scale64(np.asarray(f_deep, np.float64), np.asarray(f_high, np.float64), projector_weights(weights))
    return out.astype(np.float32)


def _cross_scale64(f_deep, f_high, w):
    if f_high.shape != (4 * f_deep.shape[0], f_deep.shape[1]):
        raise ShapeError(f"f_high shape {f_high.shape} must be (4 * {f_deep.shape[0]}, {f_deep.shape[1]})")
    att, ac = _attend(f_deep, f_high, w, "ccp.wqh", "ccp.wkh", "ccp.whv")
    out, mc = mlp_fwd(att, w, "ccp.high.")
    return out, (ac, mc)


def deep_projection(f_deep, weights) -> np.ndarray:
    out, _ = mlp_fwd(np.asarray(f_deep, np.float64), projector_weights(weights), "ccp.deep.")
    return out.astype(np.float32)


def combine_features(f_shallow_prime, f_deep_proj, f_high_prime, mode: str = "concat_add") -> np.ndarray:
    """Combine the three projected streams.

    ``f_deep_proj`` is the deep stream already passed through its MLP.

    concat_add     shallow' || (deep + high')          2 * n tokens
    concat_concat  shallow' || deep || high'            3 * n tokens
    add_concat     (deep + shallow') || high'           2 * n tokens
    """
    s, d, h = (np.asarray(x, dtype=np.float64) for x in (f_shallow_prime, f_deep_proj, f_high_prime))
    if not (s.shape == d.shape == h.shape):
        raise ShapeError(f"stream shapes differ: {s.shape}, {d.shape}, {h.shape}")
    return _combine64(s, d, h, mode).astype(np.float32)


def _combine64(s, d, h, mode):
    if mode == "concat_add":
        return np.concatenate([s, d + h], axis=0)
    if mode == "concat_concat":
        return np.concatenate([s, d, h], axis=0)
    if mode == "add_concat":
        return np.concatenate([d + s, h], axis=0)
    raise ValueError(f"unknown combination mode {mode!r}; expected one of {COMBINE_MODES}")


def _combine_bwd(dci, n, mode):
    """Split d f_ci into (d shallow', d deep_proj, d high')."""
    if mode == "concat_add":
        return dci[:n], dci[n:], dci[n:]
    if mode == "concat_concat":
        return dci[:n], dci[n : 2 * n], dci[2 * n :]
    return dci[:n], dci[:n], dci[n:]


def token_count(n_image: int, mode: str = "concat_add") -> int:
    return {"concat_add": 2, "concat_concat": 3, "add_concat": 2}[mode] * n_image


class EncodedSubject:
    """Frozen-encoder outputs for one reference image, reused across steps."""

    def __init__(self, f_deep, f_shallow, f_high):
        self.f_deep = np.asarray(f_deep, dtype=np.float64)
        self.f_shallow = [np.asarray(f, dtype=np.float64) for f in f_shallow]
        self.f_high = np.asarray(f_high, dtype=np.float64)


def encode_subject(model, img) -> EncodedSubject:
    """Run the frozen encoders on ``img`` and on its 2x bilinear upsample."""
    img = np.asarray(img, dtype=np.float32)
    s = model.cfg.image_size
    if img.shape != (3, s, s):
        raise ShapeError(f"reference image must be 3 x {s} x {s}, got {img.shape}")
    f_deep, f_shallow = model.encode_image_layers(img)
    big = np.stack([resize_2d(ch, 2 * s, 2 * s, "bilinear") for ch in img])
    return EncodedSubject(f_deep, f_shallow, model.encode_image_highres(big))


def project_encoded(enc: EncodedSubject, weights, mode: str = "concat_add", keep: bool = False):
    """Projector forward on cached encoder outputs.

    Returns ``(f_ci, shallow', high', cache)`` in float64; ``cache`` is None
    unless ``keep``.
    """
    w = weights if all(v.dtype == np.float64 for v in weights.values()) else projector_weights(weights)
    sp, sc = _cross_layer64(enc.f_deep, enc.f_shallow, w)
    hp, hc = _cross_scale64(enc.f_deep, enc.f_high, w)
    dp, dc = mlp_fwd(enc.f_deep, w, "ccp.deep.")
    f_ci = _combine64(sp, dp, hp, mode)
    return f_ci, sp, hp, ((sc, hc, dc, enc.f_deep.shape[0], mode) if keep else None)


def project_backward(cache, d_fci, weights) -> dict:
    """Gradients of every ``ccp.*`` weight given dL/d f_ci."""
    (ac_s, mc_s), (ac_h, mc_h), dc, n, mode = cache
    grads = {}
    d_s, d_d, d_h = _combine_bwd(d_fci, n, mode)
    mlp_bwd(dc, d_d, weights, "ccp.deep.", grads)
    d_att = mlp_bwd(mc_s, d_s, weights, "ccp.shallow.", grads)
    _attend_bwd(ac_s, d_att, weights, "ccp.wqs", "ccp.wks", "ccp.wvs", grads)
    d_att = mlp_bwd(mc_h, d_h, weights, "ccp.high.", grads)
    _attend_bwd(ac_h, d_att, weights, "ccp.wqh", "ccp.wkh", "ccp.whv", grads)
    return grads


def project_subject(model, img, mode: str | None = None) -> SubjectFeatures:
    """Encode a reference image into every projector stage, f_ci included."""
    enc = encode_subject(model, img)
    f_ci, sp, hp, _ = project_encoded(enc, projector_weights(model.trainable), mode or model.ccp_mode)
    return SubjectFeatures(
        f_deep=enc.f_deep.astype(np.float32),
        f_shallow_concat=np.concatenate(enc.f_shallow, axis=0).astype(np.float32),
        f_high=enc.f_high.astype(np.float32),
        f_shallow_prime=sp.astype(np.float32),
        f_high_prime=hp.astype(np.float32),
        f_ci=f_ci.astype(np.float32),
    )
