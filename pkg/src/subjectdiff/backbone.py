"""Miniature stand-ins for the pretrained pieces: a word-level text encoder,
a patch-attention image encoder with shallow taps, a fixed 2x autoencoder and
a small UNet-like denoiser with textual and visual cross-attention.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import layers
from .layers import attention_bwd, attention_fwd, mlp_bwd, mlp_fwd, rmsnorm_bwd, rmsnorm_fwd
from .masks import resize_mask_to_block
from .tensor import Rng, ShapeError, as_tensor, resize_matrix

COLORS = ["red", "green", "blue", "yellow", "purple", "orange", "white", "black"]
SHAPES = ["circle", "square", "triangle", "diamond", "ring", "cross"]
BACKGROUNDS = ["grass", "sand", "water", "sky", "stripes", "dots"]
VOCAB = (
    ["<unk>", "<null>"]
    + ["a", "an", "the", "on", "in", "of", "with", "and", "at", "near", "under", "beside", "photo", "big", "small"]
    + ["toy", "dog", "cat", "boy", "girl", "horse", "jungle", "beach", "city", "snow", "table", "hat", "ball"]
    + COLORS
    + SHAPES
    + BACKGROUNDS
)
WORD_ID = {w: i for i, w in enumerate(VOCAB)}
UNK, NULL = 0, 1


@dataclass(frozen=True)
class BackboneConfig:
    latent_size: int = 16
    latent_channels: int = 8
    text_dim: int = 32
    image_tokens: int = 16
    encoder_dim: int = 32
    condition_dim: int = 32
    shallow_layers: int = 3
    encoder_depth: int = 6
    image_size: int = 32
    block_resolutions: tuple = (16, 8, 16)
    heads: int = 2
    model_dim: int = 32
    timesteps: int = 50
    word_aggregation: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "block_resolutions", tuple(int(r) for r in self.block_resolutions))
        side = math.isqrt(self.image_tokens)
        if self.shallow_layers < 1:
            raise ValueError("shallow_layers must be >= 1")
        if side * side != self.image_tokens:
            raise ValueError(f"image_tokens={self.image_tokens} is not a perfect square")
        if self.image_size % side:
            raise ValueError("image_size must be divisible by the patch grid side")
        if self.shallow_layers > self.encoder_depth:
            raise ValueError("shallow_layers cannot exceed encoder_depth")
        if not self.block_resolutions:
            raise ValueError("at least one denoiser block is required")
        for r in self.block_resolutions:
            if r < 1 or self.latent_size % r:
                raise ValueError(f"block resolution {r} does not divide latent_size {self.latent_size}")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.word_aggregation != "mean":
            raise ValueError("only 'mean' word aggregation is supported")

    @property
    def patch_size(self) -> int:
        return self.image_size // math.isqrt(self.image_tokens)

    @property
    def grid(self) -> int:
        """Side of the guidance-mask grid (largest block resolution)."""
        return max(self.block_resolutions)

    @property
    def target_image_size(self) -> int:
        return 2 * self.latent_size

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class AttentionRecord:
    """Attention maps captured during one denoiser forward.

    ``cross_maps[b]`` has shape (heads, r_b**2, n_text); ``self_maps[b]`` has
    shape (heads, r_b**2, r_b**2); ``visual_maps[b]`` holds one
    (heads, r_b**2, n_visual) array per visual condition.
    """

    resolutions: list = field(default_factory=list)
    cross_maps: list = field(default_factory=list)
    self_maps: list = field(default_factory=list)
    visual_maps: list = field(default_factory=list)
    token_index: dict = field(default_factory=dict)


# -- initialisation -----------------------------------------------------------------


def _param_specs(cfg: BackboneConfig):
    """(name, shape, std, trainable) in creation order."""
    c, d, ct, c0, ci = cfg.latent_channels, cfg.model_dim, cfg.text_dim, cfg.encoder_dim, cfg.condition_dim
    pdim = 3 * cfg.patch_size**2
    out = [("text.embed", (len(VOCAB), ct), 1.0, False)]
    for n in ("wq", "wk", "wv", "wo"):
        out.append((f"text.{n}", (ct, ct), ct**-0.5, False))
    out += [("enc.patch_w", (pdim, c0), pdim**-0.5, False), ("enc.patch_b", (c0,), 0.5, False)]
    for layer in range(cfg.encoder_depth):
        for n in ("wq", "wk", "wv", "wo"):
            out.append((f"enc.{layer}.{n}", (c0, c0), c0**-0.5, False))
        out += _mlp_specs(f"enc.{layer}.mlp.", c0, 2 * c0, c0, False)
    out += [("den.w_in", (c, d), c**-0.5, False), ("den.b_in", (d,), 0.0, False)]
    out.append(("den.temb", (cfg.timesteps + 1, d), 1.0, False))
    for b in range(len(cfg.block_resolutions)):
        for n in ("wq", "wk", "wv", "wo"):
            out.append((f"den.{b}.self.{n}", (d, d), d**-0.5, False))
        out.append((f"den.{b}.cross.wq", (d, d), d**-0.5, False))
        out.append((f"den.{b}.cross.wk", (ct, d), ct**-0.5, False))
        out.append((f"den.{b}.cross.wv", (ct, d), ct**-0.5, False))
        out.append((f"den.{b}.cross.wo", (d, d), d**-0.5, False))
        out += _mlp_specs(f"den.{b}.mlp.", d, 2 * d, d, False)
        out.append((f"den.{b}.vis.wk", (ci, d), ci**-0.5, True))
        out.append((f"den.{b}.vis.wv", (ci, d), ci**-0.5, True))
    out += [("den.w_out", (d, c), d**-0.5, False), ("den.b_out", (c,), 0.0, False)]
    for n in ("wqs", "wks", "wvs", "wqh", "wkh", "whv"):
        out.append((f"ccp.{n}", (c0, c0), c0**-0.5, True))
    for path in ("shallow", "high", "deep"):
        out += _mlp_specs(f"ccp.{path}.", c0, ci, ci, True)
    return out


def _mlp_specs(prefix, n_in, n_hidden, n_out, trainable):
    return [
        (prefix + "w1", (n_in, n_hidden), n_in**-0.5, trainable),
        (prefix + "b1", (n_hidden,), 0.0, trainable),
        (prefix + "w2", (n_hidden, n_out), n_hidden**-0.5, trainable),
        (prefix + "b2", (n_out,), 0.0, trainable),
    ]


# -- fixed autoencoder ----------------------------------------------------------------


def _lift_matrix(c: int) -> np.ndarray:
    """Fixed 3 -> c channel lift with signed one-hot rows.

    Rows cycle through +e_k, -e_k so each RGB channel is carried by a balanced
    set of latent channels; the decoder averages them back exactly.
    """
    if c < 3:
        raise ValueError("latent_channels must be >= 3")
    A = np.zeros((c, 3))
    for i in range(c):
        A[i, i % 3] = 1.0 if (i // 3) % 2 == 0 else -1.0
    return A


def toy_autoencode(img, latent_channels: int = 8) -> np.ndarray:
    """3 x H x W image in [0, 1] -> c x H/2 x W/2 latent (2x2 mean pool + channel lift)."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError(f"expected a 3 x H x W image, got {x.shape}")
    _, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"image extents must be even, got {H}x{W}")
    pooled = x.reshape(3, H // 2, 2, W // 2, 2).mean(axis=(2, 4)).astype(np.float32).astype(np.float64)
    z = np.einsum("ck,khw->chw", _lift_matrix(latent_channels), pooled)
    return z.astype(np.float32)


def toy_decode(z) -> np.ndarray:
    """c x h x w latent -> 3 x 2h x 2w image (nearest upsample + left inverse of the lift)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise ShapeError(f"expected a c x h x w latent, got {z.shape}")
    A = _lift_matrix(z.shape[0])
    back = np.einsum("kc,chw->khw", A.T, z) / np.sum(A * A, axis=0)[:, None, None]
    return np.repeat(np.repeat(back, 2, axis=1), 2, axis=2).astype(np.float32)


# -- the model ---------------------------------------------------------------------


class Model:
    """Frozen backbone weights plus the trainable projector / visual projections.

    ``frozen`` and ``trainable`` map parameter names to float32 arrays.  Any
    float64 arrays placed in ``trainable`` are used as-is, which is how the
    gradient check evaluates the loss in full precision.
    """

    def __init__(self, cfg: BackboneConfig, frozen: dict, trainable: dict, ccp_mode: str = "concat_add"):
        self.cfg = cfg
        self.frozen = frozen
        self.trainable = trainable
        self.ccp_mode = ccp_mode
        self.forward_count = 0
        self._f64 = {k: np.asarray(v, dtype=np.float64) for k, v in frozen.items()}
        self._resize_cache = {}

    @classmethod
    def create(cls, cfg: BackboneConfig | None = None, seed: int = 0, **kw) -> "Model":
        cfg = cfg or BackboneConfig()
        rng = Rng(seed)
        frozen, trainable = {}, {}
        for name, shape, std, is_trainable in _param_specs(cfg):
            value = rng.normal(shape) * np.float32(std) if std else np.zeros(shape, np.float32)
            (trainable if is_trainable else frozen)[name] = value.astype(np.float32)
        return cls(cfg, frozen, trainable, **kw)

    def params64(self) -> dict:
        p = dict(self._f64)
        p.update({k: np.asarray(v, dtype=np.float64) for k, v in self.trainable.items()})
        return p

    def frozen_checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.frozen):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.frozen[name], dtype="<f4").tobytes())
        return h.hexdigest()

    # -- text ------------------------------------------------------------------------

    def encode_text(self, prompt):
        """Word-level encoding: embedding lookup + one self-attention layer.

        Returns ``(f_ct, token_index)`` where token_index maps each word to
        its positions.  No positional embedding, so the encoder is
        permutation-equivariant over words.
        """
        words = prompt.split() if isinstance(prompt, str) else list(prompt)
        words = [w.lower() for w in words]
        if not words:
            raise ValueError("empty prompt")
        ids = [WORD_ID.get(w, UNK) for w in words]
        token_index = {}
        for pos, w in enumerate(words):
            token_index.setdefault(w, []).append(pos)
        return self._text64(ids).astype(np.float32), token_index

    def null_text(self) -> np.ndarray:
        """Encoding of the empty prompt: the single reserved ``<null>`` token."""
        return self._text64([NULL]).astype(np.float32)

    def _text64(self, ids):
        p = self._f64
        e = p["text.embed"][ids]
        a, _ = rmsnorm_fwd(e)
        o, _ = attention_fwd(a @ p["text.wq"], a @ p["text.wk"], a @ p["text.wv"], 1)
        return e + o @ p["text.wo"]

    # -- image -------------------------------------------------------------------------

    def _patchify(self, img):
        x = np.asarray(img, dtype=np.float64)
        if x.ndim != 3 or x.shape[0] != 3:
            raise ShapeError(f"expected a 3 x H x W image, got {x.shape}")
        ps = self.cfg.patch_size
        _, H, W = x.shape
        if H % ps or W % ps:
            raise ShapeError(f"image {H}x{W} is not divisible by patch size {ps}")
        g_h, g_w = H // ps, W // ps
        return x.reshape(3, g_h, ps, g_w, ps).transpose(1, 3, 0, 2, 4).reshape(g_h * g_w, 3 * ps * ps)

    def _image_hidden64(self, img):
        p = self._f64
        h = self._patchify(img) @ p["enc.patch_w"] + p["enc.patch_b"]
        states = [h]
        for layer in range(self.cfg.encoder_depth):
            pre = f"enc.{layer}."
            a, _ = rmsnorm_fwd(h)
            o, _ = attention_fwd(a @ p[pre + "wq"], a @ p[pre + "wk"], a @ p[pre + "wv"], 1)
            h = h + o @ p[pre + "wo"]
            a, _ = rmsnorm_fwd(h)
            m, _ = mlp_fwd(a, p, pre + "mlp.")
            h = h + m
            states.append(h)
        return states

    def shallow_taps(self) -> list:
        depth, L = self.cfg.encoder_depth, self.cfg.shallow_layers
        return [(l * depth) // L for l in range(L)]

    def encode_image_layers(self, img):
        """Returns ``(f_deep, [f_shallow_0, ..., f_shallow_{L-1}])``.

        Shallow taps are evenly spaced hidden states, tap 0 being the raw
        patch embedding; the deep feature is the last hidden state.
        """
        states = self._image_hidden64(img)
        shallow = [states[i].astype(np.float32) for i in self.shallow_taps()]
        return states[-1].astype(np.float32), shallow

    def encode_image_highres(self, img):
        """Encode a 2x-resolution image as four quadrant crops (TL, TR, BL, BR)."""
        x = np.asarray(img)
        s = self.cfg.image_size
        if x.ndim != 3 or x.shape[1:] != (2 * s, 2 * s):
            raise ShapeError(f"high-res input must be 3 x {2 * s} x {2 * s}, got {x.shape}")
        quads = [x[:, :s, :s], x[:, :s, s:], x[:, s:, :s], x[:, s:, s:]]
        return np.concatenate([self._image_hidden64(q)[-1] for q in quads], axis=0).astype(np.float32)

    # -- denoiser -----------------------------------------------------------------------

    def _resize_op(self, r_in, r_out):
        key = (r_in, r_out)
        if key not in self._resize_cache:
            R = resize_matrix(r_in, r_out, "bilinear")
            self._resize_cache[key] = np.kron(R, R)
        return self._resize_cache[key]

    def denoise_step(self, z_t, t, f_ct, f_ci=None, mask=None, record=True):
        """One denoiser forward.  Returns ``(eps_pred, AttentionRecord)``.

        ``f_ci`` may be a single visual condition or a list of them; ``mask``
        is ``None`` or one G x G guidance mask per condition.  A visual term
        is only added when a condition is given.
        """
        f_cis = _as_list(f_ci)
        masks = _as_list(mask)
        if masks and len(masks) != len(f_cis):
            raise ValueError(f"{len(masks)} masks given for {len(f_cis)} visual conditions")
        ci = self.cfg.condition_dim
        for f in f_cis:
            if np.ndim(f) != 2 or np.shape(f)[1] != ci:
                raise ShapeError(f"visual condition shape {np.shape(f)} does not match W_Ki input dim {ci}")
        eps, rec, _ = self._forward(
            np.asarray(z_t, dtype=np.float64),
            t,
            np.asarray(f_ct, dtype=np.float64),
            [np.asarray(f, dtype=np.float64) for f in f_cis],
            masks or [None] * len(f_cis),
            params=self.params64(),
            record=record,
            keep=False,
        )
        self.forward_count += 1
        return eps.astype(np.float32), rec

    def _forward(self, z, t, f_ct, f_cis, masks, params, record=False, keep=False):
        cfg = self.cfg
        p = params
        if not 0 <= int(t) <= cfg.timesteps:
            raise ValueError(f"timestep {t} outside [0, {cfg.timesteps}]")
        c, r = cfg.latent_channels, cfg.latent_size
        if z.shape != (c, r, r):
            raise ShapeError(f"latent shape {z.shape} != {(c, r, r)}")
        rec = AttentionRecord() if record else None
        x = z.reshape(c, r * r).T
        h = x @ p["den.w_in"] + p["den.b_in"] + p["den.temb"][int(t)]
        tape = []
        skips = {}
        r_cur = r
        for b, r_b in enumerate(cfg.block_resolutions):
            if r_b != r_cur:
                h, op = self._change_res(h, r_cur, r_b, skips)
                tape.append(op)
                r_cur = r_b
            mvecs = [None if m is None else resize_mask_to_block(m, r_b).astype(np.float64) for m in masks]
            h, cache = self._block_fwd(b, h, f_ct, f_cis, mvecs, p, rec, r_b)
            tape.append(("block", b, cache))
        if r_cur != r:
            h, op = self._change_res(h, r_cur, r, skips)
            tape.append(op)
        a, cn = rmsnorm_fwd(h)
        out = a @ p["den.w_out"] + p["den.b_out"]
        eps = out.T.reshape(c, r, r)
        return eps, rec, ((tape, cn) if keep else None)

    def _change_res(self, h, r_in, r_out, skips):
        R = self._resize_op(r_in, r_out)
        if r_out < r_in:
            skips[r_in] = h
            return R @ h, ("down", R, r_in)
        h = R @ h
        if r_out in skips:
            return h + skips.pop(r_out), ("up", R, r_out)
        return h, ("up", R, None)

    def _block_fwd(self, b, h, f_ct, f_cis, mvecs, p, rec, r_b):
        H = self.cfg.heads
        pre = f"den.{b}."
        a1, c1 = rmsnorm_fwd(h)
        o, ca = attention_fwd(a1 @ p[pre + "self.wq"], a1 @ p[pre + "self.wk"], a1 @ p[pre + "self.wv"], H)
        h = h + o @ p[pre + "self.wo"]

        a2, c2 = rmsnorm_fwd(h)
        qc = a2 @ p[pre + "cross.wq"]
        comb, ct = attention_fwd(qc, f_ct @ p[pre + "cross.wk"], f_ct @ p[pre + "cross.wv"], H)
        vis_caches = []
        for f, m in zip(f_cis, mvecs):
            vis, cv = attention_fwd(qc, f @ p[pre + "vis.wk"], f @ p[pre + "vis.wv"], H)
            comb = comb + (vis if m is None else vis * m[:, None])
            vis_caches.append(cv)
        h = h + comb @ p[pre + "cross.wo"]

        a3, c3 = rmsnorm_fwd(h)
        mo, cm = mlp_fwd(a3, p, pre + "mlp.")
        h = h + mo
        if rec is not None:
            rec.resolutions.append(r_b)
            rec.self_maps.append(ca[3].astype(np.float32))
            rec.cross_maps.append(ct[3].astype(np.float32))
            rec.visual_maps.append([cv[3].astype(np.float32) for cv in vis_caches])
        return h, (c1, ca, c2, ct, vis_caches, mvecs, f_cis, c3, cm)

    def _backward(self, state, d_eps, params):
        """Gradients of the trainable visual projections and of each f_ci.

        ``d_eps`` is dL/d(eps_pred) with shape c x r x r.
        """
        tape, cn = state
        p = params
        c, r = self.cfg.latent_channels, self.cfg.latent_size
        grads = {}
        d_out = d_eps.reshape(c, r * r).T
        dh = rmsnorm_bwd(cn, d_out @ p["den.w_out"].T)
        d_skips = {}
        d_fci = None
        for op in reversed(tape):
            if op[0] == "block":
                dh, d_f = self._block_bwd(op[1], op[2], dh, p, grads)
                d_fci = d_f if d_fci is None else [a + b for a, b in zip(d_fci, d_f)]
            elif op[0] == "up":
                _, R, key = op
                if key is not None:
                    d_skips[key] = dh
                dh = R.T @ dh
            else:
                _, R, key = op
                dh = R.T @ dh + d_skips.pop(key, 0.0)
        return grads, d_fci or []

    def _block_bwd(self, b, cache, dh, p, grads):
        c1, ca, c2, ct, vis_caches, mvecs, f_cis, c3, cm = cache
        pre = f"den.{b}."
        dh = dh + rmsnorm_bwd(c3, mlp_bwd(cm, dh, p, pre + "mlp."))

        dcomb = dh @ p[pre + "cross.wo"].T
        dqc, _, _ = attention_bwd(ct, dcomb)
        d_fci = []
        for f, m, cv in zip(f_cis, mvecs, vis_caches):
            dq_v, dk_v, dv_v = attention_bwd(cv, dcomb if m is None else dcomb * m[:, None])
            dqc = dqc + dq_v
            layers._acc(grads, pre + "vis.wk", f.T @ dk_v)
            layers._acc(grads, pre + "vis.wv", f.T @ dv_v)
            d_fci.append(dk_v @ p[pre + "vis.wk"].T + dv_v @ p[pre + "vis.wv"].T)
        dh = dh + rmsnorm_bwd(c2, dqc @ p[pre + "cross.wq"].T)

        do = dh @ p[pre + "self.wo"].T
        dq, dk, dv = attention_bwd(ca, do)
        da = dq @ p[pre + "self.wq"].T + dk @ p[pre + "self.wk"].T + dv @ p[pre + "self.wv"].T
        dh = dh + rmsnorm_bwd(c1, da)
        return dh, d_fci


def _as_list(x):
    if x is None:
        return []
    if isinstance(x, (list, tuple)):
        return list(x)
    return [x]


def check_image(img, size=None) -> np.ndarray:
    img = as_tensor(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected a 3 x H x W image, got {img.shape}")
    if size is not None and img.shape[1:] != (size, size):
        raise ShapeError(f"expected a {size}x{size} image, got {img.shape[1]}x{img.shape[2]}")
    return img
