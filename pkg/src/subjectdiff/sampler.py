"""Dual-branch customization sampler.

Each DDIM step runs a text-only guidance pass whose attention yields one
mask per subject, a generation pass where each subject's visual attention is
scaled by its mask, and an unconditional pass for classifier-free guidance.
After ``t_stop`` the guidance pass is skipped and the cached masks reused.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import Model, toy_decode
from .ccp import project_subject
from .masks import (
    CapacityError,
    MaskCache,
    aggregate_cross_maps,
    aggregate_self_maps,
    build_subject_masks,
    early_stop_mask,
    fuse_maps,
    selection_count,
)
from .tensor import Rng, ShapeError
from .training import NoiseSchedule


class TargetWordError(ValueError):
    """A target word does not occur in the prompt."""


@dataclass
class SamplerConfig:
    steps: int = 25
    omega: float = 7.5
    gamma: object = 0.2  # one ratio for every subject, or a list
    t_stop: int = 12
    seed: int = 0
    cross_source: str = "low"
    self_source: str = "high"
    mask_norm: str = "max"
    mask_override: str | None = None  # None, "ones" (all-ones masks) or "none" (no mask at all)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if self.mask_norm not in ("max", "binary"):
            raise ValueError(f"unknown mask_norm {self.mask_norm!r}")
        if self.mask_override not in (None, "ones", "none"):
            raise ValueError(f"unknown mask_override {self.mask_override!r}")

    def ratios(self, n: int) -> list:
        if isinstance(self.gamma, (list, tuple)):
            if len(self.gamma) != n:
                raise ValueError(f"{len(self.gamma)} gamma values for {n} subjects")
            return [float(g) for g in self.gamma]
        return [float(self.gamma)] * n


@dataclass
class CustomizeTrace:
    masks: list = field(default_factory=list)  # per step: list of G x G masks, one per subject
    latent_norms: list = field(default_factory=list)
    fresh_steps: list = field(default_factory=list)
    forward_counts: dict = field(default_factory=lambda: {"guidance": 0, "generation": 0, "uncond": 0})
    z0: np.ndarray | None = None
    image: np.ndarray | None = None

    @property
    def total_forwards(self) -> int:
        return sum(self.forward_counts.values())


def ddim_timesteps(T: int, steps: int) -> list:
    """Descending (t, t_prev) pairs from T down to 0."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    taus = [int(round(T * (steps - k) / steps)) for k in range(steps + 1)]
    return list(zip(taus[:-1], taus[1:]))


def cfg_combine(eps_uncond, eps_cond, omega: float) -> np.ndarray:
    """``eps_uncond + omega * (eps_cond - eps_uncond)``; omega 0 and 1 are returned exactly."""
    u = np.asarray(eps_uncond, dtype=np.float32)
    c = np.asarray(eps_cond, dtype=np.float32)
    if u.shape != c.shape:
        raise ShapeError(f"shape mismatch {u.shape} vs {c.shape}")
    if omega == 1.0:
        return c.copy()
    if omega == 0.0:
        return u.copy()
    u64 = u.astype(np.float64)
    return (u64 + omega * (c.astype(np.float64) - u64)).astype(np.float32)


def ddim_update(z_t, eps, t: int, t_prev: int, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM step from t to t_prev."""
    if not t > t_prev:
        raise ValueError(f"need t > t_prev, got {t}, {t_prev}")
    a_t, a_p = schedule[t], schedule[t_prev]
    z = np.asarray(z_t, dtype=np.float64)
    e = np.asarray(eps, dtype=np.float64)
    z0 = (z - math.sqrt(1.0 - a_t) * e) / math.sqrt(a_t)
    return (math.sqrt(a_p) * z0 + math.sqrt(1.0 - a_p) * e).astype(np.float32)


def guidance_branch_step(model: Model, z_t, t, f_ct, target_positions, cross_source="low", self_source="high"):
    """Text-only forward; returns the record and one fused G x G map per subject."""
    _, rec = model.denoise_step(z_t, t, f_ct, None, None, record=True)
    m_self = None if self_source == "none" else aggregate_self_maps(rec, self_source)
    fused = [fuse_maps(m_self, aggregate_cross_maps(rec, pos, cross_source)) for pos in target_positions]
    return rec, fused


def generation_branch_step(model: Model, z_t, t, f_ct, f_cis, masks) -> np.ndarray:
    """Forward with every subject's masked visual attention added."""
    if masks is not None and len(f_cis) != len(masks):
        raise ValueError(f"{len(f_cis)} visual conditions but {len(masks)} masks")
    eps, _ = model.denoise_step(z_t, t, f_ct, list(f_cis), None if masks is None else list(masks), record=False)
    return eps


def target_positions(token_index: dict, word: str) -> list:
    """Token positions for a target word or space-separated phrase."""
    positions = []
    for w in word.lower().split():
        if w not in token_index:
            raise TargetWordError(f"target word {w!r} not in prompt")
        positions.extend(token_index[w])
    if not positions:
        raise TargetWordError("empty target word")
    return positions


def sample_text(model: Model, prompt, cfg: SamplerConfig):
    """Plain text-to-image sampling with classifier-free guidance."""
    schedule = NoiseSchedule.linear(model.cfg.timesteps)
    c, r = model.cfg.latent_channels, model.cfg.latent_size
    z = Rng(cfg.seed).normal((c, r, r))
    f_ct, _ = model.encode_text(prompt)
    f_null = model.null_text()
    for t, t_prev in ddim_timesteps(model.cfg.timesteps, cfg.steps):
        cond, _ = model.denoise_step(z, t, f_ct, record=False)
        uncond, _ = model.denoise_step(z, t, f_null, record=False)
        z = ddim_update(z, cfg_combine(uncond, cond, cfg.omega), t, t_prev, schedule)
    return toy_decode(z), z


def customize(model: Model, prompt, subjects, cfg: SamplerConfig):
    """Generate ``prompt`` with each ``(reference_image, target_word)`` customized.

    Several entries may share one image (one reference, many subjects).
    Returns ``(image, CustomizeTrace)``.
    """
    schedule = NoiseSchedule.linear(model.cfg.timesteps)
    c, r, G = model.cfg.latent_channels, model.cfg.latent_size, model.cfg.grid
    f_ct, token_index = model.encode_text(prompt)
    f_null = model.null_text()
    positions = [target_positions(token_index, word) for _, word in subjects]
    ratios = cfg.ratios(len(subjects))
    if sum(selection_count(g, G * G) for g in ratios) > G * G:
        raise CapacityError(f"subject ratios {ratios} exceed the {G}x{G} grid")

    f_cis, seen = [], {}
    for img, _ in subjects:
        key = id(img)
        if key not in seen:
            seen[key] = project_subject(model, img).f_ci
        f_cis.append(seen[key])

    trace = CustomizeTrace()
    cache = MaskCache(cfg.t_stop)
    z = Rng(cfg.seed).normal((c, r, r))
    ones = np.ones((G, G), np.float32)

    for k, (t, t_prev) in enumerate(ddim_timesteps(model.cfg.timesteps, cfg.steps), start=1):
        if not subjects or cfg.mask_override is not None:
            masks = None if cfg.mask_override == "none" else [ones] * len(subjects)
        else:
            def fresh(z=z, t=t, k=k):
                _, fused = guidance_branch_step(model, z, t, f_ct, positions, cfg.cross_source, cfg.self_source)
                trace.forward_counts["guidance"] += 1
                trace.fresh_steps.append(k)
                return build_subject_masks(fused, ratios, binary=cfg.mask_norm == "binary")

            masks = early_stop_mask(k, fresh, cache).normalized
        cond = generation_branch_step(model, z, t, f_ct, f_cis, masks)
        trace.forward_counts["generation"] += 1
        uncond, _ = model.denoise_step(z, t, f_null, record=False)
        trace.forward_counts["uncond"] += 1
        z = ddim_update(z, cfg_combine(uncond, cond, cfg.omega), t, t_prev, schedule)
        trace.masks.append([] if masks is None else list(masks))
        trace.latent_norms.append(float(np.linalg.norm(z.astype(np.float64))))
    trace.z0 = z
    trace.image = toy_decode(z)
    return trace.image, trace
