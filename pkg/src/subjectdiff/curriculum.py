"""Curriculum data recipe: dataset-mix schedule, crop-ratio schedule,
curriculum cropping and the synthetic scene generators that stand in for the
generic and multiview corpora.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import BACKGROUNDS, COLORS, SHAPES
from .tensor import Rng, resize_2d

GENERIC = "generic"
MULTIVIEW = "multiview"
_INV_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class CurriculumConfig:
    total_steps: int
    r_min: float = 1.0
    r_max: float = math.sqrt(10.0)
    base_resolution: int = 32
    crop_multiview: bool = True
    kind_sampling: str = "stratified"

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 1.0 <= self.r_min <= self.r_max:
            raise ValueError(f"need 1 <= r_min <= r_max, got {self.r_min}, {self.r_max}")
        if self.kind_sampling not in ("stratified", "iid"):
            raise ValueError(f"unknown kind_sampling {self.kind_sampling!r}")


@dataclass(frozen=True)
class DataConfig:
    shape_count: int = len(SHAPES)
    color_count: int = len(COLORS)
    background_count: int = len(BACKGROUNDS)

    def __post_init__(self):
        for name, n, cap in (
            ("shape_count", self.shape_count, len(SHAPES)),
            ("color_count", self.color_count, len(COLORS)),
            ("background_count", self.background_count, len(BACKGROUNDS)),
        ):
            if not 1 <= n <= cap:
                raise ValueError(f"{name} must be in [1, {cap}], got {n}")


@dataclass
class TrainSample:
    kind: str
    target_image: np.ndarray
    reference_image: np.ndarray
    caption: list
    meta: dict = field(default_factory=dict)


def _check_step(s_cur, s_total):
    if s_total < 1 or not 0 <= s_cur <= s_total:
        raise ValueError(f"step {s_cur} outside [0, {s_total}]")


def mix_probabilities(s_cur: int, s_total: int):
    """``(P_generic, P_multiview)`` with P_multiview rising linearly from 0 to 1."""
    _check_step(s_cur, s_total)
    p_mv = s_cur / s_total
    return 1.0 - p_mv, p_mv


def crop_ratio(s_cur: int, cfg: CurriculumConfig) -> float:
    _check_step(s_cur, cfg.total_steps)
    return cfg.r_min + (cfg.r_max - cfg.r_min) * s_cur / cfg.total_steps


def sample_ratio(r_cur: float, cfg: CurriculumConfig, rng: Rng) -> float:
    """Uniform draw from [r_min, r_cur]."""
    if r_cur < cfg.r_min:
        raise ValueError(f"r_cur {r_cur} below r_min {cfg.r_min}")
    return rng.uniform(low=cfg.r_min, high=r_cur)


def resized_extent(base: int, r_sample: float) -> int:
    return int(math.floor(base * r_sample + 0.5))


def curriculum_crop(img, r_sample: float, rng: Rng, base: int | None = None) -> np.ndarray:
    """Upscale to ``round(base * r_sample)`` then take a uniform random ``base`` crop."""
    img = np.asarray(img, dtype=np.float32)
    base = base or img.shape[-1]
    if r_sample < 1.0:
        raise ValueError(f"r_sample must be >= 1, got {r_sample}")
    size = resized_extent(base, r_sample)
    if size == base and img.shape[1:] == (base, base):
        return img.copy()
    big = np.stack([resize_2d(ch, size, size, "bilinear") for ch in img])
    y = rng.integers(size - base + 1)
    x = rng.integers(size - base + 1)
    return np.ascontiguousarray(big[:, y : y + base, x : x + base])


class KindSampler:
    """Per-step dataset-kind draws following the linear mix schedule.

    ``"iid"`` uses a fresh uniform per step.  ``"stratified"`` uses a
    randomly shifted golden-ratio sequence: every step's uniform is still
    exactly U(0, 1), so P(multiview) at each step is unchanged, but the
    realised frequencies track the schedule far more tightly.
    """

    def __init__(self, total_steps: int, rng: Rng, mode: str = "stratified"):
        self.total_steps = total_steps
        self.rng = rng
        self.mode = mode
        self._shift = rng.uniform() if mode == "stratified" else 0.0

    def uniform(self, step: int) -> float:
        if self.mode == "stratified":
            return (self._shift + step * _INV_GOLDEN) % 1.0
        return self.rng.uniform()

    def draw(self, step: int) -> str:
        _, p_mv = mix_probabilities(step, self.total_steps)
        return MULTIVIEW if self.uniform(step) < p_mv else GENERIC


# -- procedural scenes ---------------------------------------------------------------

_RGB = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "purple": (0.6, 0.15, 0.75),
    "orange": (1.0, 0.55, 0.05),
    "white": (0.97, 0.97, 0.97),
    "black": (0.05, 0.05, 0.05),
}


def _background(name: str, yy, xx):
    if name == "grass":
        v = 0.5 + 0.5 * np.sin(xx * 0.9 + 2.0 * np.sin(yy * 0.7))
        return np.stack([0.15 + 0.1 * v, 0.45 + 0.25 * v, 0.1 + 0.05 * v])
    if name == "sand":
        v = 0.5 + 0.5 * np.sin(0.35 * xx + 0.5 * yy) * np.cos(0.6 * yy)
        return np.stack([0.8 + 0.1 * v, 0.7 + 0.1 * v, 0.45 + 0.05 * v])
    if name == "water":
        v = 0.5 + 0.5 * np.sin(0.5 * yy + 1.5 * np.sin(0.3 * xx))
        return np.stack([0.1 + 0.05 * v, 0.3 + 0.15 * v, 0.6 + 0.25 * v])
    if name == "sky":
        v = np.clip(yy / (yy.max() + 1.0), 0.0, 1.0)
        return np.stack([0.45 + 0.3 * v, 0.65 + 0.2 * v, 0.95 + 0.0 * v])
    if name == "stripes":
        v = (np.floor(xx / 3.0) % 2).astype(np.float64)
        return np.stack([0.3 + 0.5 * v, 0.3 + 0.5 * v, 0.35 + 0.5 * v])
    v = ((np.hypot((xx % 6) - 2.5, (yy % 6) - 2.5)) < 1.5).astype(np.float64)
    return np.stack([0.7 - 0.4 * v, 0.6 - 0.3 * v, 0.8 - 0.5 * v])


def _inside(shape: str, u, v):
    """Membership for a unit-size shape in its local frame."""
    if shape == "circle":
        return u * u + v * v <= 1.0
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.85
    if shape == "triangle":
        return (v <= 0.8) & (v >= -0.8 + 1.6 * np.abs(u) * 1.1)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if shape == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.35)
    return (np.minimum(np.abs(u), np.abs(v)) <= 0.3) & (np.maximum(np.abs(u), np.abs(v)) <= 1.0)


def render_scene(shape: str, color: str, background: str, pose, size: int) -> np.ndarray:
    """3 x size x size image in [0, 1]; ``pose = (angle, dx, dy, scale)`` in unit-image coordinates."""
    angle, dx, dy, scale = pose
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    unit = 32.0 / size  # textures are defined on a 32-pixel canvas
    img = _background(background, ys * unit, xs * unit)
    cy = (0.5 + dy) * size
    cx = (0.5 + dx) * size
    rad = scale * size
    ca, sa = math.cos(angle), math.sin(angle)
    py = (ys + 0.5 - cy) / rad
    px = (xs + 0.5 - cx) / rad
    u = ca * px + sa * py
    v = -sa * px + ca * py
    inside = _inside(shape, u, v)
    rgb = np.asarray(_RGB[color])[:, None, None]
    img = np.where(inside[None], rgb, img)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _draw_subject(rng: Rng, data: DataConfig):
    return (
        SHAPES[rng.integers(data.shape_count)],
        COLORS[rng.integers(data.color_count)],
        BACKGROUNDS[rng.integers(data.background_count)],
    )


def _draw_pose(rng: Rng):
    return (
        rng.uniform(low=-math.pi, high=math.pi),
        rng.uniform(low=-0.15, high=0.15),
        rng.uniform(low=-0.15, high=0.15),
        rng.uniform(low=0.18, high=0.3),
    )


def _to_size(img, size):
    if img.shape[-1] == size:
        return img
    return np.stack([resize_2d(ch, size, size, "bilinear") for ch in img])


def synth_generic_sample(rng: Rng, r_sample: float = 1.0, base: int = 32, target_size: int = 32,
                         data: DataConfig = DataConfig()) -> TrainSample:
    """One scene; the reference is a curriculum crop of the same rendering."""
    shape, color, bg = _draw_subject(rng, data)
    pose = _draw_pose(rng)
    scene = render_scene(shape, color, bg, pose, base)
    ref = curriculum_crop(scene, r_sample, rng, base)
    caption = ["a", color, shape, "on", bg]
    meta = {"shape": shape, "color": color, "background": bg, "pose": pose, "r_sample": r_sample}
    return TrainSample(GENERIC, _to_size(scene, target_size), ref, caption, meta)


def synth_multiview_sample(rng: Rng, r_sample: float = 1.0, base: int = 32, target_size: int = 32,
                           data: DataConfig = DataConfig(), crop: bool = True) -> TrainSample:
    """Same subject under two poses: view A is the reference, view B the target."""
    shape, color, bg = _draw_subject(rng, data)
    pose_a, pose_b = _draw_pose(rng), _draw_pose(rng)
    view_a = render_scene(shape, color, bg, pose_a, base)
    view_b = render_scene(shape, color, bg, pose_b, base)
    ref = curriculum_crop(view_a, r_sample if crop else 1.0, rng, base)
    caption = ["a", color, shape, "on", bg]
    meta = {"shape": shape, "color": color, "background": bg, "pose_a": pose_a, "pose_b": pose_b,
            "r_sample": r_sample if crop else 1.0}
    return TrainSample(MULTIVIEW, _to_size(view_b, target_size), ref, caption, meta)
