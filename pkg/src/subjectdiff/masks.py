"""Guidance-mask construction from recorded attention.

Pipeline per step: aggregate low-resolution cross-attention for the target
words, aggregate high-resolution self-attention, fuse them with a
matrix-vector product, keep the top ``floor(gamma * G * G)`` cells and divide
by the maximum.  Several subjects share the grid through a round-robin
allocation that never assigns a cell twice.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import ShapeError, resize_2d, resize_matrix

CROSS_SOURCES = ("low", "all")
SELF_SOURCES = ("high", "all", "none")


class CapacityError(ValueError):
    """Requested per-subject cell counts exceed the grid."""


def selection_count(gamma: float, cells: int) -> int:
    """``floor(gamma * cells)``, robust to binary representation of gamma."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return min(cells, int(math.floor(gamma * cells + 1e-9)))


@dataclass
class GuidanceMask:
    fused: np.ndarray
    selected: np.ndarray
    normalized: np.ndarray
    gamma_scope: float


@dataclass
class SubjectMaskSet:
    fused: list
    ratios: list
    flag: np.ndarray
    selected: list
    normalized: list


@dataclass
class MaskCache:
    t_stop: int
    stored: object = None
    fresh_count: int = field(default=0)


# -- aggregation ------------------------------------------------------------------


def aggregate_cross_maps(record, target_positions, source: str = "low", grid: int | None = None) -> np.ndarray:
    """Average the target tokens' cross-attention into a (G*G, 1) column.

    With ``source="low"`` only blocks strictly below the largest resolution
    contribute; ``"all"`` uses every block.  The column is the row-major
    flattening of the G x G map.
    """
    positions = list(target_positions)
    if not positions:
        raise ValueError("target_positions must be non-empty")
    if source not in CROSS_SOURCES:
        raise ValueError(f"unknown cross-attention source {source!r}")
    G = grid or max(record.resolutions)
    maps = []
    for res, cross in zip(record.resolutions, record.cross_maps):
        if source == "low" and res >= G:
            continue
        col = np.asarray(cross, dtype=np.float64)[:, :, positions].mean(axis=(0, 2))
        maps.append(np.asarray(resize_2d(col.reshape(res, res), G, G, "bilinear"), dtype=np.float64))
    if not maps:
        raise ValueError("no low-resolution cross-attention block in the record")
    return np.mean(maps, axis=0).reshape(G * G, 1).astype(np.float32)


def aggregate_self_maps(record, source: str = "high", grid: int | None = None) -> np.ndarray:
    """Average self-attention into a (G*G, G*G) row-stochastic matrix.

    ``"high"`` averages heads and blocks at exactly the largest resolution.
    ``"all"`` also lifts lower-resolution maps: queries are bilinearly
    resampled and each coarse key's mass is split evenly over its children.
    """
    if source not in ("high", "all"):
        raise ValueError(f"unknown self-attention source {source!r}")
    G = grid or max(record.resolutions)
    maps = []
    for res, sm in zip(record.resolutions, record.self_maps):
        m = np.asarray(sm, dtype=np.float64).mean(axis=0)
        if res == G:
            maps.append(m)
        elif source == "all":
            rq = resize_matrix(res, G, "bilinear")
            spread = resize_matrix(res, G, "nearest") * (res / G)
            maps.append(np.kron(rq, rq) @ m @ np.kron(spread, spread).T)
    if not maps:
        raise ValueError(f"no self-attention block at resolution {G}")
    return np.mean(maps, axis=0).astype(np.float32)


def fuse_maps(m_self, m_cross) -> np.ndarray:
    """``M = M_self @ M_cross`` reshaped to G x G; ``m_self=None`` skips the product."""
    m_cross = np.asarray(m_cross, dtype=np.float64)
    n = m_cross.shape[0]
    G = math.isqrt(n)
    if m_cross.ndim != 2 or m_cross.shape[1] != 1 or G * G != n:
        raise ShapeError(f"M_cross must be (G*G, 1), got {m_cross.shape}")
    if m_self is None:
        return m_cross.reshape(G, G).astype(np.float32)
    m_self = np.asarray(m_self, dtype=np.float64)
    if m_self.shape != (n, n):
        raise ShapeError(f"M_self shape {m_self.shape} does not match M_cross {m_cross.shape}")
    return (m_self @ m_cross).reshape(G, G).astype(np.float32)


# -- selection and normalisation ----------------------------------------------------------


def topk_select(M, gamma: float) -> np.ndarray:
    """Keep the ``floor(gamma*G^2)`` largest cells at their values; zero the rest.

    Ties go to the lowest flattened index.
    """
    M = np.asarray(M, dtype=np.float32)
    k = selection_count(gamma, M.size)
    flat = M.reshape(-1)
    out = np.zeros_like(flat)
    idx = kernels.topk_order(flat, k)
    out[idx] = flat[idx]
    return out.reshape(M.shape)


def max_normalize(selected, binary: bool = False) -> np.ndarray:
    """Divide by the maximum (all-zero input stays zero).

    ``binary=True`` is the thresholding ablation: kept cells become 1.
    """
    s = np.asarray(selected, dtype=np.float32)
    top = float(s.max()) if s.size else 0.0
    if top <= 0.0:
        return np.zeros_like(s)
    if binary:
        return (s > 0).astype(np.float32)
    return np.clip(s / np.float32(top), 0.0, 1.0).astype(np.float32)


def multi_subject_select(maps, ratios) -> list:
    """Disjoint per-subject selection by round-robin best-remaining-cell picks.

    Subjects are visited in order each pass; a subject that still needs cells
    takes its highest unallocated score (lowest index on ties).  Caller maps
    are never modified.
    """
    maps = [np.asarray(m, dtype=np.float32) for m in maps]
    if not maps:
        raise ValueError("at least one subject map is required")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ShapeError("subject maps must share one shape")
    if len(ratios) != len(maps):
        raise ValueError(f"{len(ratios)} ratios given for {len(maps)} maps")
    cells = maps[0].size
    counts = np.array([selection_count(g, cells) for g in ratios], dtype=np.int64)
    if counts.sum() > cells:
        raise CapacityError(f"subjects request {int(counts.sum())} cells but the grid has {cells}")
    stack = np.stack([m.reshape(-1) for m in maps])
    owner = kernels.allocate_subjects(stack, counts)
    return [np.where(owner == j, stack[j], 0.0).astype(np.float32).reshape(shape) for j in range(len(maps))]


def build_guidance(M, gamma: float, binary: bool = False) -> GuidanceMask:
    sel = topk_select(M, gamma)
    return GuidanceMask(np.asarray(M, np.float32), sel, max_normalize(sel, binary), gamma)


def build_subject_masks(maps, ratios, binary: bool = False) -> SubjectMaskSet:
    if len(maps) == 1:
        selected = [topk_select(maps[0], ratios[0])]
    else:
        selected = multi_subject_select(maps, ratios)
    flag = np.zeros(np.shape(maps[0]), dtype=np.uint8)
    for s in selected:
        flag[s != 0] = 1
    return SubjectMaskSet(
        fused=[np.asarray(m, np.float32) for m in maps],
        ratios=list(ratios),
        flag=flag,
        selected=selected,
        normalized=[max_normalize(s, binary) for s in selected],
    )


# -- temporal reuse and block resizing -----------------------------------------------------


def early_stop_mask(step_index: int, fresh_mask_provider, cache: MaskCache):
    """Fresh masks up to ``cache.t_stop``; the step-``t_stop`` mask afterwards.

    ``step_index`` counts sampler iterations from 1.  ``t_stop`` at or beyond
    the number of steps means every step is fresh.
    """
    if step_index <= cache.t_stop:
        mask = fresh_mask_provider()
        cache.fresh_count += 1
        if step_index == cache.t_stop:
            cache.stored = mask
        return mask
    if cache.stored is None:
        raise RuntimeError(f"no mask cached at T_stop={cache.t_stop} (step {step_index})")
    return cache.stored


def resize_mask_to_block(mask, block_res: int) -> np.ndarray:
    """Bilinear resize of a G x G mask to per-query weights of length block_res**2."""
    m = np.asarray(mask, dtype=np.float32)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"mask must be square, got {m.shape}")
    if block_res > m.shape[0]:
        raise ShapeError(f"block resolution {block_res} exceeds mask grid {m.shape[0]}")
    return resize_2d(m, block_res, block_res, "bilinear").reshape(-1)
