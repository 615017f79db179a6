"""Dense float32 tensor kernels.

Tensors are plain ``numpy.ndarray`` values with dtype float32, rank <= 4 and
C (row-major) layout.  Reductions accumulate in float64 and round once on the
way out, which keeps results identical across BLAS builds at toy sizes.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

MAX_RANK = 4


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    """Coerce ``x`` to a contiguous finite tensor of rank <= 4."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK}")
    if arr.ndim and 0 in arr.shape:
        raise ShapeError(f"zero extent in shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)
    return out.astype(np.float32)


def softmax_rows(x) -> np.ndarray:
    x64 = np.asarray(x, dtype=np.float64)
    if x64.ndim != 2:
        raise ShapeError(f"softmax_rows expects rank 2, got shape {x64.shape}")
    return softmax64(x64).astype(np.float32)


def softmax64(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def resize_matrix(n_in: int, n_out: int, mode: str = "bilinear") -> np.ndarray:
    """1-D resampling operator of shape (n_out, n_in), align_corners=False.

    Applying it along both axes (``R_h @ x @ R_w.T``) is the 2-D resize; the
    explicit matrix form doubles as the adjoint used in backprop.
    """
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"resize extents must be >= 1, got {n_in} -> {n_out}")
    R = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    if mode == "nearest":
        for i in range(n_out):
            R[i, min(int(math.floor((i + 0.5) * scale)), n_in - 1)] = 1.0
    elif mode == "bilinear":
        for i in range(n_out):
            src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
            lo = int(math.floor(src))
            hi = min(lo + 1, n_in - 1)
            w = src - lo
            R[i, lo] += 1.0 - w
            R[i, hi] += w
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    return R


def resize_2d(x, out_h: int, out_w: int, mode: str = "bilinear") -> np.ndarray:
    x64 = np.asarray(x, dtype=np.float64)
    if x64.ndim != 2:
        raise ShapeError(f"resize_2d expects rank 2, got shape {x64.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"zero target extent {out_h}x{out_w}")
    h, w = x64.shape
    if (h, w) == (out_h, out_w):
        return x64.astype(np.float32)
    out = resize_matrix(h, out_h, mode) @ x64 @ resize_matrix(w, out_w, mode).T
    if mode == "bilinear":
        # convex weights, but keep the range law exact under rounding
        out = np.clip(out, x64.min(), x64.max())
    return out.astype(np.float32)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, evaluated in float64."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x64 = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x64)
    flat = x64.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x64))
        flat[i] = orig - h
        fm = float(f(x64))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation at element {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return grad


class Rng:
    """Counter-based generator: Philox-4x64 keyed by ``seed``.

    ``counter`` is the number of 64-bit words consumed, so ``Rng(s, c)``
    resumes any stream exactly.  Uniforms take the top 53 bits of a word;
    normals use Box-Muller on pairs of uniforms.
    """

    def __init__(self, seed: int = 0, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0
        self._bits = np.random.Philox(key=self.seed)
        if counter:
            self._raw(int(counter))

    def _raw(self, n: int) -> np.ndarray:
        self.counter += n
        return self._bits.random_raw(n).astype(np.uint64)

    def split(self, index: int) -> "Rng":
        """Independent child stream; depends only on (seed, index)."""
        words = np.random.SeedSequence([self.seed, int(index)]).generate_state(1, np.uint64)
        return Rng(int(words[0]))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size) -> np.ndarray:
        n = int(np.prod(size))
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0, 1]
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(size).astype(np.float32)

    def integers(self, high: int, size=None):
        """Uniform integers in [0, high)."""
        u = self.uniform(size)
        if size is None:
            return min(int(u * high), high - 1)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"
