"""Pure-Python/numpy versions of the mask kernels.

Same contracts as the compiled ``_native`` module; used when the extension is
not built or ``SUBJECTDIFF_PURE_PYTHON=1`` is set.
"""
import numpy as np


def topk_order(values, k):
    """Flat indices of the ``k`` largest values, largest first, ties by lowest index."""
    values = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
    k = int(k)
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    return np.argsort(-values, kind="stable")[:k].astype(np.int64)


def allocate_subjects(maps, counts):
    """Round-robin disjoint allocation of grid cells to subjects.

    Each pass visits subjects in order; a subject still short of its count
    takes its highest-scoring unallocated cell (lowest index on ties).
    Returns the owning subject per cell, -1 where unallocated.
    """
    maps = np.ascontiguousarray(maps, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.int64)
    n, size = maps.shape
    if int(counts.clip(min=0).sum()) > size:
        raise ValueError("requested cells exceed grid capacity")
    owner = np.full(size, -1, dtype=np.int64)
    taken = np.zeros(size, dtype=bool)
    held = np.zeros(n, dtype=np.int64)
    while np.any(held < counts):
        for j in range(n):
            if held[j] < counts[j]:
                pos = int(np.argmax(np.where(taken, -np.inf, maps[j])))
                owner[pos] = j
                taken[pos] = True
                held[j] += 1
    return owner
