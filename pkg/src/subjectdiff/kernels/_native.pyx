# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled mask kernels; see ``_fallback`` for the reference semantics."""
import numpy as np
from libc.stdlib cimport malloc, free, qsort


cdef struct Entry:
    double value
    Py_ssize_t index


cdef int _cmp_entry(const void *pa, const void *pb) noexcept nogil:
    cdef const Entry *a = <const Entry *>pa
    cdef const Entry *b = <const Entry *>pb
    if a.value > b.value:
        return -1
    if a.value < b.value:
        return 1
    if a.index < b.index:
        return -1
    if a.index > b.index:
        return 1
    return 0


def topk_order(values, k):
    cdef double[::1] v = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t kk = min(max(<Py_ssize_t>k, 0), n)
    out = np.zeros(kk, dtype=np.int64)
    if kk == 0:
        return out
    cdef long long[::1] o = out
    cdef Entry *buf = <Entry *>malloc(n * sizeof(Entry))
    cdef Py_ssize_t i
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                buf[i].value = v[i]
                buf[i].index = i
            qsort(buf, n, sizeof(Entry), _cmp_entry)
            for i in range(kk):
                o[i] = buf[i].index
    finally:
        free(buf)
    return out


def allocate_subjects(maps, counts):
    """Round-robin allocation; each subject walks its own presorted cell order.

    The first untaken cell in a subject's (value desc, index asc) order is
    exactly its best remaining cell, so each order is scanned once.
    """
    cdef double[:, ::1] m = np.ascontiguousarray(maps, dtype=np.float64)
    cdef long long[::1] want = np.ascontiguousarray(counts, dtype=np.int64)
    cdef Py_ssize_t n = m.shape[0]
    cdef Py_ssize_t size = m.shape[1]
    owner_arr = np.full(size, -1, dtype=np.int64)
    cdef long long[::1] owner = owner_arr
    cdef Py_ssize_t j, p, cell
    cdef bint pending = True
    if int(np.asarray(want).clip(min=0).sum()) > size:
        raise ValueError("requested cells exceed grid capacity")
    if n == 0 or size == 0:
        return owner_arr
    cdef Entry *order = <Entry *>malloc(n * size * sizeof(Entry))
    cdef Py_ssize_t *cursor = <Py_ssize_t *>malloc(n * sizeof(Py_ssize_t))
    cdef long long *held = <long long *>malloc(n * sizeof(long long))
    if order == NULL or cursor == NULL or held == NULL:
        free(order)
        free(cursor)
        free(held)
        raise MemoryError()
    try:
        with nogil:
            for j in range(n):
                for p in range(size):
                    order[j * size + p].value = m[j, p]
                    order[j * size + p].index = p
                qsort(&order[j * size], size, sizeof(Entry), _cmp_entry)
                cursor[j] = 0
                held[j] = 0
            while pending:
                pending = False
                for j in range(n):
                    if held[j] < want[j]:
                        cell = order[j * size + cursor[j]].index
                        while owner[cell] >= 0:
                            cursor[j] += 1
                            cell = order[j * size + cursor[j]].index
                        owner[cell] = j
                        cursor[j] += 1
                        held[j] += 1
                        if held[j] < want[j]:
                            pending = True
    finally:
        free(order)
        free(cursor)
        free(held)
    return owner_arr
