import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subjectdiff import oracles
from subjectdiff.backbone import AttentionRecord
from subjectdiff.masks import (
    CapacityError,
    MaskCache,
    aggregate_cross_maps,
    aggregate_self_maps,
    build_subject_masks,
    early_stop_mask,
    fuse_maps,
    max_normalize,
    multi_subject_select,
    resize_mask_to_block,
    selection_count,
    topk_select,
)
from subjectdiff.tensor import Rng, ShapeError, softmax64


def _record(seed=0, res=(4, 2, 4), heads=2, n_text=3):
    rng = Rng(seed)
    rec = AttentionRecord(resolutions=list(res))
    for r in res:
        rec.cross_maps.append(softmax64(rng.normal((heads, r * r, n_text)).astype(np.float64)))
        rec.self_maps.append(softmax64(rng.normal((heads, r * r, r * r)).astype(np.float64)))
    return rec


def test_selection_count_floor():
    assert selection_count(0.2, 256) == 51
    assert selection_count(0.15, 256) == 38
    assert selection_count(0.3, 100) == 30  # 0.3 * 100 is 29.999... in binary
    assert selection_count(1.0, 7) == 7
    with pytest.raises(ValueError):
        selection_count(1.5, 4)


def test_topk_ties_lowest_index():
    M = np.array([[1.0, 2.0], [2.0, 1.0]], np.float32)
    out = topk_select(M, 0.25)
    assert out[0, 1] == 2.0 and np.count_nonzero(out) == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 5000), st.integers(1, 10), st.floats(0, 1))
def test_topk_matches_sort_oracle(seed, G, gamma):
    M = np.floor(Rng(seed).uniform((G, G)) * 5).astype(np.float32) + 0.5
    np.testing.assert_array_equal(topk_select(M, gamma), np.asarray(oracles.sort_topk_oracle(M, gamma), np.float32))


def test_max_normalize():
    s = np.array([[0.0, 0.5], [0.25, 0.0]], np.float32)
    n = max_normalize(s)
    assert n.max() == 1.0 and np.array_equal(n != 0, s != 0)
    assert np.array_equal(max_normalize(np.zeros((2, 2))), np.zeros((2, 2)))
    assert np.array_equal(max_normalize(s, binary=True), (s > 0).astype(np.float32))


def test_multi_subject_disjoint_and_capacity():
    rng = Rng(1)
    maps = [rng.uniform((4, 4)) for _ in range(3)]
    sel = multi_subject_select(maps, [0.25, 0.25, 0.25])
    support = np.stack([s != 0 for s in sel])
    assert support.sum(axis=0).max() <= 1
    assert [int(s.sum()) for s in support] == [4, 4, 4]
    with pytest.raises(CapacityError):
        multi_subject_select(maps, [0.5, 0.5, 0.25])
    copy = [m.copy() for m in maps]
    multi_subject_select(maps, [0.25] * 3)
    assert all(np.array_equal(a, b) for a, b in zip(maps, copy))


def test_build_subject_masks_single_is_topk():
    M = Rng(2).uniform((4, 4)).astype(np.float32)
    ms = build_subject_masks([M], [0.25])
    assert np.array_equal(ms.selected[0], topk_select(M, 0.25))
    assert ms.normalized[0].max() == 1.0
    assert ms.flag.sum() == 4


def test_cross_aggregation_low_blocks_only():
    rec = _record()
    col = aggregate_cross_maps(rec, [1])
    assert col.shape == (16, 1)
    # only the 2x2 block contributes in "low" mode
    want = rec.cross_maps[1][:, :, 1].mean(axis=0).reshape(2, 2)
    from subjectdiff.tensor import resize_2d

    np.testing.assert_allclose(col.reshape(4, 4), resize_2d(want, 4, 4), atol=1e-6)
    assert not np.allclose(aggregate_cross_maps(rec, [1], "all"), col)
    with pytest.raises(ValueError):
        aggregate_cross_maps(rec, [])
    with pytest.raises(ValueError):
        aggregate_cross_maps(_record(res=(4,)), [0], "low")


def test_self_aggregation_is_row_stochastic():
    rec = _record()
    for src in ("high", "all"):
        m = aggregate_self_maps(rec, src)
        assert m.shape == (16, 16)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-5)


def test_fuse_maps():
    rec = _record()
    s = aggregate_self_maps(rec)
    c = aggregate_cross_maps(rec, [0])
    fused = fuse_maps(s, c)
    np.testing.assert_allclose(fused.reshape(-1), (s.astype(np.float64) @ c.astype(np.float64))[:, 0], atol=1e-6)
    assert np.array_equal(fuse_maps(None, c), c.reshape(4, 4))
    with pytest.raises(ShapeError):
        fuse_maps(np.eye(9), c)


def test_early_stop_cache():
    cache = MaskCache(t_stop=3)
    calls = []

    def provider():
        calls.append(1)
        return np.full((2, 2), float(len(calls)))

    got = [early_stop_mask(k, provider, cache) for k in range(1, 7)]
    assert len(calls) == 3 and cache.fresh_count == 3
    assert all(g is got[2] for g in got[3:])
    with pytest.raises(RuntimeError):
        early_stop_mask(2, provider, MaskCache(t_stop=1))  # step 1 never ran


def test_resize_mask_to_block():
    m = np.arange(16, dtype=np.float32).reshape(4, 4)
    assert np.array_equal(resize_mask_to_block(m, 4), m.reshape(-1))
    assert resize_mask_to_block(m, 2).shape == (4,)
    with pytest.raises(ShapeError):
        resize_mask_to_block(m, 8)
