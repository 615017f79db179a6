"""The oracles themselves, checked on hand-worked cases, then the suites."""
import math

import pytest

from subjectdiff import oracles
from subjectdiff.checks import SUITES, run_suite


def test_sort_topk_oracle_hand_case():
    M = [[3.0, 1.0], [3.0, 2.0]]
    assert oracles.sort_topk_oracle(M, 0.5) == [[3.0, 0.0], [3.0, 0.0]]
    assert oracles.sort_topk_oracle(M, 0.25) == [[3.0, 0.0], [0.0, 0.0]]


def test_alg1_oracle_hand_case():
    maps = [[[0.9, 0.8], [0.1, 0.0]], [[0.95, 0.2], [0.7, 0.0]]]
    got = oracles.alg1_stepthrough_oracle(maps, [0.5, 0.25])
    assert got == [[[0.9, 0.8], [0.0, 0.0]], [[0.0, 0.0], [0.7, 0.0]]]
    with pytest.raises(ValueError):
        oracles.alg1_stepthrough_oracle(maps, [0.75, 0.5])


def test_attention_oracle_uniform_keys():
    out = oracles.naive_attention_oracle([[1.0, 0.0]], [[0.0, 1.0], [0.0, 1.0]], [[2.0], [4.0]])
    assert out == [[3.0]]


def test_resize_oracle_upsample():
    out = oracles.resize_oracle([[0.0, 1.0]], 1, 4)
    assert out == [[0.0, 0.25, 0.75, 1.0]]


def test_mlp_and_softmax_oracles():
    assert oracles.naive_mlp_oracle([[0.0]], [[1.0]], [0.0], [[1.0]], [0.5]) == [[0.5]]
    p = oracles.softmax_oracle([[0.0, math.log(3.0)]])
    assert math.isclose(p[0][0], 0.25) and math.isclose(p[0][1], 0.75)
    assert oracles.mc_mean([1, 2, 3]) == 2.0


@pytest.mark.parametrize("suite", ["attention", "resize", "matmul", "grad"])
def test_quick_suites_pass(suite):
    (report,) = run_suite(suite)
    assert report.status == "PASS", report.line()
    assert report.trials > 0


def test_unknown_suite():
    with pytest.raises(KeyError):
        run_suite("nope")
    assert {"topk", "alg1", "attention", "resize", "matmul", "grad"} == set(SUITES)
