"""Oracle-check suites: main-path operations against ``oracles``."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import oracles
from .tensor import Rng

SWEEP_GAMMAS = (0.0, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 1.0)


@dataclass
class OracleReport:
    name: str
    status: str
    max_abs_err: float
    max_rel_err: float
    trials: int
    seconds: float = 0.0

    def line(self) -> str:
        return (f"{self.name}\t{self.status}\tmax_abs={self.max_abs_err:.3e}\t"
                f"max_rel={self.max_rel_err:.3e}\ttrials={self.trials}")


class _Tracker:
    def __init__(self, name, tol_abs=0.0, tol_rel=None):
        self.name, self.tol_abs, self.tol_rel = name, tol_abs, tol_rel
        self.abs = self.rel = 0.0
        self.trials = 0
        self.ok = True
        self.t0 = time.perf_counter()

    def compare(self, got, want):
        got = np.asarray(got, dtype=np.float64)
        want = np.asarray(want, dtype=np.float64)
        if got.shape != want.shape:
            self.ok = False
            return
        diff = np.abs(got - want)
        a = float(diff.max()) if diff.size else 0.0
        scale = float(np.abs(want).max()) if want.size else 0.0
        r = a / scale if scale > 0 else a
        self.abs, self.rel = max(self.abs, a), max(self.rel, r)
        if self.tol_rel is not None:
            self.ok &= r <= self.tol_rel
        else:
            self.ok &= a <= self.tol_abs

    def require(self, cond):
        self.ok &= bool(cond)

    def report(self):
        return OracleReport(self.name, "PASS" if self.ok else "FAIL", self.abs, self.rel, self.trials,
                            time.perf_counter() - self.t0)


def random_map(rng: Rng, G: int) -> np.ndarray:
    return rng.uniform((G, G)).astype(np.float32)


def check_topk(trials=1000, G=16, seed=0):
    from .masks import selection_count, topk_select

    tr = _Tracker("topk")
    rng = Rng(seed)
    for _ in range(trials):
        M = random_map(rng, G)
        for g in SWEEP_GAMMAS:
            got = topk_select(M, g)
            tr.compare(got, oracles.sort_topk_oracle(M, g))
            tr.require(int(np.count_nonzero(got)) == selection_count(g, G * G))
        tr.trials += 1
    return tr.report()


def random_alg1_instance(rng: Rng, max_n=4, max_g=8):
    N = 1 + rng.integers(max_n)
    G = 2 + rng.integers(max_g - 1)
    maps = [random_map(rng, G) for _ in range(N)]
    if rng.uniform() < 0.3:  # exercise ties
        maps = [np.round(m * 4) / 4 for m in maps]
    budget = 1.0
    ratios = []
    for _ in range(N):
        g = round(rng.uniform(high=budget / N * 1.5), 3)
        g = min(g, budget)
        ratios.append(g)
        budget -= g
    return maps, ratios


def check_alg1(trials=500, seed=0):
    from .masks import multi_subject_select, topk_select

    tr = _Tracker("alg1")
    rng = Rng(seed)
    for _ in range(trials):
        maps, ratios = random_alg1_instance(rng)
        got = multi_subject_select(maps, ratios)
        want = oracles.alg1_stepthrough_oracle(maps, ratios)
        for g, w in zip(got, want):
            tr.compare(g, w)
        support = np.stack([g != 0 for g in got])
        tr.require(support.sum(axis=0).max() <= 1)
        if len(maps) == 1:
            tr.require(np.array_equal(got[0], topk_select(maps[0], ratios[0])))
        tr.trials += 1
    return tr.report()


def check_attention(trials=50, seed=0):
    from .backbone import BackboneConfig, Model
    from .ccp import cross_layer_attend, cross_scale_attend
    from .layers import attention_fwd

    tr = _Tracker("attention", tol_abs=1e-5)
    rng = Rng(seed)
    for _ in range(trials):
        n, m, d = 1 + rng.integers(12), 1 + rng.integers(12), 2 + rng.integers(8)
        Q, K, V = (rng.normal(s).astype(np.float64) for s in ((n, d), (m, d), (m, d)))
        out, _ = attention_fwd(Q, K, V, 1)
        tr.compare(out, oracles.naive_attention_oracle(Q, K, V, 1.0 / math.sqrt(d)))
        tr.trials += 1
    cfg = BackboneConfig(image_tokens=4, encoder_dim=8, condition_dim=8, text_dim=8, model_dim=8, encoder_depth=3)
    model = Model.create(cfg, seed=seed)
    w = model.trainable
    for _ in range(5):
        n = cfg.image_tokens
        deep = rng.normal((n, 8))
        shallow = [rng.normal((n, 8)) for _ in range(cfg.shallow_layers)]
        high = rng.normal((4 * n, 8))
        sc = 1.0 / math.sqrt(8)
        for got, src, wq, wk, wv, path in (
            (cross_layer_attend(deep, shallow, w), np.concatenate(shallow), "wqs", "wks", "wvs", "shallow"),
            (cross_scale_attend(deep, high, w), high, "wqh", "wkh", "whv", "high"),
        ):
            f = lambda a, b: np.asarray(a, np.float64) @ np.asarray(b, np.float64)  # noqa: E731
            att = oracles.naive_attention_oracle(f(deep, w["ccp." + wq]), f(src, w["ccp." + wk]),
                                                 f(src, w["ccp." + wv]), sc)
            p = f"ccp.{path}."
            want = oracles.naive_mlp_oracle(att, w[p + "w1"], w[p + "b1"], w[p + "w2"], w[p + "b2"])
            tr.compare(got, want)
            tr.trials += 1
    return tr.report()


def check_resize(trials=50, seed=0):
    from .tensor import resize_2d

    tr = _Tracker("resize", tol_abs=1e-6)
    rng = Rng(seed)
    for _ in range(trials):
        h, w = 1 + rng.integers(9), 1 + rng.integers(9)
        oh, ow = 1 + rng.integers(17), 1 + rng.integers(17)
        x = rng.normal((h, w))
        for mode in ("nearest", "bilinear"):
            tr.compare(resize_2d(x, oh, ow, mode), oracles.resize_oracle(x, oh, ow, mode))
        tr.trials += 1
    return tr.report()


def check_matmul(trials=30, seed=0):
    from .tensor import matmul, softmax_rows

    tr = _Tracker("matmul_softmax", tol_abs=1e-6)
    rng = Rng(seed)
    for _ in range(trials):
        n, k, m = 1 + rng.integers(32), 1 + rng.integers(32), 1 + rng.integers(32)
        a, b = rng.normal((n, k)), rng.normal((k, m))
        want = np.asarray(oracles.naive_matmul_oracle(a, b))
        got = matmul(a, b)
        # relative agreement per element, scaled by the operand magnitudes
        scale = np.abs(a).astype(np.float64) @ np.abs(b).astype(np.float64)
        tr.require(np.all(np.abs(got - want) <= 1e-6 * np.maximum(scale, 1e-30)))
        tr.compare(softmax_rows(a), oracles.softmax_oracle(a))
        tr.trials += 1
    return tr.report()


def grad_model_config():
    """Down-scaled backbone (8 x 8 latent, one block) for gradient checks."""
    from .backbone import BackboneConfig

    return BackboneConfig(latent_size=8, latent_channels=4, text_dim=8, image_tokens=4, encoder_dim=8,
                          condition_dim=8, shallow_layers=2, encoder_depth=2, image_size=16,
                          block_resolutions=(8,), heads=2, model_dim=8, timesteps=10)


def check_grad(seed=0, tol=1e-4):
    from .backbone import Model
    from .training import fixed_training_set, gradient_check

    tr = _Tracker("grad")
    model = Model.create(grad_model_config(), seed=seed)
    batch = fixed_training_set(model, n=2, seed=seed)
    rep = gradient_check(model, batch)
    tr.rel = max(rep.values())
    tr.trials = len(rep)
    tr.require(tr.rel <= tol)
    return tr.report()


SUITES = {
    "topk": check_topk,
    "alg1": check_alg1,
    "attention": check_attention,
    "resize": check_resize,
    "matmul": check_matmul,
    "grad": check_grad,
}


def run_suite(name: str):
    if name == "all":
        return [fn() for fn in SUITES.values()]
    if name not in SUITES:
        raise KeyError(name)
    return [SUITES[name]()]
