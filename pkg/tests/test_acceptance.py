"""Acceptance criteria, one test each, timed against their budgets.

A PASS/FAIL line per criterion is printed in the pytest terminal summary.
"""
import math

import numpy as np
import pytest

from _helpers import assert_bytes_equal
from subjectdiff import oracles
from subjectdiff.backbone import BackboneConfig, Model
from subjectdiff.ccp import (
    COMBINE_MODES,
    combine_features,
    cross_layer_attend,
    cross_scale_attend,
    deep_projection,
    project_subject,
    token_count,
)
from subjectdiff.checks import SWEEP_GAMMAS, check_alg1, check_grad, grad_model_config, random_map
from subjectdiff.cli import main
from subjectdiff.curriculum import MULTIVIEW, crop_ratio, mix_probabilities, render_scene
from subjectdiff.fileio import decode_tensors, load_checkpoint, save_checkpoint, write_ppm
from subjectdiff.masks import max_normalize, multi_subject_select, topk_select
from subjectdiff.sampler import SamplerConfig, cfg_combine, customize, ddim_timesteps, ddim_update, sample_text
from subjectdiff.tensor import Rng
from subjectdiff.training import (
    NoiseSchedule,
    TrainConfig,
    TrainState,
    fixed_training_set,
    loss_and_grads,
    run_curriculum_training,
    train_step,
)

PROMPT = "a red toy on the grass"


@pytest.fixture(scope="module")
def seeded_checkpoint(tmp_path_factory):
    """Default-size model written to and read back from an RCPP checkpoint."""
    path = tmp_path_factory.mktemp("ckpt") / "seeded.rcpp"
    save_checkpoint(path, Model.create(BackboneConfig(), seed=0))
    return load_checkpoint(path)


@pytest.mark.criterion(1, "Top-K law vs sort oracle", 5)
def test_c01_topk_law(acceptance):
    rng = Rng(101)
    for _ in range(1000):
        M = random_map(rng, 16)
        for g in SWEEP_GAMMAS:
            got = topk_select(M, g)
            assert np.array_equal(got, np.asarray(oracles.sort_topk_oracle(M, g), np.float32))
            assert np.count_nonzero(got) == math.floor(g * 256 + 1e-9)


@pytest.mark.criterion(2, "max-normalisation law", 2)
def test_c02_max_norm(acceptance):
    rng = Rng(202)
    for i in range(1000):
        g = SWEEP_GAMMAS[i % len(SWEEP_GAMMAS)]
        sel = topk_select(random_map(rng, 16), g)
        out = max_normalize(sel)
        if np.any(sel):
            assert out.max() == np.float32(1.0)
            assert np.array_equal(out != 0, sel != 0)
        else:
            assert not np.any(out)
    assert not np.any(max_normalize(np.zeros((16, 16), np.float32)))


@pytest.mark.criterion(3, "multi-subject selection vs step-through oracle", 10)
def test_c03_alg1(acceptance):
    report = check_alg1(trials=500, seed=303)
    assert report.status == "PASS", report.line()
    assert report.trials == 500
    rng = Rng(304)
    for _ in range(50):
        M = random_map(rng, 8)
        g = rng.uniform()
        assert_bytes_equal(multi_subject_select([M], [g])[0], topk_select(M, g))


@pytest.mark.criterion(4, "guidance-mask degeneracies", 30)
def test_c04_degeneracies(acceptance, seeded_checkpoint):
    model = seeded_checkpoint
    ref = render_scene("square", "blue", "sand", (0.6, 0.0, 0.05, 0.22), model.cfg.image_size)
    cfg = SamplerConfig(steps=25, seed=11)
    pure, _ = sample_text(model, PROMPT, cfg)
    no_subjects, _ = customize(model, PROMPT, [], cfg)
    gamma0, _ = customize(model, PROMPT, [(ref, "toy")], SamplerConfig(steps=25, seed=11, gamma=0.0))
    assert_bytes_equal(no_subjects, pure)
    assert_bytes_equal(gamma0, pure)
    ones, _ = customize(model, PROMPT, [(ref, "toy")], SamplerConfig(steps=25, seed=11, mask_override="ones"))
    unmasked, _ = customize(model, PROMPT, [(ref, "toy")], SamplerConfig(steps=25, seed=11, mask_override="none"))
    assert_bytes_equal(ones, unmasked)
    assert not np.array_equal(unmasked, pure)


@pytest.mark.criterion(5, "early-stop mask reuse and forward count", 30)
def test_c05_early_stop(acceptance, seeded_checkpoint):
    model = seeded_checkpoint
    ref = render_scene("circle", "red", "grass", (0.0, 0.0, 0.0, 0.25), model.cfg.image_size)
    before = model.forward_count
    _, trace = customize(model, PROMPT, [(ref, "toy")], SamplerConfig(steps=25, t_stop=12))
    assert model.forward_count - before == 62
    assert trace.total_forwards == 62
    assert trace.forward_counts["guidance"] == 12
    step12 = trace.masks[11][0]
    for k in range(12, 25):
        assert_bytes_equal(trace.masks[k][0], step12)


@pytest.mark.criterion(6, "curriculum schedules on a 2000-step dry run", 20)
def test_c06_curriculum(acceptance):
    S = 2000
    model = Model.create(BackboneConfig(), seed=0)
    tcfg = TrainConfig(steps=S, batch_size=1, seed=6)
    _, rows = run_curriculum_training(model, tcfg, dry_run=True)
    assert len(rows) == S
    cur = tcfg.curriculum(model.cfg.image_size)
    for step, kind, r, _ in rows:
        p_g, p_mv = mix_probabilities(step, S)
        assert p_g + p_mv == 1.0
        assert 1.0 <= r <= crop_ratio(step, cur)
    for d in range(10):
        block = range(d * S // 10, (d + 1) * S // 10)
        freq = sum(rows[s][1] == MULTIVIEW for s in block) / len(block)
        expected = sum(mix_probabilities(s, S)[1] for s in block) / len(block)
        assert abs(freq - expected) <= 0.05, (d, freq, expected)
    assert abs(crop_ratio(S, cur) - math.sqrt(10.0)) <= 1e-6


@pytest.mark.criterion(7, "backprop vs central finite differences", 60)
def test_c07_gradients(acceptance):
    report = check_grad(seed=0, tol=1e-4)
    assert report.status == "PASS", report.line()
    model = Model.create(grad_model_config())
    assert model.cfg.latent_size == 8 and len(model.cfg.block_resolutions) == 1
    assert report.trials == len(model.trainable)


@pytest.mark.criterion(8, "frozen parameters unchanged by training", 60)
def test_c08_freeze(acceptance):
    model = Model.create(BackboneConfig(), seed=8)
    checksum = model.frozen_checksum()
    trainable_before = {k: v.copy() for k, v in model.trainable.items()}
    state, _ = run_curriculum_training(model, TrainConfig(steps=300, batch_size=1, seed=8))
    assert state.step == 300
    assert model.frozen_checksum() == checksum
    assert all(not np.array_equal(trainable_before[k], model.trainable[k]) for k in trainable_before)


@pytest.mark.criterion(9, "overfit a fixed 8-sample set", 120)
def test_c09_overfit(acceptance):
    model = Model.create(BackboneConfig(), seed=0)
    batch = fixed_training_set(model, n=8, seed=0)
    schedule = NoiseSchedule.linear(model.cfg.timesteps)
    state = TrainState.for_model(model, lr=1e-3)
    for _ in range(300):
        train_step(model, state, batch, schedule)
    start = state.history[0]
    final, _ = loss_and_grads(model, batch, schedule, need_grad=False)
    assert final <= 0.5 * start, (start, final)


@pytest.mark.criterion(10, "projector laws", 5)
def test_c10_ccp(acceptance, default_model):
    model = default_model
    w = model.trainable
    rng = Rng(10)
    n, c0 = model.cfg.image_tokens, model.cfg.encoder_dim
    deep = rng.normal((n, c0))
    shallow = [rng.normal((n, c0)) for _ in range(model.cfg.shallow_layers)]
    high = rng.normal((4 * n, c0))
    f = lambda a, b: np.asarray(a, np.float64) @ np.asarray(b, np.float64)  # noqa: E731
    src = np.concatenate(shallow)
    for got, kv, (wq, wk, wv), path in (
        (cross_layer_attend(deep, shallow, w), src, ("wqs", "wks", "wvs"), "shallow"),
        (cross_scale_attend(deep, high, w), high, ("wqh", "wkh", "whv"), "high"),
    ):
        att = oracles.naive_attention_oracle(f(deep, w["ccp." + wq]), f(kv, w["ccp." + wk]), f(kv, w["ccp." + wv]),
                                             c0**-0.5)
        p = f"ccp.{path}."
        want = oracles.naive_mlp_oracle(att, w[p + "w1"], w[p + "b1"], w[p + "w2"], w[p + "b2"])
        np.testing.assert_allclose(got, want, atol=1e-5, rtol=0)
    ref = render_scene("diamond", "green", "sky", (0.2, 0.0, 0.0, 0.25), model.cfg.image_size)
    feats = project_subject(model, ref)
    assert feats.f_ci.shape[0] == 2 * n
    deep_proj = deep_projection(feats.f_deep, w)
    zero = np.zeros_like(feats.f_high_prime)
    assert np.array_equal(combine_features(feats.f_shallow_prime, deep_proj, zero, "concat_add"),
                          np.concatenate([feats.f_shallow_prime, deep_proj]))
    expected = {"concat_add": 2 * n, "concat_concat": 3 * n, "add_concat": 2 * n}
    for mode in COMBINE_MODES:
        out = project_subject(model, ref, mode).f_ci
        assert out.shape == (expected[mode], model.cfg.condition_dim) and token_count(n, mode) == expected[mode]


@pytest.mark.criterion(11, "sampler algebra", 5)
def test_c11_sampler_algebra(acceptance):
    rng = Rng(11)
    u, c = rng.normal((8, 16, 16)), rng.normal((8, 16, 16))
    assert_bytes_equal(cfg_combine(u, c, 0.0), u)
    assert_bytes_equal(cfg_combine(u, c, 1.0), c)
    schedule = NoiseSchedule.linear(50)
    z0, eps = rng.normal((8, 16, 16)), rng.normal((8, 16, 16))
    for t in (1, 17, 50):
        a = schedule[t]
        z_t = math.sqrt(a) * z0.astype(np.float64) + math.sqrt(1 - a) * eps.astype(np.float64)
        assert_bytes_equal(ddim_update(z_t, eps, t, 0, schedule), z0)

    def oracle_eps(z, t):
        a = schedule[t]
        return (z.astype(np.float64) - math.sqrt(a) * z0.astype(np.float64)) / math.sqrt(1 - a)

    a_T = schedule[50]
    z = (math.sqrt(a_T) * z0.astype(np.float64) + math.sqrt(1 - a_T) * eps.astype(np.float64)).astype(np.float32)
    for t, t_prev in ddim_timesteps(50, 25):
        e = oracle_eps(z, t).astype(np.float32)
        z = ddim_update(z, cfg_combine(e, e, 7.5), t, t_prev, schedule)
    np.testing.assert_allclose(z, z0, atol=1e-5, rtol=0)


@pytest.mark.criterion(12, "manifest re-run and checkpoint persistence", 30)
def test_c12_determinism(acceptance, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("backbone.seed = 12\ntrain.steps = 4\ntrain.seed = 12\ntrain.batch_size = 1\n")
    ckpt = tmp_path / "model.rcpp"
    assert main(["train", "--config", str(cfg), "--out", str(ckpt)]) == 0
    blob = ckpt.read_bytes()
    decode_tensors(blob)  # validates the CRC
    save_checkpoint(tmp_path / "again.rcpp", load_checkpoint(ckpt))
    assert (tmp_path / "again.rcpp").read_bytes() == blob

    write_ppm(tmp_path / "ref.ppm", render_scene("ring", "orange", "water", (0.0, 0.0, 0.0, 0.25), 32))
    assert main(["customize", "--checkpoint", str(ckpt), "--prompt", PROMPT, "--subject",
                 f"{tmp_path / 'ref.ppm'}:toy", "--seed", "5", "--out", str(tmp_path / "first.ppm"),
                 "--trace-dir", str(tmp_path / "trace")]) == 0
    assert main(["customize", "--manifest", str(tmp_path / "trace" / "manifest.txt"),
                 "--out", str(tmp_path / "second.ppm"), "--trace-dir", str(tmp_path / "trace2")]) == 0
    assert (tmp_path / "first.ppm").read_bytes() == (tmp_path / "second.ppm").read_bytes()
