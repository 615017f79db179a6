import math

import numpy as np
import pytest

from subjectdiff.backbone import Model
from subjectdiff.checks import grad_model_config
from subjectdiff.training import (
    NoiseSchedule,
    TrainConfig,
    TrainState,
    fixed_training_set,
    gradient_check,
    loss_and_grads,
    noise_latent,
    run_curriculum_training,
    train_step,
    training_loss,
    write_metrics,
)
from subjectdiff.curriculum import synth_generic_sample
from subjectdiff.tensor import NonFiniteError, Rng, ShapeError


def test_schedule():
    s = NoiseSchedule.linear(50)
    assert s.T == 50 and s[0] == 1.0 and math.isclose(s[50], 0.02, rel_tol=1e-6)
    assert np.all(np.diff(s.alpha_hat) < 0)
    with pytest.raises(ValueError):
        s[51]


def test_noise_latent_endpoints():
    s = NoiseSchedule.linear(10)
    z0, eps = Rng(0).normal((2, 3)), Rng(1).normal((2, 3))
    assert np.array_equal(noise_latent(z0, 0, eps, s), z0)
    with pytest.raises(ShapeError):
        noise_latent(z0, 1, eps[:1], s)


def test_training_loss_with_oracle_denoiser_is_zero(small_model):
    rng = Rng(2)
    sample = synth_generic_sample(rng, 1.0, 16, 16)
    eps = rng.normal((4, 8, 8))
    loss = training_loss(small_model, [sample], [7], [eps], denoiser=lambda z, t, c, v: eps)
    assert loss == 0.0
    assert training_loss(small_model, [sample], [7], [eps]) > 0


def test_gradients_match_finite_differences():
    model = Model.create(grad_model_config(), seed=1)
    batch = fixed_training_set(model, n=2, seed=1)
    report = gradient_check(model, batch, names=["ccp.deep.w2", "den.0.vis.wk", "ccp.wqh"])
    assert max(report.values()) <= 1e-4, report


def test_train_step_only_touches_trainable(small_model):
    frozen = small_model.frozen_checksum()
    before = {k: v.copy() for k, v in small_model.trainable.items()}
    batch = fixed_training_set(small_model, n=2)
    state = TrainState.for_model(small_model)
    train_step(small_model, state, batch, NoiseSchedule.linear(small_model.cfg.timesteps))
    assert small_model.frozen_checksum() == frozen
    assert state.step == 1 and len(state.history) == 1
    assert any(not np.array_equal(before[k], small_model.trainable[k]) for k in before)


def test_non_finite_loss_raises(small_model):
    batch = fixed_training_set(small_model, n=1)
    batch[0].eps[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        train_step(small_model, TrainState.for_model(small_model), batch, NoiseSchedule.linear(20))


def test_loss_requires_batch(small_model):
    with pytest.raises(ValueError):
        loss_and_grads(small_model, [], NoiseSchedule.linear(20))


def test_curriculum_run_is_deterministic(tmp_path, small_model):
    cfg = TrainConfig(steps=4, batch_size=1, seed=3)
    a = Model(small_model.cfg, small_model.frozen, dict(small_model.trainable))
    b = Model(small_model.cfg, small_model.frozen, dict(small_model.trainable))
    _, rows_a = run_curriculum_training(a, cfg, metrics_path=tmp_path / "m.csv")
    _, rows_b = run_curriculum_training(b, cfg)
    assert rows_a == rows_b
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "step,kind,r_sample,loss" and len(lines) == 5


def test_write_metrics_lf_only(tmp_path):
    write_metrics(tmp_path / "x.csv", [(0, "generic", 1.0, 2.5)])
    assert (tmp_path / "x.csv").read_bytes() == b"step,kind,r_sample,loss\n0,generic,1.0,2.5\n"
