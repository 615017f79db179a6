"""Forward noising, the epsilon-prediction MSE objective and the
restricted-parameter training loop.

Only the projector (``ccp.*``) and the per-block visual key/value
projections (``den.*.vis.*``) receive gradients; everything else in the
model is frozen.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import Model, toy_autoencode
from .ccp import encode_subject, project_backward, project_encoded
from .curriculum import (
    GENERIC,
    CurriculumConfig,
    DataConfig,
    KindSampler,
    crop_ratio,
    sample_ratio,
    synth_generic_sample,
    synth_multiview_sample,
)
from .tensor import NonFiniteError, Rng, ShapeError, finite_diff_grad

log = logging.getLogger(__name__)


@dataclass
class NoiseSchedule:
    """Cumulative signal fractions ``alpha_hat[0..T]``; index 0 is the clean latent."""

    alpha_hat: np.ndarray

    @classmethod
    def linear(cls, T: int = 50, end: float = 0.02) -> "NoiseSchedule":
        t = np.arange(T + 1, dtype=np.float64)
        a = 1.0 - (1.0 - end) * t / T
        a[0] = 1.0
        return cls(a.astype(np.float32))

    @property
    def T(self) -> int:
        return len(self.alpha_hat) - 1

    def __getitem__(self, t) -> float:
        if not 0 <= int(t) <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_hat[int(t)])


def noise_latent(z0, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(a_t) * z0 + sqrt(1 - a_t) * eps``."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {z0.shape} and eps {eps.shape} differ")
    a = schedule[t]
    out = math.sqrt(a) * z0.astype(np.float64) + math.sqrt(1.0 - a) * eps.astype(np.float64)
    return out.astype(np.float32)


@dataclass
class PreparedSample:
    """A training sample with frozen-encoder outputs and latents precomputed."""

    encoded: object
    z0: np.ndarray
    f_ct: np.ndarray
    t: int
    eps: np.ndarray


def prepare(model: Model, sample, t: int, eps) -> PreparedSample:
    f_ct, _ = model.encode_text(sample.caption)
    z0 = toy_autoencode(sample.target_image, model.cfg.latent_channels)
    return PreparedSample(encode_subject(model, sample.reference_image), z0, f_ct, int(t), np.asarray(eps, np.float32))


def draw_noise(model: Model, rng: Rng, n: int):
    """``n`` (t, eps) pairs with t uniform over [1, T]."""
    c, r = model.cfg.latent_channels, model.cfg.latent_size
    out = []
    for _ in range(n):
        t = 1 + rng.integers(model.cfg.timesteps)
        out.append((t, rng.normal((c, r, r))))
    return out


def loss_and_grads(model: Model, batch, schedule: NoiseSchedule, params=None, need_grad=True):
    """Mean over the batch of ``||eps - eps_theta||^2`` and its trainable gradients."""
    p = params if params is not None else model.params64()
    total = 0.0
    grads = {}
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    for s in batch:
        f_ci, _, _, pcache = project_encoded(s.encoded, p, model.ccp_mode, keep=need_grad)
        z_t = noise_latent(s.z0, s.t, s.eps, schedule).astype(np.float64)
        pred, _, state = model._forward(z_t, s.t, np.asarray(s.f_ct, np.float64), [f_ci], [None],
                                        params=p, keep=need_grad)
        diff = pred - s.eps.astype(np.float64)
        total += float(np.sum(diff * diff))
        if need_grad:
            g_den, d_fci = model._backward(state, (2.0 / B) * diff, p)
            g_ccp = project_backward(pcache, d_fci[0], p)
            for name, g in list(g_den.items()) + list(g_ccp.items()):
                grads[name] = grads[name] + g if name in grads else g
    return total / B, grads


def training_loss(model: Model, samples, ts, eps_draws, schedule: NoiseSchedule | None = None, denoiser=None) -> float:
    """Batch loss for raw ``TrainSample`` inputs (no mask during training).

    ``denoiser(z_t, t, f_ct, f_ci) -> eps`` replaces the model's own
    prediction when given.
    """
    schedule = schedule or NoiseSchedule.linear(model.cfg.timesteps)
    prepared = [prepare(model, s, t, e) for s, t, e in zip(samples, ts, eps_draws)]
    if denoiser is None:
        return loss_and_grads(model, prepared, schedule, need_grad=False)[0]
    p = model.params64()
    total = 0.0
    for s in prepared:
        f_ci = project_encoded(s.encoded, p, model.ccp_mode)[0].astype(np.float32)
        z_t = noise_latent(s.z0, s.t, s.eps, schedule)
        d = np.asarray(denoiser(z_t, s.t, s.f_ct, f_ci), np.float64) - s.eps
        total += float(np.sum(d * d))
    return total / len(prepared)


@dataclass
class TrainState:
    """Adam state over the trainable parameters only."""

    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @classmethod
    def for_model(cls, model: Model, lr: float = 1e-3) -> "TrainState":
        zeros = {k: np.zeros(v.shape, np.float64) for k, v in model.trainable.items()}
        return cls(lr=lr, m=dict(zeros), v={k: z.copy() for k, z in zeros.items()})


def train_step(model: Model, state: TrainState, batch, schedule: NoiseSchedule) -> TrainState:
    """One Adam update of the trainable parameters; returns the advanced state."""
    loss, grads = loss_and_grads(model, batch, schedule)
    if not math.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss} at step {state.step}")
    if set(grads) != set(model.trainable):
        raise RuntimeError(f"gradient set mismatch: {sorted(set(grads) ^ set(model.trainable))}")
    k = state.step + 1
    c1 = 1.0 - state.beta1**k
    c2 = 1.0 - state.beta2**k
    new = {}
    for name, w in model.trainable.items():
        g = grads[name]
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new[name] = (np.asarray(w, np.float64) - update).astype(w.dtype)
    model.trainable = new
    state.step += 1
    state.history.append(loss)
    return state


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 2
    lr: float = 1e-3
    seed: int = 0
    r_min: float = 1.0
    r_max: float = math.sqrt(10.0)
    kind_sampling: str = "stratified"
    crop_multiview: bool = True
    data: DataConfig = DataConfig()

    def curriculum(self, base: int) -> CurriculumConfig:
        return CurriculumConfig(self.steps, self.r_min, self.r_max, base, self.crop_multiview, self.kind_sampling)


def make_sample(kind: str, rng: Rng, r_sample: float, model: Model, cfg: TrainConfig):
    base, target = model.cfg.image_size, model.cfg.target_image_size
    if kind == GENERIC:
        return synth_generic_sample(rng, r_sample, base, target, cfg.data)
    return synth_multiview_sample(rng, r_sample, base, target, cfg.data, crop=cfg.crop_multiview)


def run_curriculum_training(model: Model, cfg: TrainConfig, dry_run: bool = False, metrics_path=None):
    """Train for ``cfg.steps`` steps under the curriculum recipe.

    Returns ``(state, rows)`` with one ``(step, kind, r_sample, loss)`` row per
    step.  ``dry_run`` draws kinds, ratios and samples but skips the model,
    logging NaN losses.
    """
    schedule = NoiseSchedule.linear(model.cfg.timesteps)
    cur = cfg.curriculum(model.cfg.image_size)
    root = Rng(cfg.seed)
    kinds = KindSampler(cfg.steps, root.split(0), cfg.kind_sampling)
    state = TrainState.for_model(model, cfg.lr)
    rows = []
    for step in range(cfg.steps):
        rng = root.split(step + 1)
        kind = kinds.draw(step)
        r_sample = sample_ratio(crop_ratio(step, cur), cur, rng)
        samples = [make_sample(kind, rng, r_sample, model, cfg) for _ in range(cfg.batch_size)]
        if dry_run:
            loss = float("nan")
        else:
            noise = draw_noise(model, rng, len(samples))
            batch = [prepare(model, s, t, e) for s, (t, e) in zip(samples, noise)]
            train_step(model, state, batch, schedule)
            loss = state.history[-1]
        rows.append((step, kind, r_sample, loss))
        if step % 50 == 0:
            log.info("step %d kind=%s r=%.3f loss=%.4f", step, kind, r_sample, loss)
    if metrics_path is not None:
        write_metrics(metrics_path, rows)
    return state, rows


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "kind", "r_sample", "loss"])
        for step, kind, r, loss in rows:
            w.writerow([step, kind, repr(float(r)), repr(float(loss))])


def fixed_training_set(model: Model, n: int = 8, seed: int = 0, cfg: TrainConfig | None = None):
    """A frozen batch (samples, timesteps and noise fixed) for overfitting checks."""
    cfg = cfg or TrainConfig()
    rng = Rng(seed)
    out = []
    for i in range(n):
        kind = GENERIC if i % 2 == 0 else "multiview"
        sample = make_sample(kind, rng, 1.0, model, cfg)
        (t, eps), = draw_noise(model, rng, 1)
        out.append(prepare(model, sample, t, eps))
    return out


def to_float64(model: Model) -> Model:
    """Copy of ``model`` whose trainable tensors are float64 (for gradient checks)."""
    m = Model(model.cfg, model.frozen, {k: np.asarray(v, np.float64).copy() for k, v in model.trainable.items()},
              model.ccp_mode)
    return m


def gradient_check(model: Model, batch, h: float = 1e-5, names=None) -> dict:
    """Relative error ``|g_bp - g_fd| / max(|g_bp|, |g_fd|)`` per trainable tensor.

    Norms are Frobenius norms over the whole tensor; finite differences are
    central, in float64.
    """
    m64 = to_float64(model)
    schedule = NoiseSchedule.linear(model.cfg.timesteps)
    _, grads = loss_and_grads(m64, batch, schedule)
    report = {}
    for name in names or sorted(m64.trainable):
        base = m64.trainable[name]

        def f(x, name=name):
            p = m64.params64()
            p[name] = x
            return loss_and_grads(m64, batch, schedule, params=p, need_grad=False)[0]

        fd = finite_diff_grad(f, base, h)
        bp = grads[name]
        denom = max(np.linalg.norm(bp), np.linalg.norm(fd), 1e-30)
        report[name] = float(np.linalg.norm(bp - fd) / denom)
    return report
