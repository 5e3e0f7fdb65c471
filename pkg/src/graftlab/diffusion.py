"""OU forward process, denoising score matching, DDPM ancestral sampling and
the partial-denoising schedule recalibration.

Indexing convention: states are ``x_0 .. x_N`` (``x_0`` clean, ``x_N`` noise).
``betas[i]`` is the variance added going from state ``i`` to ``i + 1`` and
``alphas_cumprod[n] = prod_{i < n} (1 - betas[i])``, so ``alphas_cumprod[0] = 1``.
Each state maps to the OU time ``t_n = -log(alphas_cumprod[n]) / 2`` because
``x_n = e^{-t_n} x_0 + sqrt(1 - e^{-2 t_n}) z`` under both descriptions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import DTYPE, FieldModel, as_generator, model_grad, mse_to_target, train

T_MIN = 1e-3


# --------------------------------------------------------------------------
# Schedules
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    recalibrated_at: int | None = None

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=DTYPE)
        object.__setattr__(self, "betas", betas)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty vector")
        if np.any(betas < 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.recalibrated_at is None and np.any(betas <= 0):
            raise ValueError("betas must be positive")

    @classmethod
    def linear(cls, n_steps: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, n_steps))

    @property
    def N(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alphas_cumprod(self) -> np.ndarray:
        return np.concatenate([[1.0], np.cumprod(self.alphas)])

    @property
    def ou_times(self) -> np.ndarray:
        """Continuous OU time of every state, length ``N + 1``."""
        return -0.5 * np.log(self.alphas_cumprod)

    def to_dict(self) -> dict:
        return {"betas": self.betas.tolist(), "recalibrated_at": self.recalibrated_at}


def recalibrate_schedule(schedule: NoiseSchedule, n_i: int) -> NoiseSchedule:
    """Zero every beta below ``n_i``; keep the rest.

    Noising a saved latent ``x_{n_i}`` with the new cumulative products
    reproduces the forward kernel from state ``n_i`` onwards.
    """
    if not 0 <= n_i <= schedule.N:
        raise ValueError(f"N_I={n_i} outside [0, {schedule.N}]")
    if n_i == 0 and schedule.recalibrated_at is None:
        return schedule
    new = schedule.betas.copy()
    new[:n_i] = 0.0
    return NoiseSchedule(new, recalibrated_at=n_i)


# --------------------------------------------------------------------------
# Forward process and losses
# --------------------------------------------------------------------------

def ou_marginal(x0, t: float):
    """Mean and std of ``X_t | X_0 = x0`` for ``dX = -X dt + sqrt(2) dB``."""
    if t < 0:
        raise ValueError("time must be non-negative")
    x0 = np.asarray(x0, dtype=DTYPE)
    if np.isinf(t):
        return np.zeros_like(x0), 1.0
    return np.exp(-t) * x0, float(np.sqrt(-np.expm1(-2.0 * t)))


def dsm_batch(x0, rng, schedule: NoiseSchedule | None = None, t=None,
              t_min: float = T_MIN):
    """Draw ``(x_t, t, target)`` so that the score-matching objective is
    ``mean ||s(x_t, t) - target||^2``.

    ``t`` is drawn uniformly over the discrete steps of ``schedule`` (as OU
    times) and clamped to ``t_min``; pass ``t`` to fix it.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=DTYPE))
    if len(x0) == 0:
        raise ValueError("empty batch")
    rng = as_generator(rng)
    b = len(x0)
    if t is None:
        if schedule is None:
            schedule = NoiseSchedule.linear()
        n = rng.integers(1, schedule.N + 1, size=b)
        t = schedule.ou_times[n]
    t = np.maximum(np.broadcast_to(np.asarray(t, dtype=DTYPE), (b,)), t_min)
    z = rng.standard_normal(x0.shape)
    decay = np.exp(-t)[:, None]
    var = -np.expm1(-2.0 * t)[:, None]
    xt = decay * x0 + np.sqrt(var) * z
    # residual (x_t - e^{-t} x_0) / (1 - e^{-2t}); the loss is ||residual + s||^2
    target = -(xt - decay * x0) / var
    return xt, t, target


def dsm_loss(model, x0, rng, schedule: NoiseSchedule | None = None, t=None,
             grad: bool = False):
    """Monte-Carlo score-matching loss; with ``grad`` also the parameter grad."""
    xt, tt, target = dsm_batch(x0, rng, schedule, t)
    if grad:
        return model_grad(model, xt, tt, mse_to_target(target))
    out = model.forward(xt, tt)[0]
    return float(np.mean(np.sum((out - target) ** 2, axis=1)))


def pgraft_training_pair(x_ni, x0, t, schedule: NoiseSchedule,
                         recalibrated: NoiseSchedule, rng=None, eps=None):
    """Noise a saved latent with the recalibrated schedule and build the
    epsilon target against the clean sample with the original schedule.

    ``t`` may be an integer or an array of state indices (one per sample).
    Returns ``(x_t, eps_prime)``.
    """
    n_i = recalibrated.recalibrated_at or 0
    t = np.asarray(t)
    if np.any(t < n_i):
        raise ValueError("t must be >= N_I")
    if np.any(t < 1) or np.any(t > schedule.N):
        raise ValueError(f"t must lie in [1, {schedule.N}]")
    x_ni = np.asarray(x_ni, dtype=DTYPE)
    x0 = np.asarray(x0, dtype=DTYPE)
    if eps is None:
        eps = as_generator(rng).standard_normal(x_ni.shape)
    new_ab = recalibrated.alphas_cumprod[t]
    old_ab = schedule.alphas_cumprod[t]
    if x_ni.ndim == 2:
        new_ab = np.broadcast_to(new_ab, (len(x_ni),))[:, None]
        old_ab = np.broadcast_to(old_ab, (len(x_ni),))[:, None]
    xt = np.sqrt(new_ab) * x_ni + np.sqrt(1.0 - new_ab) * eps
    eps_prime = (xt - np.sqrt(old_ab) * x0) / np.sqrt(1.0 - old_ab)
    return xt, eps_prime


def eps_loss(model, xt, n, eps_target, schedule: NoiseSchedule, grad: bool = False):
    """Epsilon-prediction loss for a score model: ``eps_hat = -sigma_n s``."""
    n = np.asarray(n)
    sigma = np.sqrt(1.0 - schedule.alphas_cumprod[n])[:, None]
    tt = schedule.ou_times[n]
    eps_target = np.asarray(eps_target, dtype=DTYPE)

    def loss_fn(out):
        diff = -sigma * out - eps_target
        loss = np.mean(np.sum(diff * diff, axis=1))
        return loss, (-2.0 / len(out)) * sigma * diff

    if grad:
        return model_grad(model, xt, tt, loss_fn)
    return float(loss_fn(model.forward(xt, tt)[0])[0])


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Batch of denoising paths.

    ``states[n]`` holds ``x_{t_n}`` for the whole batch when the path was
    recorded (``N + 1`` entries); ``snapshot`` holds ``x_{t_{N_I}}``.
    """

    initial: np.ndarray
    final: np.ndarray
    states: np.ndarray | None = None
    snapshot_index: int | None = None
    snapshot: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def indices(self) -> np.ndarray:
        return np.arange(len(self.states)) if self.states is not None else np.array([])


def _as_field(model) -> Callable:
    if isinstance(model, FieldModel) or hasattr(model, "forward"):
        return lambda x, t: model.forward(x, t)[0]
    return model


def denoise(field, schedule: NoiseSchedule, x, n_start: int, rng, n_stop: int = 0,
            record=(), keep_path: bool = False, stochastic: bool = True,
            switch: tuple | None = None):
    """Run the reverse sampler from state ``n_start`` down to ``n_stop``.

    ``field(x, t)`` returns the score at OU time ``t``. With ``switch =
    (other_field, n_switch)``, ``other_field`` is used while the current state
    index is ``<= n_switch``. Returns ``(x_final, recorded, path)``.
    """
    rng = as_generator(rng)
    x = np.array(x, dtype=DTYPE)
    ab = schedule.alphas_cumprod
    times = schedule.ou_times
    recorded = {}
    path = [None] * (n_start + 1) if keep_path else None
    if n_start in record:
        recorded[n_start] = x.copy()
    if keep_path:
        path[n_start] = x.copy()
    for n in range(n_start, n_stop, -1):
        f = field
        if switch is not None and n <= switch[1]:
            f = switch[0]
        s = f(x, np.full(len(x), times[n]))
        beta = schedule.betas[n - 1]
        if stochastic:
            z = rng.standard_normal(x.shape)
            x = (x + beta * s) / np.sqrt(1.0 - beta) + np.sqrt(beta) * z
        else:
            # deterministic DDIM update through the predicted clean sample
            sig = np.sqrt(1.0 - ab[n])
            x0_hat = (x + (1.0 - ab[n]) * s) / np.sqrt(ab[n])
            eps_hat = -sig * s
            x = np.sqrt(ab[n - 1]) * x0_hat + np.sqrt(1.0 - ab[n - 1]) * eps_hat
        if n - 1 in record:
            recorded[n - 1] = x.copy()
        if keep_path:
            path[n - 1] = x.copy()
    if keep_path:
        path = np.stack(path[n_stop:])
    return x, recorded, path


def sample_trajectory(model, schedule: NoiseSchedule, rng, n_samples: int = 1,
                      dim: int | None = None, snapshot: int | None = None,
                      keep_path: bool = False, stochastic: bool = True,
                      x_start=None) -> Trajectory:
    """Ancestral sampling from ``N(0, I)`` at state ``N`` to state 0."""
    N = schedule.N
    if snapshot is not None and not 0 <= snapshot <= N:
        raise ValueError(f"snapshot index {snapshot} outside [0, {N}]")
    rng = as_generator(rng)
    dim = dim or getattr(model, "dim", None)
    if x_start is None:
        x_start = rng.standard_normal((n_samples, dim))
    record = () if snapshot is None else (snapshot,)
    final, rec, path = denoise(_as_field(model), schedule, x_start, N, rng,
                               record=record, keep_path=keep_path,
                               stochastic=stochastic)
    return Trajectory(initial=np.array(x_start), final=final, states=path,
                      snapshot_index=snapshot,
                      snapshot=None if snapshot is None else rec[snapshot])


def sample_stitched(fine, reference, schedule: NoiseSchedule, n_i: int, rng,
                    n_samples: int, dim: int | None = None, snapshot: int | None = None,
                    stochastic: bool = True) -> Trajectory:
    """Fine-tuned field for states above ``n_i``, reference at and below."""
    if not 0 <= n_i <= schedule.N:
        raise ValueError(f"N_I={n_i} outside [0, {schedule.N}]")
    rng = as_generator(rng)
    dim = dim or getattr(reference, "dim", None)
    x_start = rng.standard_normal((n_samples, dim))
    record = () if snapshot is None else (snapshot,)
    final, rec, _ = denoise(_as_field(fine), schedule, x_start, schedule.N, rng,
                            record=record, stochastic=stochastic,
                            switch=(_as_field(reference), n_i))
    return Trajectory(initial=x_start, final=final, snapshot_index=snapshot,
                      snapshot=None if snapshot is None else rec[snapshot])


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def train_score_model(model: FieldModel, data, schedule: NoiseSchedule, steps: int,
                      rng, batch_size: int = 256, lr: float = 1e-3,
                      log_every: int = 0, callback=None, final_lr: float | None = None):
    """Fit ``model`` to the score of ``data`` with the score-residual objective."""
    data = np.atleast_2d(np.asarray(data, dtype=DTYPE))
    if len(data) == 0:
        raise ValueError("empty dataset")

    def step(m, g):
        idx = g.integers(len(data), size=batch_size)
        return dsm_loss(m, data[idx], g, schedule, grad=True)

    return train(model, step, steps, rng, lr=lr, log_every=log_every, callback=callback,
                 final_lr=final_lr)


def train_eps_pairs(model: FieldModel, latents, finals, schedule: NoiseSchedule,
                    n_i: int, steps: int, rng, batch_size: int = 256,
                    lr: float = 1e-3, log_every: int = 0, callback=None,
                    final_lr: float | None = None):
    """Epsilon-prediction training on ``(latent, final)`` pairs for states
    ``max(n_i, 1) .. N`` using the recalibrated noising."""
    latents = np.atleast_2d(np.asarray(latents, dtype=DTYPE))
    finals = np.atleast_2d(np.asarray(finals, dtype=DTYPE))
    if len(latents) == 0:
        raise ValueError("empty dataset")
    recal = recalibrate_schedule(schedule, n_i)
    lo = max(n_i, 1)

    def step(m, g):
        idx = g.integers(len(latents), size=batch_size)
        n = g.integers(lo, schedule.N + 1, size=batch_size)
        xt, eps_p = pgraft_training_pair(latents[idx], finals[idx], n, schedule, recal, g)
        return eps_loss(m, xt, n, eps_p, schedule, grad=True)

    return train(model, step, steps, rng, lr=lr, log_every=log_every, callback=callback,
                 final_lr=final_lr)
