"""Reward fine-tuning loops: rejection-sampling fine-tuning on final samples,
its partial variant on intermediate latents, and the stitched sampler that
switches from the fine-tuned model to the reference partway down the chain."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import (NoiseSchedule, _as_field, denoise, sample_stitched, sample_trajectory,
                        train_eps_pairs, train_score_model)
from .numerics import DTYPE, AdamConfig, FieldModel, as_generator, optimizer_step
from .rejection import RewardedBatch, TopK, grs_accept

log = logging.getLogger(__name__)


class EmptyDatasetError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Optimisation budget. ``epochs``, when set, overrides ``steps`` with
    ``epochs * ceil(|D| / batch_size)``. ``final_lr`` turns on cosine decay."""

    steps: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    epochs: int | None = None
    final_lr: float | None = None

    def n_steps(self, n_data: int) -> int:
        if self.epochs is None:
            return self.steps
        return self.epochs * max(1, math.ceil(n_data / self.batch_size))


@dataclass
class RoundLog:
    round: int
    generated: int
    accepted: int
    dataset_size: int
    mean_reward: float
    accepted_mean_reward: float


@dataclass
class Collected:
    """Accepted data accumulated over rounds. ``latents[n]`` holds the kept
    states at index ``n`` for every requested snapshot."""

    finals: np.ndarray
    rewards: np.ndarray
    latents: dict
    rounds: list = field(default_factory=list)
    all_rewards: np.ndarray | None = None


@dataclass
class GraftResult:
    model: object
    data: Collected
    n_i: int
    losses: list

    @property
    def round_log(self) -> list[dict]:
        return [asdict(r) for r in self.data.rounds]


def reward_summary(rewards) -> dict:
    r = np.asarray(rewards, dtype=DTYPE)
    q25, q50, q75 = np.quantile(r, [0.25, 0.5, 0.75])
    sd = float(r.std(ddof=1)) if len(r) > 1 else 0.0
    return {"n": int(len(r)), "mean": float(r.mean()), "sd": sd,
            "se": sd / np.sqrt(len(r)), "q25": float(q25), "median": float(q50),
            "q75": float(q75)}


# --------------------------------------------------------------------------
# Finite-support surrogate
# --------------------------------------------------------------------------

class CategoricalModel:
    """Sampler over a fixed finite support with softmax-parameterised weights;
    stands in for a generative model when the tilt must be checked exactly."""

    def __init__(self, support, logits=None):
        self.support = np.atleast_2d(np.asarray(support, dtype=DTYPE))
        if self.support.shape[0] == 1 and np.ndim(support) == 1:
            self.support = self.support.T
        k = len(self.support)
        self.params = [np.zeros(k) if logits is None else np.asarray(logits, dtype=DTYPE).copy()]

    @classmethod
    def from_probs(cls, support, probs) -> "CategoricalModel":
        return cls(support, np.log(np.asarray(probs, dtype=DTYPE)))

    @property
    def probs(self) -> np.ndarray:
        z = self.params[0] - self.params[0].max()
        e = np.exp(z)
        return e / e.sum()

    def copy(self) -> "CategoricalModel":
        return CategoricalModel(self.support.copy(), self.params[0])

    def sample(self, n: int, rng) -> np.ndarray:
        idx = as_generator(rng).choice(len(self.support), size=n, p=self.probs)
        return self.support[idx]

    def index_of(self, samples) -> np.ndarray:
        samples = np.atleast_2d(samples)
        d = np.abs(samples[:, None, :] - self.support[None, :, :]).sum(axis=2)
        idx = d.argmin(axis=1)
        if np.any(d[np.arange(len(idx)), idx] > 0):
            raise ValueError("sample outside the support")
        return idx


def categorical_nll(logits, counts):
    """Mean negative log-likelihood of ``counts`` and its logit gradient."""
    counts = np.asarray(counts, dtype=DTYPE)
    n = counts.sum()
    z = logits - logits.max()
    logp = z - np.log(np.exp(z).sum())
    loss = -float(counts @ logp) / n
    return loss, np.exp(logp) - counts / n


def fit_categorical(model: CategoricalModel, samples, steps: int, lr: float = 0.05):
    counts = np.bincount(model.index_of(samples), minlength=len(model.support))
    hp = AdamConfig(lr=lr)
    state = None
    losses = []
    for _ in range(steps):
        loss, g = categorical_nll(model.params[0], counts)
        model.params, state = optimizer_step(model.params, [g], state, hp)
        losses.append(loss)
    return losses


# --------------------------------------------------------------------------
# Data collection
# --------------------------------------------------------------------------

def _draw(reference, schedule, M, rng, snapshots):
    if isinstance(reference, CategoricalModel):
        x = reference.sample(M, rng)
        return x, {n: x for n in snapshots}
    rec = {}
    if not snapshots:
        traj = sample_trajectory(reference, schedule, rng, n_samples=M)
        return traj.final, rec
    # one sampler pass recording every requested state
    x0 = rng.standard_normal((M, reference.dim))
    final, rec, _ = denoise(_as_field(reference), schedule, x0, schedule.N, rng,
                            record=set(snapshots))
    return final, rec


def collect_accepted(reference, reward_fn, rule, rounds: int, M: int, rng,
                     schedule: NoiseSchedule | None = None, snapshots=()) -> Collected:
    """Draw ``M`` samples from the frozen reference each round, filter them with
    ``rule`` on the final rewards, and append the accepted finals (and the
    states at every index in ``snapshots``) to the dataset."""
    if rounds < 1 or M < 1:
        raise ValueError("need at least one round and one sample per round")
    if isinstance(rule, TopK) and M % rule.M:
        raise ValueError(f"samples per round {M} must be a multiple of M={rule.M}")
    rng = as_generator(rng)
    snapshots = tuple(sorted({int(n) for n in snapshots}))
    if schedule is not None and any(not 0 <= n <= schedule.N for n in snapshots):
        raise ValueError("snapshot index outside the schedule")
    finals, rewards, all_rewards = [], [], []
    latents = {n: [] for n in snapshots}
    logs = []
    size = 0
    for j in range(rounds):
        x, rec = _draw(reference, schedule, M, rng, snapshots)
        r = np.asarray(reward_fn(x), dtype=DTYPE)
        batch = RewardedBatch(x, r)
        flags = grs_accept(batch, rule, rng)
        finals.append(x[flags])
        rewards.append(r[flags])
        all_rewards.append(r)
        for n in snapshots:
            latents[n].append(rec[n][flags])
        size += int(flags.sum())
        logs.append(RoundLog(j, M, int(flags.sum()), size, float(r.mean()),
                             float(r[flags].mean()) if flags.any() else float("nan")))
        log.info("round %d: accepted %d of %d (dataset %d)", j, flags.sum(), M, size)
    return Collected(np.concatenate(finals), np.concatenate(rewards),
                     {n: np.concatenate(v) for n, v in latents.items()}, logs,
                     np.concatenate(all_rewards))


# --------------------------------------------------------------------------
# Pipelines
# --------------------------------------------------------------------------

def run_graft(reference, reward_fn, rule, rounds: int = 5, M: int = 4096, rng=0,
              schedule: NoiseSchedule | None = None, train: TrainConfig | None = None,
              collected: Collected | None = None) -> GraftResult:
    """Fine-tune a copy of ``reference`` on the accepted final samples.

    Works with a :class:`FieldModel` score model (score-matching objective) or
    a :class:`CategoricalModel` (maximum likelihood). The reference itself is
    never modified.
    """
    train = train or TrainConfig()
    rng = as_generator(rng)
    if collected is None:
        collected = collect_accepted(reference, reward_fn, rule, rounds, M, rng, schedule)
    if len(collected.finals) == 0:
        raise EmptyDatasetError("no samples accepted in any round")
    model = reference.copy()
    steps = train.n_steps(len(collected.finals))
    if isinstance(reference, CategoricalModel):
        losses = fit_categorical(model, collected.finals, steps, lr=train.lr)
    else:
        losses = train_score_model(model, collected.finals, schedule, steps, rng,
                                   batch_size=train.batch_size, lr=train.lr,
                                   final_lr=train.final_lr)
    return GraftResult(model, collected, 0, losses)


def run_pgraft_train(reference: FieldModel, reward_fn, rule, n_i: int, rounds: int = 5,
                     M: int = 4096, rng=0, schedule: NoiseSchedule | None = None,
                     train: TrainConfig | None = None,
                     collected: Collected | None = None) -> GraftResult:
    """Filter latents at state ``n_i`` by the reward of their completions and
    train a copy of ``reference`` on states ``n_i .. N`` only.

    ``collected`` may carry data already gathered with ``n_i`` among its
    snapshots, so several switch points can share one sampling run.
    """
    schedule = schedule or NoiseSchedule.linear()
    if not 0 <= n_i <= schedule.N:
        raise ValueError(f"N_I={n_i} outside [0, {schedule.N}]")
    train = train or TrainConfig()
    rng = as_generator(rng)
    if collected is None:
        collected = collect_accepted(reference, reward_fn, rule, rounds, M, rng, schedule,
                                     snapshots=(n_i,))
    if n_i not in collected.latents:
        raise ValueError(f"collected data has no snapshot at {n_i}")
    if len(collected.finals) == 0:
        raise EmptyDatasetError("no samples accepted in any round")
    model = reference.copy()
    steps = train.n_steps(len(collected.finals))
    losses = train_eps_pairs(model, collected.latents[n_i], collected.finals, schedule, n_i,
                             steps, rng, batch_size=train.batch_size, lr=train.lr,
                             final_lr=train.final_lr)
    return GraftResult(model, collected, n_i, losses)


def pgraft_sample(partial, reference, n_i: int, schedule: NoiseSchedule, rng,
                  n_samples: int = 1, stochastic: bool = True) -> np.ndarray:
    """Partial model from pure noise down to state ``n_i``, reference after."""
    return sample_stitched(partial, reference, schedule, n_i, rng, n_samples,
                           stochastic=stochastic).final
