"""Analytic Gaussian mixtures and the bias/variance diagnostics built on them:
conditional reward variance along the denoising chain, the binomial rollout
test, and the integrated score energy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import binom

from .diffusion import NoiseSchedule, _as_field, denoise
from .numerics import DTYPE, as_generator, rng_stream


@dataclass(frozen=True)
class AnalyticMixture:
    """Isotropic Gaussian mixture ``sum_k w_k N(mu_k, var_k I)``.

    Under the OU forward process it stays a mixture with means
    ``e^{-t} mu_k`` and variances ``e^{-2t} var_k + 1 - e^{-2t}``.
    """

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=DTYPE))
        if means.shape[0] == 1 and np.ndim(self.means) == 1 and np.size(self.variances) > 1:
            means = means.T
        var = np.broadcast_to(np.asarray(self.variances, dtype=DTYPE), (len(means),)).copy()
        w = np.broadcast_to(np.asarray(self.weights, dtype=DTYPE), (len(means),)).copy()
        if np.any(var <= 0):
            raise ValueError("component variances must be positive")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must lie on the simplex")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "weights", w)

    @classmethod
    def standard_normal(cls, dim: int = 1) -> "AnalyticMixture":
        return cls(np.zeros((1, dim)), [1.0], [1.0])

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def evolved(self, t: float) -> "AnalyticMixture":
        if t < 0:
            raise ValueError("time must be non-negative")
        if np.isinf(t):
            return AnalyticMixture(np.zeros_like(self.means), np.ones(len(self.means)),
                                   self.weights)
        d = np.exp(-t)
        return AnalyticMixture(d * self.means,
                               d * d * self.variances - np.expm1(-2.0 * t),
                               self.weights)

    def _log_comp(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
        diff = x[:, None, :] - self.means[None, :, :]
        sq = np.sum(diff * diff, axis=2)
        d = self.dim
        logn = -0.5 * sq / self.variances - 0.5 * d * np.log(2 * np.pi * self.variances)
        return logn + np.log(np.maximum(self.weights, 1e-300)), diff

    def logpdf(self, x, t: float = 0.0):
        m = self if t == 0 else self.evolved(t)
        lc, _ = m._log_comp(x)
        return logsumexp(lc, axis=1)

    def pdf(self, x, t: float = 0.0):
        return np.exp(self.logpdf(x, t))

    def score(self, x, t: float = 0.0):
        """Exact ``grad log q_t(x)`` via responsibility-weighted component scores."""
        m = self if t == 0 else self.evolved(t)
        x_arr = np.asarray(x, dtype=DTYPE)
        lc, diff = m._log_comp(x_arr)
        resp = np.exp(lc - logsumexp(lc, axis=1, keepdims=True))
        s = -np.einsum("bk,bkd->bd", resp / m.variances, diff)
        return s[0] if x_arr.ndim == 1 else s

    def sample(self, n: int, rng, t: float = 0.0, return_labels: bool = False):
        m = self if t == 0 else self.evolved(t)
        rng = as_generator(rng)
        labels = rng.choice(len(m.weights), size=n, p=m.weights)
        z = rng.standard_normal((n, m.dim))
        x = m.means[labels] + np.sqrt(m.variances[labels])[:, None] * z
        return (x, labels) if return_labels else x

    def assign(self, x) -> np.ndarray:
        """Most responsible component for each point."""
        lc, _ = self._log_comp(x)
        return np.argmax(lc, axis=1)

    def score_field(self):
        """Score as a ``(x, t)`` field with per-sample times (constant within a
        call, as in the sampler)."""
        def field(x, t):
            t = np.atleast_1d(t)
            return self.score(x, float(t[0]))
        return field

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "variances": self.variances.tolist(),
                "weights": self.weights.tolist()}


def analytic_mixture_score(mixture: AnalyticMixture, x, t: float):
    if t < 0:
        raise ValueError("time must be non-negative")
    return mixture.score(x, t)


# --------------------------------------------------------------------------
# Conditional variance and binomial rollout test
# --------------------------------------------------------------------------

def _rollout_rewards(field, schedule, reward_fn, latents, n, n_rollouts, rng,
                     stochastic, chunk):
    """Complete every latent ``n_rollouts`` times from state ``n``; returns
    rewards shaped (n_states, n_rollouts)."""
    n_states = len(latents)
    out = np.empty((n_states, n_rollouts))
    reps = np.repeat(latents, n_rollouts, axis=0)
    flat = np.empty(len(reps))
    for lo in range(0, len(reps), chunk):
        x0, _, _ = denoise(field, schedule, reps[lo:lo + chunk], n, rng,
                           stochastic=stochastic)
        flat[lo:lo + chunk] = reward_fn(x0)
    out[:] = flat.reshape(n_states, n_rollouts)
    return out


def conditional_variance_curve(model, schedule: NoiseSchedule, reward_fn, timesteps,
                               n_states: int, n_rollouts: int, rng, dim: int | None = None,
                               stochastic: bool = True, chunk: int = 50_000):
    """Estimate ``E[Var(r(X_0) | X_{t_n})]`` for every ``n`` in ``timesteps``.

    Latents at all requested states come from the same partial-denoising runs;
    each is completed ``n_rollouts`` times. Returns a list of dicts with the
    estimate, its standard error, and the per-state rollout means.
    """
    if n_rollouts < 2:
        raise ValueError("need at least two rollouts per state")
    rng = as_generator(rng)
    field = _as_field(model)
    dim = dim or getattr(model, "dim", None)
    N = schedule.N
    steps = sorted({int(n) for n in timesteps})
    if any(not 0 <= n <= N for n in steps):
        raise ValueError("timestep outside the schedule")
    x_start = rng.standard_normal((n_states, dim))
    _, recorded, _ = denoise(field, schedule, x_start, N, rng, record=set(steps),
                             stochastic=stochastic)
    rows = []
    for n in steps:
        if n == 0:
            r = np.asarray(reward_fn(recorded[0]), dtype=DTYPE)
            rewards = np.repeat(r[:, None], n_rollouts, axis=1)
        else:
            rewards = _rollout_rewards(field, schedule, reward_fn, recorded[n], n,
                                       n_rollouts, rng, stochastic, chunk)
        per_state = rewards.var(axis=1, ddof=1)
        rows.append({"n": n, "t": float(schedule.ou_times[n]),
                     "estimate": float(per_state.mean()),
                     "se": float(per_state.std(ddof=1) / np.sqrt(n_states)),
                     "state_means": rewards.mean(axis=1)})
    return rows


def binomial_tv(state_means, n_rollouts: int):
    """Empirical law of per-state mean rewards vs ``Bin(n, theta_hat) / n``."""
    state_means = np.asarray(state_means, dtype=DTYPE)
    counts = np.rint(state_means * n_rollouts).astype(int)
    emp = np.bincount(counts, minlength=n_rollouts + 1) / len(counts)
    theta = state_means.mean()
    null = binom.pmf(np.arange(n_rollouts + 1), n_rollouts, theta)
    return emp, null, float(0.5 * np.abs(emp - null).sum())


def rollout_histogram_test(model, schedule: NoiseSchedule, reward_fn, n: int, rng,
                           n_states: int = 1000, n_rollouts: int = 100,
                           dim: int | None = None, stochastic: bool = True):
    """Per-state mean reward after ``n_rollouts`` completions from state ``n``,
    compared to the binomial law expected if the reward ignored ``X_{t_n}``.

    Returns ``(empirical pmf, binomial pmf, TV distance)`` on the grid
    ``{0, 1/n_rollouts, ..., 1}``.
    """
    rows = conditional_variance_curve(model, schedule, reward_fn, [n], n_states,
                                      n_rollouts, rng, dim=dim, stochastic=stochastic)
    means = rows[0]["state_means"]
    check = means * n_rollouts
    if not np.allclose(check, np.rint(check)):
        raise ValueError("reward must be binary")
    return binomial_tv(means, n_rollouts)


# --------------------------------------------------------------------------
# Score energy
# --------------------------------------------------------------------------

def score_energy(mixture: AnalyticMixture, s: float, t: float, mc_samples: int,
                 seed: int = 0, per_unit: int = 256):
    """``H = int_s^t du E_{q_u} ||grad log q_u(X) + X||^2``.

    Trapezoid over the grid ``{k / per_unit}`` (plus the endpoints); the inner
    expectation at grid point ``k`` uses exact draws from ``q_u`` seeded by
    ``(seed, k)`` so intervals that share grid points share integrand values.
    Returns ``(estimate, standard error)``.
    """
    if s >= t:
        if s == t:
            return 0.0, 0.0
        raise ValueError("need s < t")
    lo, hi = int(np.ceil(s * per_unit)), int(np.floor(t * per_unit))
    grid = [s] + [k / per_unit for k in range(lo, hi + 1) if s < k / per_unit < t] + [t]
    grid = np.array(grid)
    vals, ses = [], []
    for u in grid:
        key = ("score_energy", round(u * per_unit, 9))
        g = rng_stream(seed, key)
        x = mixture.sample(mc_samples, g, t=u)
        dev = mixture.score(x, u) + x
        e = np.sum(dev * dev, axis=1)
        vals.append(e.mean())
        ses.append(e.std(ddof=1) / np.sqrt(mc_samples))
    vals, ses = np.array(vals), np.array(ses)
    h = np.diff(grid)
    w = np.zeros_like(grid)
    w[:-1] += h / 2
    w[1:] += h / 2
    return float(w @ vals), float(np.sqrt(np.sum((w * ses) ** 2)))
