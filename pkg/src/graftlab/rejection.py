"""Generalized rejection sampling: acceptance rules, their reshaped rewards in
closed form, and Monte-Carlo oracles for the law of accepted samples.

Tilts are always expressed as the ratio ``r_hat / alpha`` (log expected
acceptance probability given the sample); ``alpha`` itself never appears.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy

from .numerics import DTYPE, as_generator


# --------------------------------------------------------------------------
# Rules
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Classical:
    r_max: float
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


@dataclass(frozen=True)
class TopK:
    M: int
    K: int

    def __post_init__(self):
        if not 1 <= self.K <= self.M:
            raise ValueError(f"need 1 <= K <= M, got K={self.K}, M={self.M}")


def Preference() -> TopK:
    return TopK(2, 1)


KEY_FUNCTIONS: dict[str, Callable[..., Callable]] = {
    "identity": lambda: (lambda x: tuple(np.ravel(x).tolist())),
    "round": lambda decimals=0: (lambda x: tuple(np.round(np.ravel(x), decimals).tolist())),
    "sign": lambda: (lambda x: tuple(np.sign(np.ravel(x)).astype(int).tolist())),
}


@dataclass(frozen=True)
class BinaryDedup:
    """Binary rewards with one survivor per duplicate group.

    ``key`` maps a sample to a hashable structure key. ``key_name`` and
    ``key_args`` record a registered key function for serialization.
    """

    key: Callable[[np.ndarray], Hashable] = field(default=None, compare=False)
    key_name: str = "identity"
    key_args: tuple = ()

    def __post_init__(self):
        if self.key is None:
            if self.key_name not in KEY_FUNCTIONS:
                raise ValueError(f"unknown structure function {self.key_name!r}")
            object.__setattr__(self, "key", KEY_FUNCTIONS[self.key_name](*self.key_args))


Rule = Classical | TopK | BinaryDedup


def rule_to_dict(rule) -> dict:
    if isinstance(rule, Classical):
        return {"tag": "classical", "r_max": rule.r_max, "alpha": rule.alpha}
    if isinstance(rule, TopK):
        if (rule.M, rule.K) == (2, 1):
            return {"tag": "preference"}
        return {"tag": "topk", "M": rule.M, "K": rule.K}
    if isinstance(rule, BinaryDedup):
        return {"tag": "dedup", "key": rule.key_name, "key_args": list(rule.key_args)}
    raise TypeError(f"not an acceptance rule: {rule!r}")


def rule_from_dict(d: dict):
    d = dict(d)
    tag = d.pop("tag", None)
    allowed = {"classical": {"r_max", "alpha"}, "topk": {"M", "K"}, "preference": set(),
               "dedup": {"key", "key_args"}}
    if tag not in allowed:
        raise ValueError(f"unknown rule tag {tag!r}")
    extra = set(d) - allowed[tag]
    if extra:
        raise ValueError(f"unknown keys for rule {tag!r}: {sorted(extra)}")
    if tag == "classical":
        return Classical(float(d["r_max"]), float(d["alpha"]))
    if tag == "topk":
        return TopK(int(d["M"]), int(d["K"]))
    if tag == "preference":
        return Preference()
    return BinaryDedup(key_name=d.get("key", "identity"),
                       key_args=tuple(d.get("key_args", ())))


@dataclass
class RewardedBatch:
    samples: np.ndarray
    rewards: np.ndarray
    latents: np.ndarray | None = None
    accepted: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        self.rewards = np.asarray(self.rewards, dtype=DTYPE).reshape(-1)
        if len(self.samples) != len(self.rewards):
            raise ValueError("samples and rewards differ in length")
        if self.latents is not None and len(self.latents) != len(self.samples):
            raise ValueError("latents and samples differ in length")

    def __len__(self):
        return len(self.rewards)


# --------------------------------------------------------------------------
# Closed forms
# --------------------------------------------------------------------------

def empirical_cdf(rewards) -> Callable:
    """Right-continuous empirical CDF ``F(r) = #{R_i <= r} / M``."""
    r = np.sort(np.asarray(rewards, dtype=DTYPE).reshape(-1))
    if r.size == 0:
        raise ValueError("empty reward set")

    def F(q):
        return np.searchsorted(r, q, side="right") / r.size

    return F


def topk_select(rewards, K: int) -> np.ndarray:
    """Indices of the ``K`` largest rewards, ties going to the lower index."""
    rewards = np.asarray(rewards, dtype=DTYPE).reshape(-1)
    M = rewards.size
    if not 1 <= K <= M:
        raise ValueError(f"need 1 <= K <= M, got K={K}, M={M}")
    order = np.lexsort((np.arange(M), -rewards))
    return np.sort(order[:K])


def topk_acceptance_prob(F, M: int, K: int):
    """``P(rank <= K)`` for a sample at CDF value ``F`` among ``M`` draws."""
    if not 1 <= K <= M:
        raise ValueError(f"need 1 <= K <= M, got K={K}, M={M}")
    F = np.asarray(F, dtype=DTYPE)
    if np.any((F < 0) | (F > 1)):
        raise ValueError("F must lie in [0, 1]")
    return np.exp(topk_reshaped_reward(F, M, K))


def topk_reshaped_reward(F, M: int, K: int):
    """``log sum_{k<K} C(M-1, k) F^{M-k-1} (1-F)^k``; ``-inf`` where it vanishes."""
    if not 1 <= K <= M:
        raise ValueError(f"need 1 <= K <= M, got K={K}, M={M}")
    F = np.asarray(F, dtype=DTYPE)
    if np.any((F < 0) | (F > 1)) or np.any(np.isnan(F)):
        raise ValueError("F must lie in [0, 1]")
    if K == M:
        return np.zeros_like(F)[()]
    k = np.arange(K)
    logc = gammaln(M) - gammaln(k + 1) - gammaln(M - k)
    # xlogy treats 0 * log 0 as 0
    a = xlogy(M - k - 1, F[..., None])
    b = xlogy(k, 1.0 - F[..., None])
    terms = logc + a + b
    out = logsumexp(terms, axis=-1)
    return np.minimum(out, 0.0)[()]


def preference_reshaped_reward(F):
    F = np.asarray(F, dtype=DTYPE)
    if np.any((F < 0) | (F > 1)):
        raise ValueError("F must lie in [0, 1]")
    with np.errstate(divide="ignore"):
        return np.log(F)[()]


def classical_reshaped_reward(r, rule: Classical):
    return (np.asarray(r, dtype=DTYPE) - rule.r_max) / rule.alpha


def topk_tilt_discrete(probs, rewards, M: int, K: int, n_nodes: int = 256):
    """Exact acceptance probability per support point for Top-K on a finite
    base distribution.

    Ties are resolved by index, which by exchangeability has the same law as
    uniform tie-breaking; that turns the CDF value of a point into
    ``F_-(x) + U p(x)`` with ``U ~ Unif(0, 1)``, and the continuous closed form
    is averaged over ``U`` (Gauss-Legendre, exact for the polynomial).
    """
    probs = np.asarray(probs, dtype=DTYPE)
    rewards = np.asarray(rewards, dtype=DTYPE)
    order = np.argsort(rewards, kind="stable")
    p_sorted = probs[order]
    r_sorted = rewards[order]
    below = np.empty_like(p_sorted)
    for i in range(len(p_sorted)):
        below[i] = p_sorted[r_sorted < r_sorted[i]].sum()
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    u = 0.5 * (nodes + 1.0)
    acc_sorted = np.empty_like(p_sorted)
    for i in range(len(p_sorted)):
        # equal rewards merge into one tie group
        tied = p_sorted[r_sorted == r_sorted[i]].sum()
        F = np.clip(below[i] + u * tied, 0.0, 1.0)
        acc_sorted[i] = 0.5 * np.sum(weights * topk_acceptance_prob(F, M, K))
    acc = np.empty_like(acc_sorted)
    acc[order] = acc_sorted
    return acc


def tilted_law(base_probs, log_tilt):
    """Normalize ``p(x) exp(r_hat(x) / alpha)``."""
    base_probs = np.asarray(base_probs, dtype=DTYPE)
    w = base_probs * np.exp(np.asarray(log_tilt, dtype=DTYPE))
    return w / w.sum()


# --------------------------------------------------------------------------
# Acceptance
# --------------------------------------------------------------------------

def classical_accept(rewards, rule: Classical, rng) -> np.ndarray:
    """Independent Bernoulli acceptance with ``exp((r - r_max) / alpha)``."""
    rewards = np.asarray(rewards, dtype=DTYPE).reshape(-1)
    if np.any(rewards > rule.r_max):
        raise ValueError("reward exceeds r_max")
    p = np.exp((rewards - rule.r_max) / rule.alpha)
    return as_generator(rng).random(rewards.size) < p


def topk_accept(rewards, rule: TopK) -> np.ndarray:
    """Top-K within consecutive groups of ``M``; the batch must be a multiple."""
    rewards = np.asarray(rewards, dtype=DTYPE).reshape(-1)
    if rewards.size % rule.M:
        raise ValueError(f"batch size {rewards.size} is not a multiple of M={rule.M}")
    mask = np.zeros(rewards.size, dtype=bool)
    if rule.K == rule.M:
        mask[:] = True
        return mask
    groups = rewards.reshape(-1, rule.M)
    # stable descending order: ties go to the lower index
    order = np.argsort(-groups, axis=1, kind="stable")[:, :rule.K]
    rows = np.arange(len(groups))[:, None] * rule.M
    mask[(rows + order).ravel()] = True
    return mask


def dedup_binary_accept(samples, rewards, key: Callable, rng) -> np.ndarray:
    """Accept exactly one reward-1 sample per structure key, uniformly."""
    rewards = np.asarray(rewards, dtype=DTYPE).reshape(-1)
    if not np.all((rewards == 0) | (rewards == 1)):
        raise ValueError("rewards must be binary")
    rng = as_generator(rng)
    groups: dict = {}
    for i in np.flatnonzero(rewards == 1):
        groups.setdefault(key(samples[i]), []).append(i)
    mask = np.zeros(rewards.size, dtype=bool)
    for members in groups.values():
        mask[members[int(rng.integers(len(members)))]] = True
    return mask


def grs_accept(batch: RewardedBatch, rule, rng=None) -> np.ndarray:
    """Acceptance flags for a rewarded batch under any rule."""
    if isinstance(rule, Classical):
        flags = classical_accept(batch.rewards, rule, rng)
    elif isinstance(rule, TopK):
        flags = topk_accept(batch.rewards, rule)
    elif isinstance(rule, BinaryDedup):
        flags = dedup_binary_accept(batch.samples, batch.rewards, rule.key, rng)
    else:
        raise TypeError(f"not an acceptance rule: {rule!r}")
    batch.accepted = flags
    return flags


def pgrs_accept(batch: RewardedBatch, rule, rng=None) -> np.ndarray:
    """Decide acceptance on final samples and rewards; return kept latents."""
    if batch.latents is None:
        raise ValueError("batch carries no intermediate latents")
    flags = grs_accept(batch, rule, rng)
    return np.asarray(batch.latents)[flags]


# --------------------------------------------------------------------------
# Monte-Carlo oracle
# --------------------------------------------------------------------------

@dataclass
class TiltEstimate:
    value: float
    se: float
    accept_rate: float
    trials: int


def mc_reshaped_reward(x, reward_fn, base_sampler, rule, trials: int, rng,
                       complete: Callable | None = None, batch_size: int = 1) -> TiltEstimate:
    """Estimate ``log E[A | X^(1) = x]`` by simulating whole GRS batches.

    ``base_sampler(n, rng)`` returns ``(latents, finals)`` or just finals.
    ``complete(x, rng)`` draws the final sample given the conditioned latent;
    without it the conditioned sample is final itself. The conditioned sample
    sits at a uniformly random position so index-based tie breaking is fair.
    ``batch_size`` sets the batch size for rules without their own ``M``.
    """
    if trials < 1000:
        raise ValueError("need at least 1000 trials")
    rng = as_generator(rng)
    M = rule.M if isinstance(rule, TopK) else batch_size
    hits = np.zeros(trials)
    if isinstance(rule, Classical):
        x0 = x if complete is None else complete(x, rng)
        p = float(np.exp(classical_reshaped_reward(reward_fn(np.atleast_2d(x0))[0], rule)))
        if complete is None:
            return TiltEstimate(float(np.log(p)), 0.0, p, trials)
    for i in range(trials):
        drawn = base_sampler(M, rng)
        finals = drawn[1] if isinstance(drawn, tuple) else drawn
        finals = np.array(finals, dtype=DTYPE, copy=True)
        pos = int(rng.integers(M))
        finals[pos] = x if complete is None else complete(x, rng)
        rewards = np.asarray(reward_fn(finals), dtype=DTYPE)
        flags = grs_accept(RewardedBatch(finals, rewards), rule, rng)
        hits[i] = flags[pos]
    mean = hits.mean()
    if mean == 0:
        raise ValueError("no acceptance in any trial; tilt not estimable")
    se = hits.std(ddof=1) / np.sqrt(trials) / mean
    return TiltEstimate(float(np.log(mean)), float(se), float(mean), trials)
