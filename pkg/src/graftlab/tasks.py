"""Named target distributions and reward functions for the toy experiments."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .diagnostics import AnalyticMixture


def single_gaussian(dim: int = 1) -> AnalyticMixture:
    return AnalyticMixture.standard_normal(dim)


def two_mode_1d() -> AnalyticMixture:
    """Equal-weight modes at -2 and 2 with variance 0.25."""
    return AnalyticMixture([[-2.0], [2.0]], [0.25, 0.25], [0.5, 0.5])


def mixture_2d() -> AnalyticMixture:
    """Four-component 2D mixture with most of its mass left of the origin."""
    means = [[-2.0, -1.0], [-2.0, 1.0], [2.0, 0.0], [0.0, 2.0]]
    return AnalyticMixture(means, [0.25] * 4, [0.3, 0.3, 0.2, 0.2])


def two_mode_2d() -> AnalyticMixture:
    """Unequal modes at (-2, 0) and (2, 0) with variance 0.25."""
    return AnalyticMixture([[-2.0, 0.0], [2.0, 0.0]], [0.25, 0.25], [0.3, 0.7])


def shifted_gaussian_1d(mean: float = 3.0, var: float = 1.0) -> AnalyticMixture:
    return AnalyticMixture([[mean]], [var], [1.0])


PRESETS: dict[str, Callable[..., AnalyticMixture]] = {
    "single_gaussian": single_gaussian,
    "two_mode_1d": two_mode_1d,
    "two_mode_2d": two_mode_2d,
    "mixture_2d": mixture_2d,
    "shifted_gaussian_1d": shifted_gaussian_1d,
}


def make_target(desc) -> AnalyticMixture:
    """Build a mixture from a preset name, ``{"preset": name, **kwargs}``, or
    explicit ``{"means", "variances", "weights"}``."""
    if isinstance(desc, str):
        desc = {"preset": desc}
    desc = dict(desc)
    if "preset" in desc:
        name = desc.pop("preset")
        if name not in PRESETS:
            raise ValueError(f"unknown target preset {name!r}")
        return PRESETS[name](**desc)
    extra = set(desc) - {"means", "variances", "weights"}
    if extra:
        raise ValueError(f"unknown target keys {sorted(extra)}")
    return AnalyticMixture(desc["means"], desc["variances"], desc["weights"])


# --------------------------------------------------------------------------
# Rewards (all map an (n, d) batch to n rewards)
# --------------------------------------------------------------------------

def half_plane(x, coord: int = 0, threshold: float = 0.0):
    x = np.atleast_2d(x)
    return (x[:, coord] > threshold).astype(float)


def coordinate(x, coord: int = 0):
    return np.atleast_2d(x)[:, coord].astype(float)


def constant(x, value: float = 1.0):
    return np.full(len(np.atleast_2d(x)), float(value))


def negative_distance(x, center=0.0):
    x = np.atleast_2d(x)
    return -np.linalg.norm(x - np.asarray(center, dtype=float), axis=1)


REWARDS: dict[str, Callable] = {
    "half_plane": half_plane,
    "identity": coordinate,
    "coordinate": coordinate,
    "constant": constant,
    "negative_distance": negative_distance,
}


def make_reward(desc) -> Callable:
    """Reward from a name or ``{"name": ..., **kwargs}``."""
    if isinstance(desc, str):
        desc = {"name": desc}
    desc = dict(desc)
    name = desc.pop("name", None)
    if name not in REWARDS:
        raise ValueError(f"unknown reward {name!r}")
    fn = REWARDS[name]
    return lambda x: fn(x, **desc)
