"""Rectified flow: training targets and loss, forward Euler sampling, exact
backward-Euler inversion by fixed-point iteration, and the closed-form
Gaussian-to-Gaussian velocity. Time runs from 0 (noise) to 1 (data)."""

from __future__ import annotations

import numpy as np

from .diffusion import _as_field
from .numerics import DTYPE, FieldModel, as_generator, model_grad, mse_to_target, train


class ContractionError(RuntimeError):
    """Fixed-point iteration of a backward Euler step failed to contract."""

    def __init__(self, msg: str, step: int, sample: int | None = None):
        super().__init__(msg)
        self.step = step
        self.sample = sample


class LipschitzGateError(ValueError):
    pass


def n_steps(eta: float) -> int:
    if not eta > 0:
        raise ValueError("step size must be positive")
    # guard 1/eta landing a hair under an integer
    return int(np.floor(1.0 / eta + 1e-9))


def rf_train_target(x, z, t):
    """Interpolant ``t x + (1 - t) z`` and its velocity target ``x - z``."""
    x = np.asarray(x, dtype=DTYPE)
    z = np.asarray(z, dtype=DTYPE)
    if x.shape != z.shape:
        raise ValueError("data and noise shapes differ")
    t = np.asarray(t, dtype=DTYPE)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    tt = t[..., None] if t.ndim and x.ndim > 1 else t
    return tt * x + (1.0 - tt) * z, x - z


def rf_loss(model, data, rng, grad: bool = False, z=None, t=None):
    """``mean ||v(x_t, t) - (x - z)||^2`` over fresh noise and times."""
    data = np.atleast_2d(np.asarray(data, dtype=DTYPE))
    if len(data) == 0:
        raise ValueError("empty batch")
    rng = as_generator(rng)
    if z is None:
        z = rng.standard_normal(data.shape)
    if t is None:
        t = rng.random(len(data))
    xt, target = rf_train_target(data, z, t)
    if grad:
        return model_grad(model, xt, t, mse_to_target(target))
    out = model.forward(xt, t)[0]
    return float(np.mean(np.sum((out - target) ** 2, axis=1)))


def gauss_velocity(x, t):
    """Exact rectified-flow velocity between two standard Gaussians."""
    x = np.asarray(x, dtype=DTYPE)
    t = np.asarray(t, dtype=DTYPE)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    c = (2.0 * t - 1.0) / ((1.0 - t) ** 2 + t ** 2)
    if c.ndim and x.ndim > 1:
        c = c[:, None]
    return c * x


def fwd_euler(v, eta: float, x0, return_path: bool = False):
    """``x <- x + eta v(x, j eta)`` for ``j = 0 .. floor(1/eta) - 1``."""
    n = n_steps(eta)
    field = _as_field(v)
    x = np.array(x0, dtype=DTYPE)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    path = [x.copy()] if return_path else None
    for j in range(n):
        x = x + eta * field(x, np.full(len(x), eta * j))
        if return_path:
            path.append(x.copy())
    out = x[0] if squeeze else x
    return (out, np.stack(path)) if return_path else out


def bwd_euler(v, eta: float, x_data, n_b: int = 10, return_residuals: bool = False,
              divergence_window: int = 3):
    """Invert :func:`fwd_euler` step by step.

    Step ``j`` solves ``y = x_j - eta v(y, tau_j)`` by ``n_b`` fixed-point
    iterations warm-started at ``x_j``, where ``tau_j = (n - 1 - j) eta`` is the
    time of the matching forward step (``1 - eta (j + 1)`` when ``1/eta`` is an
    integer). Raises :class:`ContractionError` when the fixed-point residual
    grows over ``divergence_window`` consecutive iterations.
    """
    if n_b < 1:
        raise ValueError("need at least one fixed-point iteration")
    n = n_steps(eta)
    field = _as_field(v)
    x = np.array(x_data, dtype=DTYPE)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    residuals = []
    for j in range(n):
        tau = np.full(len(x), eta * (n - 1 - j))
        y = x.copy()
        prev = None
        growth = 0
        step_res = []
        for _ in range(n_b):
            y_new = x - eta * field(y, tau)
            res = np.sqrt(np.sum((y_new - y) ** 2, axis=1))
            if not np.all(np.isfinite(y_new)):
                bad = int(np.flatnonzero(~np.all(np.isfinite(y_new), axis=1))[0])
                raise ContractionError(f"non-finite iterate at step {j}", j, bad)
            if prev is not None:
                grew = res > prev * (1 + 1e-12)
                grew &= res > 1e-12
                growth = growth + 1 if np.any(grew) else 0
                if growth >= divergence_window:
                    bad = int(np.flatnonzero(grew)[0])
                    raise ContractionError(
                        f"fixed-point residual grew {divergence_window} times in a row "
                        f"at step {j}", j, bad)
            prev = res
            step_res.append(res.max())
            y = y_new
        residuals.append(step_res)
        x = y
    out = x[0] if squeeze else x
    return (out, np.array(residuals)) if return_residuals else out


def lipschitz_estimate(v, eta: float, dim: int, rng, probes: int = 10_000,
                       scale: float = 3.0, delta: float = 1e-3, times=None) -> float:
    """Max of ``||v(x + d, t) - v(x, t)|| / ||d||`` over random probe pairs at
    every Euler time slice (or the given ``times``)."""
    rng = as_generator(rng)
    field = _as_field(v)
    if times is None:
        times = eta * np.arange(n_steps(eta))
    best = 0.0
    for t in np.atleast_1d(times):
        x = scale * rng.standard_normal((probes, dim))
        d = rng.standard_normal((probes, dim))
        d *= delta / np.linalg.norm(d, axis=1, keepdims=True)
        tt = np.full(probes, float(t))
        ratio = np.linalg.norm(field(x + d, tt) - field(x, tt), axis=1) / delta
        best = max(best, float(ratio.max()))
    return best


def check_lipschitz_gate(v, eta: float, dim: int, rng, threshold: float = 0.9,
                         override: bool = False, probes: int = 10_000) -> float:
    L = lipschitz_estimate(v, eta, dim, rng, probes=probes)
    if eta * L >= threshold and not override:
        raise LipschitzGateError(f"eta * L_hat = {eta * L:.3f} >= {threshold}")
    return L


def train_flow(model: FieldModel, data, steps: int, rng, batch_size: int = 256,
               lr: float = 1e-3, log_every: int = 0, callback=None,
               final_lr: float | None = None):
    """Fit a rectified flow from ``N(0, I)`` to ``data``."""
    data = np.atleast_2d(np.asarray(data, dtype=DTYPE))
    if len(data) == 0:
        raise ValueError("empty dataset")

    def step(m, g):
        idx = g.integers(len(data), size=batch_size)
        return rf_loss(m, data[idx], g, grad=True)

    return train(model, step, steps, rng, lr=lr, log_every=log_every, callback=callback,
                 final_lr=final_lr)
