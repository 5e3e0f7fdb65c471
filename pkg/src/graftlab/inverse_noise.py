"""Inverse noise correction: push a dataset backwards through a trained flow,
fit a small corrector flow to the resulting noise law, and chain the two at
sampling time. Also closed-form checks on linear-Gaussian testbeds and two
sample-based distances used to score the pipelines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.stats import norm

from .diffusion import _as_field
from .flow import ContractionError, bwd_euler, check_lipschitz_gate, fwd_euler, n_steps, train_flow
from .numerics import DTYPE, FieldModel, as_generator


class InversionError(RuntimeError):
    def __init__(self, msg: str, sample: int | None, step: int | None):
        super().__init__(msg)
        self.sample = sample
        self.step = step


# --------------------------------------------------------------------------
# Dataset inversion and corrected sampling
# --------------------------------------------------------------------------

def build_inverse_dataset(v_theta, eta: float, data, n_b: int = 10, rng=None,
                          gate: bool = True, gate_threshold: float = 0.9,
                          probes: int = 10_000, perturb: float = 0.0):
    """Backward-Euler image of every data point, in input order.

    With ``gate`` the field's empirical Lipschitz constant is checked first
    (``eta * L_hat < gate_threshold``). ``perturb > 0`` adds Gaussian jitter of
    that scale before inversion, a guard against degenerate data.
    """
    data = np.atleast_2d(np.asarray(data, dtype=DTYPE))
    rng = as_generator(0 if rng is None else rng)
    if gate:
        check_lipschitz_gate(v_theta, eta, data.shape[1], rng, threshold=gate_threshold,
                             probes=probes)
    if perturb > 0:
        data = data + perturb * rng.standard_normal(data.shape)
    try:
        return bwd_euler(v_theta, eta, data, n_b=n_b)
    except ContractionError as err:
        raise InversionError(f"inversion failed for sample {err.sample}: {err}",
                             err.sample, err.step) from err


def corrected_sample(v_corrector, v_theta, eta: float, rng, n_samples: int, dim: int,
                     eta_corrector: float | None = None):
    """Noise ``z ~ N(0, I)`` through the corrector flow, then the base flow."""
    rng = as_generator(rng)
    z = rng.standard_normal((n_samples, dim))
    z = fwd_euler(v_corrector, eta if eta_corrector is None else eta_corrector, z)
    return fwd_euler(v_theta, eta, z)


def base_sample(v_theta, eta: float, rng, n_samples: int, dim: int):
    rng = as_generator(rng)
    return fwd_euler(v_theta, eta, rng.standard_normal((n_samples, dim)))


def train_corrector(v_theta, eta: float, data, steps: int, rng, hidden=None,
                    n_b: int = 10, batch_size: int = 256, lr: float = 1e-3,
                    gate: bool = True, probes: int = 10_000,
                    final_lr: float | None = None):
    """Invert ``data`` through ``v_theta`` and fit a flow to the inverse noise.

    The corrector defaults to half the hidden width of ``v_theta`` when it is a
    :class:`FieldModel`. Returns ``(corrector, inverse_noise, losses)``.
    """
    rng = as_generator(rng)
    data = np.atleast_2d(np.asarray(data, dtype=DTYPE))
    inv = build_inverse_dataset(v_theta, eta, data, n_b=n_b, rng=rng, gate=gate,
                                probes=probes)
    if hidden is None:
        base_hidden = getattr(v_theta, "hidden", (128, 128, 128))
        hidden = tuple(max(1, h // 2) for h in base_hidden)
    corrector = FieldModel(data.shape[1], hidden, rng=rng)
    losses = train_flow(corrector, inv, steps, rng, batch_size=batch_size, lr=lr,
                        final_lr=final_lr)
    return corrector, inv, losses


def flops_estimate(models_and_steps) -> int:
    """Per-sample forward FLOPs for a chain of ``(model, euler_steps)`` stages."""
    total = 0
    for model, steps in models_and_steps:
        per = model.flops_per_eval() if hasattr(model, "flops_per_eval") else 0
        total += int(per) * int(steps)
    return total


# --------------------------------------------------------------------------
# Closed-form checks on Gaussian testbeds
# --------------------------------------------------------------------------

def gaussian_kl(m1, v1, m2, v2) -> float:
    """``KL(N(m1, v1) || N(m2, v2))`` in one dimension."""
    return float(0.5 * np.log(v2 / v1) + (v1 + (m1 - m2) ** 2) / (2.0 * v2) - 0.5)


def _gauss_tv(m1, s1, m2, s2) -> float:
    """Total variation between two 1D Gaussians by adaptive quadrature split at
    the density crossings."""
    # crossings solve a quadratic in x from equating the log densities
    a = 0.5 / s2 ** 2 - 0.5 / s1 ** 2
    b = m1 / s1 ** 2 - m2 / s2 ** 2
    c = m2 ** 2 / (2 * s2 ** 2) - m1 ** 2 / (2 * s1 ** 2) + np.log(s2 / s1)
    if abs(a) < 1e-15:
        roots = [] if abs(b) < 1e-15 else [-c / b]
    else:
        disc = b * b - 4 * a * c
        roots = [] if disc < 0 else sorted({(-b - np.sqrt(disc)) / (2 * a),
                                            (-b + np.sqrt(disc)) / (2 * a)})
    lo = min(m1 - 40 * s1, m2 - 40 * s2)
    hi = max(m1 + 40 * s1, m2 + 40 * s2)
    edges = [lo] + [r for r in roots if lo < r < hi] + [hi]

    def f(x):
        return abs(norm.pdf(x, m1, s1) - norm.pdf(x, m2, s2))

    total = 0.0
    for x0, x1 in zip(edges[:-1], edges[1:]):
        total += integrate.quad(f, x0, x1, epsabs=1e-14, epsrel=1e-12, limit=200)[0]
    return 0.5 * total


@dataclass(frozen=True)
class IdentityCheck:
    lhs: float
    rhs: float

    @property
    def difference(self) -> float:
        return abs(self.lhs - self.rhs)

    def __iter__(self):
        return iter((self.lhs, self.rhs, self.difference))


def _linear_coefficient(field, probe_times=None) -> float:
    if np.isscalar(field):
        return float(field)
    f = _as_field(field)
    probe_times = np.linspace(0.0, 1.0, 11) if probe_times is None else probe_times
    xs = np.array([[-2.0], [-0.5], [0.7], [3.0]])
    a = float(f(np.array([[1.0]]), np.array([0.0]))[0, 0])
    for t in probe_times:
        out = f(xs, np.full(len(xs), t))
        if not np.allclose(out, a * xs, rtol=1e-10, atol=1e-12):
            raise ValueError("field is not of the form v(x, t) = a x")
    return a


def linear_flow_map(a: float, eta: float) -> float:
    """Scale factor of the discrete forward map for ``v(x, t) = a x``."""
    return float((1.0 + eta * a) ** n_steps(eta))


def dpi_identity_check(field, eta: float, data_mean: float = 0.0, data_var: float = 1.0,
                       metric: str = "kl") -> IdentityCheck:
    """Compare the inverse-noise gap with the generation gap for a linear flow.

    ``field`` is the coefficient ``a`` or a callable of the form ``a x``. With a
    linear map ``x -> c x`` every law is Gaussian: the generated law is
    ``N(0, c^2)`` and the inverse noise is ``N(m / c, s^2 / c^2)``. The left side
    is the divergence between ``N(0, 1)`` and the inverse noise; the right is
    between the generated law and the data.
    """
    a = _linear_coefficient(field)
    c = linear_flow_map(a, eta)
    if c == 0:
        raise ValueError("the discrete map is singular")
    sd = np.sqrt(data_var)
    if metric == "kl":
        lhs = gaussian_kl(0.0, 1.0, data_mean / c, data_var / c ** 2)
        rhs = gaussian_kl(0.0, c ** 2, data_mean, data_var)
    elif metric == "tv":
        lhs = _gauss_tv(0.0, 1.0, data_mean / c, sd / abs(c))
        rhs = _gauss_tv(0.0, abs(c), data_mean, sd)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return IdentityCheck(lhs, rhs)


def gaussian_velocity(x, t, mu: float, var: float):
    """Exact rectified-flow velocity from ``N(0, 1)`` to ``N(mu, var)``."""
    s2 = t * t * var + (1.0 - t) ** 2
    return mu + (t * var - (1.0 - t)) / s2 * (x - t * mu)


def velocity_kl_integrand(t, mu: float, var: float):
    """``t / (1 - t) E || v^X_t - v^Y_t ||^2`` with ``X_t ~ N(t mu, s_t^2)``.

    Writing ``X_t = t mu + s_t xi`` the velocity gap is affine in ``xi`` so its
    second moment is closed form.
    """
    t = np.asarray(t, dtype=DTYPE)
    if np.any(t >= 1):
        raise ValueError("time grid must stay below 1")
    s2 = t * t * var + (1.0 - t) ** 2
    b = (t * var - (1.0 - t)) / s2
    cy = (2.0 * t - 1.0) / ((1.0 - t) ** 2 + t ** 2)
    gap2 = (mu * (1.0 - cy * t)) ** 2 + (b - cy) ** 2 * s2
    return t / (1.0 - t) * gap2


def velocity_kl_identity_check(mu: float, var: float, grid=None, n_grid: int = 10_000,
                            cutoff: float = 1e-4) -> IdentityCheck:
    """``KL(N(mu, var) || N(0, 1))`` against the time integral of the weighted
    velocity gap, by the trapezoid rule on ``[0, 1 - cutoff]``.

    The gap vanishes like ``(1 - t)`` at the data end, so the integrand is
    ``O(1 - t)`` there and the discarded tail is ``O(cutoff^2)``.
    """
    if grid is None:
        grid = np.linspace(0.0, 1.0 - cutoff, n_grid)
    grid = np.asarray(grid, dtype=DTYPE)
    if np.any(grid >= 1):
        raise ValueError("time grid must stay below 1")
    rhs = float(integrate.trapezoid(velocity_kl_integrand(grid, mu, var), grid))
    return IdentityCheck(gaussian_kl(mu, var, 0.0, 1.0), rhs)


# --------------------------------------------------------------------------
# Sample distances
# --------------------------------------------------------------------------

def _quantiles(x, n):
    x = np.sort(x)
    if len(x) == n:
        return x
    return np.quantile(x, (np.arange(n) + 0.5) / n)


def sliced_w2(a, b, n_proj: int = 256, rng=0) -> float:
    """Sliced 2-Wasserstein distance: root mean of 1D squared distances over
    random unit directions (exact 1D distance when the dimension is 1).

    Note the sliced value in ``d`` dimensions scales like ``1 / sqrt(d)`` times
    the full distance for a mean shift.
    """
    a = np.atleast_2d(np.asarray(a, dtype=DTYPE))
    b = np.atleast_2d(np.asarray(b, dtype=DTYPE))
    if a.shape[0] == 1 and a.shape[1] > 1 and b.shape[0] == 1:
        a, b = a.T, b.T
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty sample set")
    d = a.shape[1]
    if d == 1:
        dirs = np.ones((1, 1))
    else:
        dirs = as_generator(rng).standard_normal((n_proj, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    n = max(len(a), len(b))
    total = 0.0
    for u in dirs:
        qa, qb = _quantiles(a @ u, n), _quantiles(b @ u, n)
        total += np.mean((qa - qb) ** 2)
    return float(np.sqrt(total / len(dirs)))


def median_bandwidth(pooled, rng=0, max_points: int = 2000) -> float:
    pooled = np.atleast_2d(pooled)
    if len(pooled) > max_points:
        pooled = pooled[as_generator(rng).choice(len(pooled), max_points, replace=False)]
    sq = np.sum(pooled ** 2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * pooled @ pooled.T, 0.0)
    iu = np.triu_indices(len(pooled), 1)
    med = np.median(np.sqrt(d2[iu]))
    return float(med) if med > 0 else 1.0


def _kernel_sum(x, y, bw, chunk=2048):
    total = 0.0
    sy = np.sum(y ** 2, axis=1)
    for lo in range(0, len(x), chunk):
        xc = x[lo:lo + chunk]
        d2 = np.sum(xc ** 2, axis=1)[:, None] + sy[None, :] - 2 * xc @ y.T
        total += np.exp(-np.maximum(d2, 0.0) / (2 * bw * bw)).sum()
    return total


def mmd2(a, b, bandwidth: float | None = None) -> float:
    """Biased (V-statistic) squared MMD with a Gaussian kernel. Non-negative,
    and zero exactly when the two empirical measures coincide."""
    a = np.atleast_2d(np.asarray(a, dtype=DTYPE))
    b = np.atleast_2d(np.asarray(b, dtype=DTYPE))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty sample set")
    if bandwidth is None:
        bandwidth = median_bandwidth(np.concatenate([a, b]))
    val = (_kernel_sum(a, a, bandwidth) / len(a) ** 2
           + _kernel_sum(b, b, bandwidth) / len(b) ** 2
           - 2 * _kernel_sum(a, b, bandwidth) / (len(a) * len(b)))
    return max(float(val), 0.0)


def mmd_permutation_null(a, b, n_perm: int, rng, bandwidth: float | None = None):
    """MMD^2 values under random relabelling of the pooled sample."""
    a = np.atleast_2d(np.asarray(a, dtype=DTYPE))
    b = np.atleast_2d(np.asarray(b, dtype=DTYPE))
    pooled = np.concatenate([a, b])
    if bandwidth is None:
        bandwidth = median_bandwidth(pooled)
    rng = as_generator(rng)
    out = np.empty(n_perm)
    for i in range(n_perm):
        p = rng.permutation(len(pooled))
        out[i] = mmd2(pooled[p[:len(a)]], pooled[p[len(a):]], bandwidth)
    return out


METRICS = ("sliced_w2", "mmd")


def distribution_distance(a, b, metric: str = "sliced_w2", rng=0, n_proj: int = 256) -> float:
    if metric == "sliced_w2":
        return sliced_w2(a, b, n_proj=n_proj, rng=rng)
    if metric == "mmd":
        return mmd2(a, b)
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
