"""Numerical substrate: seeded RNG streams, a small MLP field model with
hand-written reverse-mode gradients, Adam, and finite-difference checks."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


# --------------------------------------------------------------------------
# RNG streams
# --------------------------------------------------------------------------

def _stream_key(stream: int | str | tuple) -> int:
    if isinstance(stream, (int, np.integer)):
        return int(stream) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(repr(stream).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class RngStream:
    """Identifies an independent random stream as ``(seed, stream id)``.

    Streams are built on Philox (counter based) keyed through a
    ``SeedSequence`` spawn key, so distinct ids never overlap and the same
    pair always replays the same sequence.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed & 0xFFFFFFFFFFFFFFFF,
                                    spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, name: int | str | tuple) -> "RngStream":
        key = _stream_key((self.stream_id, name))
        return RngStream(self.seed, key)


def rng_stream(seed: int, stream: int | str | tuple = 0) -> np.random.Generator:
    """Generator for the named stream under a root seed."""
    return RngStream(seed, _stream_key(stream)).generator()


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng_stream(int(rng))


# --------------------------------------------------------------------------
# Field model
# --------------------------------------------------------------------------

def silu(z):
    return z / (1.0 + np.exp(-z))


def silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def time_features(t, dim: int, max_freq: float = 50.0) -> np.ndarray:
    """Sinusoidal features of a scalar or per-sample time, shape (B, dim)."""
    if dim % 2:
        raise ValueError("time embedding dimension must be even")
    t = np.atleast_1d(np.asarray(t, dtype=DTYPE))
    freqs = np.exp(np.linspace(0.0, np.log(max_freq), dim // 2))
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class FieldModel:
    """MLP approximating a score or velocity field ``(x, t) -> R^d``.

    Layout: ``[x, time_features(t)]`` feeds ``len(hidden)`` SiLU layers and a
    linear read-out, plus a learnable linear skip ``x @ skip``. Parameters
    are kept as a flat list ``[W1, b1, ..., WL, bL, skip]`` which is also the
    checkpoint declaration order.
    """

    def __init__(self, dim: int, hidden: Sequence[int] = (128, 128, 128),
                 time_dim: int = 16, params: list[np.ndarray] | None = None,
                 rng=None):
        if dim < 1 or any(h < 1 for h in hidden) or time_dim < 2:
            raise ValueError("layer widths must be positive")
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.time_dim = int(time_dim)
        widths = self.widths
        if params is None:
            rng = as_generator(0 if rng is None else rng)
            params = []
            for fan_in, fan_out in zip(widths[:-1], widths[1:]):
                bound = 1.0 / np.sqrt(fan_in)
                params.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
                params.append(rng.uniform(-bound, bound, fan_out))
            params.append(np.zeros((dim, dim)))
        self.params = [np.array(p, dtype=DTYPE) for p in params]
        self._check_shapes()

    @property
    def widths(self) -> list[int]:
        return [self.dim + self.time_dim, *self.hidden, self.dim]

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def _check_shapes(self):
        widths = self.widths
        expected = []
        for a, b in zip(widths[:-1], widths[1:]):
            expected += [(a, b), (b,)]
        expected.append((self.dim, self.dim))
        got = [p.shape for p in self.params]
        if got != expected:
            raise ValueError(f"parameter shapes {got} do not match {expected}")

    @classmethod
    def zeros(cls, dim: int, hidden=(128, 128, 128), time_dim: int = 16) -> "FieldModel":
        m = cls(dim, hidden, time_dim)
        m.params = [np.zeros_like(p) for p in m.params]
        return m

    @classmethod
    def linear(cls, matrix, hidden=(8,), time_dim: int = 16) -> "FieldModel":
        """Model whose output is exactly ``x @ matrix`` (MLP branch zeroed)."""
        matrix = np.atleast_2d(np.asarray(matrix, dtype=DTYPE))
        m = cls.zeros(matrix.shape[0], hidden, time_dim)
        m.params[-1] = matrix.copy()
        return m

    def copy(self) -> "FieldModel":
        return FieldModel(self.dim, self.hidden, self.time_dim,
                          params=[p.copy() for p in self.params])

    def with_params(self, params) -> "FieldModel":
        return FieldModel(self.dim, self.hidden, self.time_dim, params=params)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def flops_per_eval(self) -> int:
        """Multiply-add count (x2) of one forward pass for one sample."""
        w = self.widths
        return 2 * (sum(a * b for a, b in zip(w[:-1], w[1:])) + self.dim * self.dim)

    def _inputs(self, x, t):
        x = np.asarray(x, dtype=DTYPE)
        squeeze = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            raise ValueError(f"expected spatial dim {self.dim}, got {x.shape[1]}")
        t = np.asarray(t, dtype=DTYPE)
        if t.ndim == 0:
            t = np.full(x.shape[0], float(t))
        if t.shape != (x.shape[0],):
            raise ValueError("time must be scalar or one value per sample")
        return x, t, squeeze

    def forward(self, x, t):
        """Evaluate the field; returns ``(out, cache)`` for :meth:`backward`."""
        x, t, _ = self._inputs(x, t)
        h = np.concatenate([x, time_features(t, self.time_dim)], axis=1)
        acts, pre = [h], []
        n = self.n_layers
        for i in range(n):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            if i < n - 1:
                pre.append(z)
                h = silu(z)
                acts.append(h)
            else:
                h = z
        out = h + x @ self.params[-1]
        return out, (x, acts, pre)

    def __call__(self, x, t):
        x_arr = np.asarray(x)
        out, _ = self.forward(x, t)
        return out[0] if x_arr.ndim == 1 else out

    def backward(self, cache, grad_out) -> list[np.ndarray]:
        """Reverse-mode gradient of ``sum(grad_out * out)`` w.r.t. params."""
        x, acts, pre = cache
        g = np.asarray(grad_out, dtype=DTYPE)
        n = self.n_layers
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        grads[-1] = x.T @ g
        for i in reversed(range(n)):
            W = self.params[2 * i]
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ W.T) * silu_grad(pre[i - 1])
        return grads


class ShiftedField:
    """A trainable model plus a fixed analytic offset field.

    Used to pin a model at a known field (e.g. an exact velocity) while still
    exposing gradients with respect to the model's parameters.
    """

    def __init__(self, model: FieldModel, offset: Callable):
        self.model = model
        self.offset = offset
        self.dim = model.dim

    @property
    def params(self):
        return self.model.params

    def forward(self, x, t):
        out, cache = self.model.forward(x, t)
        x2, t2, _ = self.model._inputs(x, t)
        return out + self.offset(x2, t2), cache

    def backward(self, cache, grad_out):
        return self.model.backward(cache, grad_out)

    def __call__(self, x, t):
        x_arr = np.asarray(x)
        out, _ = self.forward(x, t)
        return out[0] if x_arr.ndim == 1 else out


def model_eval(model, x, t):
    return model(x, t)


def model_grad(model, x, t, loss_fn):
    """Loss and parameter gradient for ``loss_fn(model(x, t))``.

    ``loss_fn`` maps the model output to ``(loss, dloss/dout)``.
    """
    out, cache = model.forward(x, t)
    loss, g_out = loss_fn(out)
    return float(loss), model.backward(cache, g_out)


def mse_to_target(target, weight=None):
    """Loss closure for ``mean_b w_b * ||out_b - target_b||^2``."""
    target = np.asarray(target, dtype=DTYPE)

    def loss_fn(out):
        diff = out - target
        w = np.ones(len(out)) if weight is None else np.asarray(weight, dtype=DTYPE)
        sq = np.sum(diff * diff, axis=1)
        loss = np.mean(w * sq)
        return loss, (2.0 / len(out)) * w[:, None] * diff

    return loss_fn


# --------------------------------------------------------------------------
# Finite differences
# --------------------------------------------------------------------------

def finite_difference_grad(loss_of_params: Callable[[list[np.ndarray]], float],
                           params: list[np.ndarray], h: float = 1e-5,
                           entries: int | None = None, rng=None):
    """Central-difference gradient.

    With ``entries`` set, only that many randomly chosen coordinates are
    probed; the result is a list of ``(param index, flat index, value)``.
    """
    if entries is None:
        grads = []
        for k, p in enumerate(params):
            g = np.zeros_like(p)
            flat = p.reshape(-1)
            for j in range(flat.size):
                grads_j = _fd_entry(loss_of_params, params, k, j, h)
                g.reshape(-1)[j] = grads_j
            grads.append(g)
        return grads
    rng = as_generator(0 if rng is None else rng)
    sizes = np.array([p.size for p in params])
    picks = []
    for _ in range(entries):
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        j = int(rng.integers(params[k].size))
        picks.append((k, j, _fd_entry(loss_of_params, params, k, j, h)))
    return picks


def _fd_entry(loss_of_params, params, k, j, h):
    plus = [p.copy() for p in params]
    minus = [p.copy() for p in params]
    plus[k].reshape(-1)[j] += h
    minus[k].reshape(-1)[j] -= h
    return (loss_of_params(plus) - loss_of_params(minus)) / (2 * h)


def relative_error(a, b) -> float:
    a = np.ravel(np.asarray(a, dtype=DTYPE))
    b = np.ravel(np.asarray(b, dtype=DTYPE))
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer step sees NaN/inf gradients; params untouched."""


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(params, grads, state: AdamState | None = None,
                   hp: AdamConfig | None = None):
    """One Adam update. Returns ``(new_params, new_state)``."""
    hp = hp or AdamConfig()
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("params and grads must have matching shapes")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NonFiniteGradientError("non-finite gradient; step rejected")
    if state is None or not state.m:
        state = AdamState(0, [np.zeros_like(p) for p in params],
                          [np.zeros_like(p) for p in params])
    step = state.step + 1
    m = [hp.beta1 * mi + (1 - hp.beta1) * g for mi, g in zip(state.m, grads)]
    v = [hp.beta2 * vi + (1 - hp.beta2) * g * g for vi, g in zip(state.v, grads)]
    c1 = 1 - hp.beta1 ** step
    c2 = 1 - hp.beta2 ** step
    new = [p - hp.lr * (mi / c1) / (np.sqrt(vi / c2) + hp.eps)
           for p, mi, vi in zip(params, m, v)]
    return new, AdamState(step, m, v)


def cosine_lr(step: int, steps: int, lr: float, final_lr: float | None) -> float:
    """Cosine decay from ``lr`` to ``final_lr`` over ``steps``; constant when
    ``final_lr`` is None."""
    if final_lr is None or steps <= 1:
        return lr
    frac = step / (steps - 1)
    return final_lr + 0.5 * (lr - final_lr) * (1.0 + np.cos(np.pi * frac))


def train(model: FieldModel, loss_and_grad: Callable, steps: int, rng,
          lr: float = 1e-3, log_every: int = 0, callback=None,
          final_lr: float | None = None):
    """Generic Adam loop. ``loss_and_grad(model, rng) -> (loss, grads)``.

    With ``final_lr`` the step size follows a cosine decay down to it.
    Returns the list of per-step losses. Steps with non-finite gradients are
    skipped.
    """
    rng = as_generator(rng)
    hp = AdamConfig(lr=lr)
    state = None
    losses = []
    for step in range(steps):
        loss, grads = loss_and_grad(model, rng)
        hp.lr = cosine_lr(step, steps, lr, final_lr)
        try:
            model.params, state = optimizer_step(model.params, grads, state, hp)
        except NonFiniteGradientError:
            continue
        losses.append(loss)
        if callback is not None and log_every and (step + 1) % log_every == 0:
            callback(step + 1, model, float(np.mean(losses[-log_every:])))
    return losses
