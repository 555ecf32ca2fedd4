"""Ornstein-Uhlenbeck forward schedule and the two samplers built on it.

The forward process is dX = -X/2 dt + dW, so that

    x_t | x_0 ~ N(alpha_t x_0, sigma_t^2 I),  alpha_t = exp(-t/2),
    sigma_t^2 = 1 - exp(-t).

The backward sampler integrates the time-reversed SDE with Euler-Maruyama.
Score callables everywhere in the package take *forward* time.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class ScheduleValue:
    alpha: float
    sigma: float
    t: float


@dataclass(frozen=True)
class TimeWindow:
    """Early-stopping time ``t0``, horizon ``T`` and backward step count."""

    t0: float
    T: float
    steps: int = 200

    def __post_init__(self):
        if not (self.t0 > 0 and self.T > self.t0):
            raise ValueError(f"need 0 < t0 < T, got t0={self.t0}, T={self.T}")
        if int(self.steps) < 1:
            raise ValueError("steps must be >= 1")


def alpha_sigma(t):
    """Vectorised (alpha_t, sigma_t). ``t`` may be an array; no validation."""
    t = np.asarray(t, dtype=float)
    # sigma via expm1 keeps relative accuracy for t near 0
    return np.exp(-0.5 * t), np.sqrt(-np.expm1(-t))


def noise_schedule(t: float) -> ScheduleValue:
    t = float(t)
    if not t >= 0:
        raise ValueError(f"time must be non-negative, got {t}")
    a, s = alpha_sigma(t)
    return ScheduleValue(float(a), float(s), t)


def kernel_score(x_t, x_0, t):
    """Score of the perturbation kernel, -(x_t - alpha_t x_0) / sigma_t^2.

    Broadcasts over leading axes; ``t`` may be a scalar or an array that
    broadcasts against ``x_t[..., 0]``.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("kernel score is singular at t = 0 (sigma_t = 0)")
    a, s = alpha_sigma(t)
    x_t = np.asarray(x_t, dtype=float)
    x_0 = np.asarray(x_0, dtype=float)
    if t.ndim:
        a, s = a[..., None], s[..., None]
    return -(x_t - a * x_0) / s**2


def forward_sample(x_0, t, rng: np.random.Generator):
    """Draw x_t ~ N(alpha_t x_0, sigma_t^2 I)."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("time must be non-negative")
    x_0 = np.asarray(x_0, dtype=float)
    a, s = alpha_sigma(t)
    if t.ndim:
        a, s = a[..., None], s[..., None]
    eps = rng.standard_normal(x_0.shape)
    return a * x_0 + s * eps


class SamplerError(FloatingPointError):
    pass


def backward_sample(score_fn: Callable, window: TimeWindow, y, rng: np.random.Generator,
                    d_x: int = 1, n: int = 1, trace: list | None = None):
    """Euler-Maruyama for the reversed OU SDE, from N(0, I) at time T to t0.

    Parameters
    ----------
    score_fn : callable
        ``score_fn(x, y, s)`` with ``x`` of shape (n, d_x) and forward time ``s``.
    window : TimeWindow
        Uniform step ``h = (T - t0) / steps``.
    y : condition passed through to ``score_fn`` unchanged (may be None).
    d_x, n : state dimension and number of independent chains.
    trace : optional list; if given, the state after every step is appended.

    Returns
    -------
    ndarray of shape (n, d_x), the state at forward time t0.
    """
    h = (window.T - window.t0) / window.steps
    sqh = np.sqrt(h)
    x = rng.standard_normal((n, d_x))
    for k in range(window.steps):
        s = window.T - k * h
        sc = np.asarray(score_fn(x, y, s), dtype=float)
        if not np.all(np.isfinite(sc)):
            raise SamplerError(f"non-finite score at step {k} (forward time {s:.6g})")
        x = x + h * (0.5 * x + sc) + sqh * rng.standard_normal(x.shape)
        if trace is not None:
            trace.append(x.copy())
    return x
