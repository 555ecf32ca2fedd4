"""Classifier-free-guidance score matching, reverse-mode gradients, training
and Monte-Carlo risk estimates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import targets as tg
from .schedule import TimeWindow, alpha_sigma, kernel_score
from .transformer import DiTModel, dit_forward


@dataclass
class TrainConfig:
    n: int = 2000
    batch: int = 64
    lr: float = 1e-2
    epochs: int = 50
    window: TimeWindow = field(default_factory=lambda: TimeWindow(0.05, 4.0))
    mask_prob: float = 0.5
    time_draws: int = 1
    seed: int = 0
    clip: float = 10.0

    def __post_init__(self):
        if not 0 <= self.mask_prob <= 1:
            raise ValueError("mask_prob must lie in [0, 1]")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")


@dataclass
class RiskReport:
    risk: float
    mc_points: int
    stderr: float


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


# ---------------------------------------------------------------------------
# reverse accumulation


class _Scoped:
    def __init__(self, grads, prefix):
        self.grads, self.prefix = grads, prefix

    def __getitem__(self, k):
        return self.grads[self.prefix + k]

    def __setitem__(self, k, v):
        self.grads[self.prefix + k] = v


class Tape:
    """Records one backward closure per forward op; :meth:`backward` replays
    them in reverse, each mapping the output cotangent to the input cotangent
    and accumulating parameter gradients."""

    def __init__(self):
        self.ops = []
        self.prefix = ""

    def scope(self, prefix):
        self.prefix = prefix

    def push(self, name, fn):
        self.ops.append((self.prefix, name, fn))

    def backward(self, g, grads):
        for prefix, name, fn in reversed(self.ops):
            g = fn(g, _Scoped(grads, prefix))
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in op {prefix}{name}")
        return g


def zero_grads(model: DiTModel):
    return {name: np.zeros_like(arr) for name, arr in model.named_params()}


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossDraw:
    """Pinned randomness of one loss evaluation (rows are sample x time draw)."""

    idx: np.ndarray
    t: np.ndarray
    mask: np.ndarray
    eps: np.ndarray


def draw_loss_noise(n, d_x, window: TimeWindow, rng, mask_prob=0.5, time_draws=1):
    idx = np.repeat(np.arange(n), time_draws)
    m = len(idx)
    t = rng.uniform(window.t0, window.T, m)
    mask = rng.random(m) < mask_prob
    eps = rng.standard_normal((m, d_x))
    return LossDraw(idx, t, mask, eps)


def _inputs(x0, y, draw):
    a, s = alpha_sigma(draw.t)
    x0r = x0[draw.idx]
    xt = a[:, None] * x0r + s[:, None] * draw.eps
    target = kernel_score(xt, x0r, draw.t)
    return xt, y[draw.idx], target


def loss_from_draw(model, x0, y, draw: LossDraw, score_fn=None):
    """Mean over rows of |s(x_t, tau y, t) - grad log phi_t(x_t | x_0)|^2."""
    xt, yr, target = _inputs(np.atleast_2d(x0), np.atleast_2d(y), draw)
    if score_fn is None:
        out = dit_forward(model, xt, yr, draw.t, mask=draw.mask)
    else:
        out = score_fn(xt, yr, draw.t, draw.mask)
    return float(np.mean(np.sum((out - target) ** 2, axis=1)))


def cfg_loss(model, x0, y, window: TimeWindow, rng, mask_prob=0.5, time_draws=1, score_fn=None):
    x0 = np.atleast_2d(x0)
    draw = draw_loss_noise(len(x0), x0.shape[1], window, rng, mask_prob, time_draws)
    return loss_from_draw(model, x0, np.atleast_2d(y), draw, score_fn)


def loss_and_grad(model: DiTModel, x0, y, draw: LossDraw):
    xt, yr, target = _inputs(x0, y, draw)
    tape = Tape()
    out = dit_forward(model, xt, yr, draw.t, mask=draw.mask, tape=tape)
    resid = out - target
    m = len(resid)
    loss = float(np.mean(np.sum(resid**2, axis=1)))
    grads = zero_grads(model)
    tape.backward(2.0 * resid / m, grads)
    return loss, grads


def gradients(model, batch, window: TimeWindow, rng, mask_prob=0.5, time_draws=1):
    """(loss, gradient record) of the batch loss for one fresh noise draw."""
    x0, y = batch
    x0 = np.atleast_2d(x0)
    if len(x0) == 0:
        raise ValueError("empty batch")
    draw = draw_loss_noise(len(x0), x0.shape[1], window, rng, mask_prob, time_draws)
    return loss_and_grad(model, x0, np.atleast_2d(y), draw)


# ---------------------------------------------------------------------------
# training


def _orthonormalize(W):
    Q, R = np.linalg.qr(W)
    return Q * np.sign(np.diag(R))[None, :]


def train(model: DiTModel, family, cfg: TrainConfig, data=None, log=None):
    """Clipped gradient descent on the CFG loss.

    Returns (model, trace) where trace holds the mean training loss of every
    epoch. The model is updated in place. ``data`` overrides the sample draw.
    A latent model's W_U is re-orthonormalised after every step.
    """
    rng = np.random.default_rng(cfg.seed)
    if data is None:
        data = family.sample(np.random.default_rng([cfg.seed, 1]), cfg.n)
    x0, y = data
    n = len(x0)
    params = dict(model.named_params())
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch):
            b = order[start:start + cfg.batch]
            loss, grads = gradients(model, (x0[b], y[b]), cfg.window, rng, cfg.mask_prob, cfg.time_draws)
            if not np.isfinite(loss) or loss > 1e6:
                trace.append(loss)
                raise TrainingDiverged(f"loss {loss:.3g} at epoch {epoch}", trace)
            gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            scale = cfg.lr * min(1.0, cfg.clip / gnorm) if gnorm > 0 else 0.0
            if scale:
                for name, g in grads.items():
                    params[name] -= scale * g
                if model.latent is not None:
                    model.latent.W_U[...] = _orthonormalize(model.latent.W_U)
            total += loss * len(b)
            count += len(b)
        trace.append(total / count)
        if log is not None:
            log(epoch, trace[-1])
    return model, trace


def model_score(model: DiTModel):
    return lambda x, y, t: dit_forward(model, x, y, t)


def zero_score(x, y, t):
    return np.zeros_like(np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# risk


def _risk_terms(score_fn, family, window, mc_points, rng, R_trunc=np.inf, chunk=4096):
    vals = np.empty(mc_points)
    for start in range(0, mc_points, chunk):
        m = min(chunk, mc_points - start)
        t = rng.uniform(window.t0, window.T, m)
        x0, y = family.sample(rng, m)
        a, s = alpha_sigma(t)
        xt = a[:, None] * x0 + s[:, None] * rng.standard_normal(x0.shape)
        err = np.sum((score_fn(xt, y, t) - tg.oracle_score(family, xt, y, t)) ** 2, axis=1)
        if np.isfinite(R_trunc):
            err = err * (np.max(np.abs(xt), axis=1) <= R_trunc)
        vals[start:start + m] = err
    return vals


def score_risk(score_fn, family, window: TimeWindow, mc_points, rng):
    v = _risk_terms(score_fn, family, window, mc_points, rng)
    return RiskReport(float(v.mean()), mc_points, float(v.std(ddof=1) / np.sqrt(mc_points)))


def truncated_risk(score_fn, family, window: TimeWindow, R_trunc, mc_points, rng):
    if not R_trunc >= 0:
        raise ValueError("truncation radius must be non-negative")
    v = _risk_terms(score_fn, family, window, mc_points, rng, R_trunc)
    return RiskReport(float(v.mean()), mc_points, float(v.std(ddof=1) / np.sqrt(mc_points)))
