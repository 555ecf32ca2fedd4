"""Metrics on the estimation side: covering-number calculator, guided score,
TV distance, subspace recovery and the trend-sweep driver."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import targets as tg
from . import training as tr
from . import transformer as tf
from .schedule import TimeWindow
from .seeds import stream


# ---------------------------------------------------------------------------
# covering number


@dataclass(frozen=True)
class CoverInputs:
    eps_c: float
    n: float
    L: float
    R_T: float
    C_F: float
    C_F_2inf: float
    C_OV: float
    C_OV_2inf: float
    C_KQ: float
    C_KQ_2inf: float
    C_E: float
    d: int = 1

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if k == "R_T":
                if v < 0:
                    raise ValueError("R_T must be non-negative")
            elif not v > 0:
                raise ValueError(f"{k} must be positive")


def covering_bound(inp: CoverInputs) -> float:
    """log N(eps_c) <= log(nL)/eps_c^2 * (alpha^{2/3} S)^3 with

    alpha = C_F^2 C_OV (1 + 4 C_KQ)(R_T + C_E),
    S = d^{2/3} (C_F^{2,inf})^{4/3} + d^{2/3} (2 C_F^2 C_OV C_KQ^{2,inf})^{2/3}
        + 2 (C_F^2 C_OV^{2,inf})^{2/3}.
    """
    alpha = inp.C_F**2 * inp.C_OV * (1 + 4 * inp.C_KQ) * (inp.R_T + inp.C_E)
    d23 = inp.d ** (2 / 3)
    S = (d23 * inp.C_F_2inf ** (4 / 3)
         + d23 * (2 * inp.C_F**2 * inp.C_OV * inp.C_KQ_2inf) ** (2 / 3)
         + 2 * (inp.C_F**2 * inp.C_OV_2inf) ** (2 / 3))
    return math.log(inp.n * inp.L) / inp.eps_c**2 * alpha**2 * S**3


def cover_inputs_from_report(rep: tf.NormReport, block=0, eps_c=1.0, n=1000, L=4, R_T=1.0, d=1):
    """Map measured norms onto the calculator's symbols (products bounded by
    products of norms)."""
    p = f"blocks.{block}."
    sp, ti = rep.spectral, rep.two_inf
    return CoverInputs(
        eps_c, n, L, R_T,
        C_F=max(sp[p + "W_1"] * sp[p + "W_2"], 1e-12),
        C_F_2inf=max(ti[p + "W_1"] * ti[p + "W_2"], 1e-12),
        C_OV=max(sp[p + "W_O"] * sp[p + "W_V"], 1e-12),
        C_OV_2inf=max(ti[p + "W_O"] * ti[p + "W_V"], 1e-12),
        C_KQ=max(sp[p + "W_K"] * sp[p + "W_Q"], 1e-12),
        C_KQ_2inf=max(ti[p + "W_K"] * ti[p + "W_Q"], 1e-12),
        C_E=max(ti[p + "E"], 1e-12), d=d)


# ---------------------------------------------------------------------------
# guidance, TV, subspace


def guided_score(model, x, y, t, eta):
    """(1 + eta) s(x, y, t) - eta s(x, null, t). ``model`` is a DiTModel or a
    callable ``s(x, y_or_None, t)``."""
    if eta < 0:
        raise ValueError("guidance strength must be non-negative")
    s = model if callable(model) else (lambda xx, yy, tt: tf.dit_forward(model, xx, yy, tt))
    cond = s(x, y, t)
    if eta == 0:
        return cond
    return (1 + eta) * cond - eta * s(x, None, t)


@dataclass(frozen=True)
class TVReport:
    tv: float
    bins: int
    samples_per_side: int


def tv_estimate(samples_a, samples_b, bins, range=None):
    """Half L1 distance of normalised histograms on one shared grid (1-D or 2-D).
    ``range`` defaults to the joint sample extent."""
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both sample sets must be non-empty")
    dim = a.shape[1]
    if dim > 2 or b.shape[1] != dim:
        raise ValueError("TV estimator supports matching 1-D or 2-D samples only")
    if range is None:
        both = np.vstack([a, b])
        range = [(lo, hi if hi > lo else lo + 1.0) for lo, hi in zip(both.min(0), both.max(0))]
    elif dim == 1 and np.ndim(range) == 1:
        range = [tuple(range)]
    ha, _ = np.histogramdd(a, bins=[bins] * dim, range=range)
    hb, _ = np.histogramdd(b, bins=[bins] * dim, range=range)
    tv = 0.5 * np.abs(ha / len(a) - hb / len(b)).sum()
    return TVReport(float(min(max(tv, 0.0), 1.0)), int(bins), int(min(len(a), len(b))))


def subspace_error(W_U, U):
    W_U = np.atleast_2d(np.asarray(W_U, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if W_U.shape[0] != U.shape[0]:
        raise ValueError("row dimensions differ")
    D = W_U @ W_U.T - U @ U.T
    return float(np.sum(D * D))


# ---------------------------------------------------------------------------
# trend sweeps


def default_base_family():
    """Conditional two-component 1-D mixture used per coordinate in sweeps."""
    return tg.GaussianMixtureFamily([0.5, 0.5], [[-1.0], [1.0]], [[[0.5]], [[-0.5]]], [0.25, 0.25])


@dataclass
class TrendConfig:
    kind: str = "d_x"             # "d_x" or "t0"
    d_x: int = 16                 # fixed dimension for t0 sweeps
    t0: float = 0.05              # fixed t0 for d_x sweeps
    T: float = 4.0
    n_blocks: int = 1
    s: int = 8
    r: int = 32
    train: tr.TrainConfig = field(default_factory=lambda: tr.TrainConfig(n=2000, batch=64, lr=0.01, epochs=30))
    test_n: int = 1000
    test_draws: int = 4
    risk_mc: int = 4000
    root_seed: int = 0
    base: tg.GaussianMixtureFamily | None = None


_NAN_ROW = dict(test_loss=np.nan, test_stderr=np.nan, risk=np.nan, stderr=np.nan,
                norm_WO_2inf=np.nan, norm_WV_2inf=np.nan)


def _cell(args):
    """One sweep cell; failures become a status code instead of aborting."""
    _, _, setting, seed = args
    try:
        return _run_cell(args)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return dict(_NAN_ROW, setting=setting, seed=seed, status=f"error:{type(exc).__name__}")


def _run_cell(args):
    cfg, idx, setting, seed = args
    d_x = int(setting) if cfg.kind == "d_x" else cfg.d_x
    t0 = float(setting) if cfg.kind == "t0" else cfg.t0
    fam = tg.ProductFamily(cfg.base or default_base_family(), d_x)
    window = TimeWindow(t0, cfg.T)
    spec = tf.patch_spec(d_x)
    model = tf.init_model(spec, fam.d_y, cfg.n_blocks, cfg.s, cfg.r, stream(cfg.root_seed, "init", idx, seed))
    tcfg = replace(cfg.train, window=window, seed=stream(cfg.root_seed, "train", idx, seed).integers(2**62))
    data = fam.sample(stream(cfg.root_seed, "data", idx, seed), tcfg.n)
    row = {"setting": setting, "seed": seed}
    try:
        tr.train(model, fam, tcfg, data=data)
    except tr.TrainingDiverged:
        row.update(_NAN_ROW, status="diverged")
        return row
    trng = stream(cfg.root_seed, "test", idx, seed)
    x0, y = fam.sample(trng, cfg.test_n)
    draw = tr.draw_loss_noise(len(x0), d_x, window, trng, tcfg.mask_prob, cfg.test_draws)
    xt, yr, target = tr._inputs(x0, y, draw)
    out = tf.dit_forward(model, xt, yr, draw.t, mask=draw.mask)
    per = np.sum((out - target) ** 2, axis=1)
    risk = tr.score_risk(tr.model_score(model), fam, window, cfg.risk_mc, stream(cfg.root_seed, "risk", idx, seed))
    rep = tf.norm_report(model, n_samples=50)
    row.update(test_loss=float(per.mean()), test_stderr=float(per.std(ddof=1) / np.sqrt(len(per))),
               risk=risk.risk, stderr=risk.stderr,
               norm_WO_2inf=rep.two_inf["blocks.0.W_O"], norm_WV_2inf=rep.two_inf["blocks.0.W_V"],
               status="ok")
    return row


def trend_experiment(sweep, seeds, cfg: TrendConfig, workers=1):
    """Train one model per (setting, seed) and return (rows, medians).

    ``medians`` maps each setting to the median test loss, risk and norms
    across seeds, along with the median standard errors.
    """
    if cfg.kind not in ("d_x", "t0"):
        raise ValueError("sweep kind must be 'd_x' or 't0'")
    jobs = [(cfg, i, s, seed) for i, s in enumerate(sweep) for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_cell, jobs))
    else:
        rows = [_cell(j) for j in jobs]
    medians = []
    for s in sweep:
        cell = [r for r in rows if r["setting"] == s and r["status"] == "ok"]
        med = {"setting": s, "n_ok": len(cell)}
        for k in ("test_loss", "test_stderr", "risk", "stderr", "norm_WO_2inf", "norm_WV_2inf"):
            med[k] = float(np.median([r[k] for r in cell])) if cell else float("nan")
        medians.append(med)
    return rows, medians


def count_inversions(values, errors, increasing=True, k=2.0):
    """(inversions, all_within_tolerance) for adjacent pairs of a sequence that
    should be monotone; an inversion is tolerated if it is within k combined
    standard errors."""
    v = np.asarray(values, dtype=float)
    e = np.asarray(errors, dtype=float)
    inv, ok = 0, True
    for i in range(len(v) - 1):
        diff = v[i + 1] - v[i] if increasing else v[i] - v[i + 1]
        if not diff >= 0:
            inv += 1
            if -diff > k * np.hypot(e[i], e[i + 1]):
                ok = False
    return inv, ok
