"""Explicit one-layer universal approximator: a quantizing ReLU layer, a
rank-rho contextual-mapping attention and a bump-function memorizer.

The attention separates identical tokens in different contexts by gaps of
order exp(-p1'p1 * gamma_max^2), far below double precision. Everything past
the quantizer is therefore evaluated in mpmath at a working precision chosen
from that exponent, and the quantizer itself runs in exact rationals.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import mpmath
import numpy as np
from mpmath import mp, mpf


class ConfigError(ValueError):
    pass


class SeparationError(ValueError):
    pass


class ResolutionError(ValueError):
    pass


_REL = 1e-12  # slack on the (non-strict) separation checks


def _relu(v):
    return v if v > 0 else 0 * v


def _frac(x):
    return x if isinstance(x, Fraction) else Fraction(x)


def _to_mpf(fr):
    return mpf(fr.numerator) / fr.denominator


# ---------------------------------------------------------------------------
# grid function and configuration


@dataclass
class GridFunction:
    """Labels on the grid {1/D, ..., 1}^{d x L}.

    Cells are tuples of L columns, each a tuple of d integers in 1..D (token
    value = index / D). ``labels`` maps a cell to one value per column.
    """

    D: int
    d: int
    L: int
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.D < 1 or self.d < 1 or self.L < 1:
            raise ConfigError("D, d and L must be positive")
        for cell, lab in self.labels.items():
            if not np.all(np.isfinite(lab)):
                raise ConfigError(f"non-finite label at cell {cell}")

    def cells(self):
        cols = list(itertools.product(range(1, self.D + 1), repeat=self.d))
        return list(itertools.product(cols, repeat=self.L))

    @staticmethod
    def duplicate(cell):
        return len(set(cell)) < len(cell)

    def center(self, cell):
        """Cell centre G - 1/(2D) as a (d, L) array."""
        G = np.array(cell, dtype=float).T / self.D
        return G - 0.5 / self.D

    @classmethod
    def from_target(cls, target, D, d, L):
        """Label every duplicate-free cell by the target at its centre; cells
        with a repeated token are labelled 0."""
        gf = cls(D, d, L)
        for cell in gf.cells():
            if cls.duplicate(cell):
                lab = np.zeros(L)
            else:
                lab = np.broadcast_to(np.asarray(target(gf.center(cell)), dtype=float), (L,)).copy()
            gf.labels[cell] = lab
        gf.__post_init__()
        return gf


@dataclass(frozen=True)
class ContextConfig:
    rho: int | None
    delta: float
    gamma_min: float
    gamma_max: float
    eps_sep: float

    def __post_init__(self):
        if not 0 < self.gamma_min < self.gamma_max:
            raise ConfigError("need 0 < gamma_min < gamma_max")
        if not self.eps_sep > 0:
            raise ConfigError("eps_sep must be positive")
        if self.rho is not None and self.rho < 1:
            raise ConfigError("rank must be at least 1")

    @classmethod
    def for_grid(cls, D, d, L, rho=None):
        """Constants for the quantized grid: (1/D, sqrt(d), 1/D)."""
        return cls(rho, 4 * math.log(L), 1.0 / D, math.sqrt(d), 1.0 / D)

    @classmethod
    def for_vocab(cls, vocab, L, rho=None):
        V = np.atleast_2d(np.asarray(vocab, dtype=float))
        norms = np.linalg.norm(V, axis=1)
        gaps = [np.linalg.norm(a - b) for a, b in itertools.combinations(V, 2)]
        lo, hi = float(norms.min()), float(norms.max())
        if lo == hi:  # equal norms: keep the strict ordering with a hair of slack
            lo *= 1 - 1e-9
        return cls(rho, 4 * math.log(L), lo, hi,
                   float(min(gaps)) if gaps else 1.0)


# ---------------------------------------------------------------------------
# quantizer


@dataclass(frozen=True)
class QuantizerFFN:
    """Stacked-ReLU first layer. Each hidden unit is relu(a x + b) with output
    weight w; ``quant_*`` units act entrywise, ``pen_*`` units produce the
    penalty whose sum over every entry is added to every output entry."""

    D: int
    delta_q: Fraction
    quant_a: tuple
    quant_b: tuple
    quant_w: tuple
    pen_a: tuple
    pen_b: tuple
    pen_w: tuple

    @staticmethod
    def _units(a, b, w, x):
        return sum(wi * _relu(ai * x + bi) for ai, bi, wi in zip(a, b, w))

    def quantize(self, x):
        return self._units(self.quant_a, self.quant_b, self.quant_w, _frac(x))

    def penalty(self, x):
        return self._units(self.pen_a, self.pen_b, self.pen_w, _frac(x))

    def forward(self, X):
        """Exact rational output for a (d, L) input."""
        X = np.asarray(X, dtype=float)
        flat = [_frac(float(v)) for v in X.ravel()]
        pen = sum(self.penalty(v) for v in flat)
        out = np.empty(X.shape, dtype=object)
        for idx, v in zip(np.ndindex(X.shape), flat):
            out[idx] = self.quantize(v) + pen
        return out


def build_quantizer(D, delta_q=None) -> QuantizerFFN:
    """quant_D maps [k/D, (k+1)/D) to (k+1)/D on [0, 1] and negatives to 0;
    the penalty contributes -1 per entry below 0 or above 1. Both are exact
    at distance > delta_q from the breakpoints."""
    if D < 1:
        raise ConfigError("granularity D must be at least 1")
    dq = Fraction(1, 10 * D) if delta_q is None else _frac(delta_q)
    if not 0 < dq < Fraction(1, D):
        raise ConfigError(f"delta_q must lie in (0, 1/D); got {float(dq)} with D={D}")
    inv = 1 / dq
    qa, qb, qw = [], [], []
    for t in range(D):
        off = Fraction(t, D) * inv
        qa += [inv, inv]
        qb += [-off, -off - 1]
        qw += [Fraction(1, D), -Fraction(1, D)]
    # -[relu((x-1)/dq) - relu((x-1)/dq - 1)] - [relu(-x/dq) - relu(-x/dq - 1)]
    pa = (inv, inv, -inv, -inv)
    pb = (-inv, -inv - 1, Fraction(0), Fraction(-1))
    pw = (Fraction(-1), Fraction(1), Fraction(-1), Fraction(1))
    return QuantizerFFN(D, dq, tuple(qa), tuple(qb), tuple(qw), pa, pb, pw)


# ---------------------------------------------------------------------------
# contextual-mapping attention


def working_precision(p1p1, gamma_max, margin=60):
    """Decimal digits needed to resolve exp(-p1'p1' gamma_max^2) and the bump
    scale that separates such gaps."""
    return int(math.ceil(1.2 * p1p1 * gamma_max**2 / math.log(10))) + margin


def _separating_direction(vocab, rng, tries=4000):
    """Unit vector u in the positive orthant with |u'(a - b)| bounded below
    over vocab + {0}; returns the best of random candidates."""
    n, d = vocab.shape
    if d == 1:
        return np.ones(1)
    pts = np.vstack([vocab, np.zeros(d)])
    diffs = np.array([a - b for a, b in itertools.combinations(pts, 2)])
    dn = np.linalg.norm(diffs, axis=1)
    need = math.sqrt(8 / (math.pi * d)) / (n + 1) ** 2
    best, best_r = None, -1.0
    for _ in range(tries):
        u = np.abs(rng.standard_normal(d))
        u /= np.linalg.norm(u)
        r = float(np.min(np.abs(diffs @ u) / dn))
        if r > best_r:
            best, best_r = u, r
        if best_r >= 4 * need:
            break
    if best_r < need:
        raise SeparationError("no separating direction found for the vocabulary")
    return best


def _mp_basis(u):
    """Orthonormal basis of R^d (as mp column lists) whose first vector is u."""
    d = len(u)
    vecs = [[mpf(float(x)) for x in u]] + [[mpf(int(i == j)) for j in range(d)] for i in range(d)]
    out = []
    for v in vecs:
        w = list(v)
        for q in out:
            c = mpmath.fsum(a * b for a, b in zip(w, q))
            w = [a - c * b for a, b in zip(w, q)]
        nrm = mpmath.sqrt(mpmath.fsum(a * a for a in w))
        if nrm > mpf(10) ** (-mp.dps // 2):
            out.append([a / nrm for a in w])
        if len(out) == d:
            break
    return out


def _outer_sum(pairs, rows, cols):
    M = mpmath.zeros(rows, cols)
    for p, q in pairs:
        for i in range(rows):
            if p[i]:
                for j in range(cols):
                    M[i, j] += p[i] * q[j]
    return M


def _unit(s, i, scale=1):
    return [mpf(scale) if k == i else mpf(0) for k in range(s)]


@dataclass
class ContextAttention:
    """Single-head attention out_k = z_k + W_O W_V Z softmax((W_K Z)'(W_Q z_k))
    with the contextual-mapping construction. Weights are mp matrices valid
    at ``dps`` digits."""

    W_Q: mpmath.matrix
    W_K: mpmath.matrix
    W_V: mpmath.matrix
    W_O: mpmath.matrix
    u: list
    p_V: list          # the p'' vectors
    p1p1: mpf           # p_1' p_1'
    cfg: ContextConfig
    rho: int
    vocab_size: int
    d: int
    s: int
    dps: int

    def forward(self, Z):
        """Z: list of L columns (length-d sequences, any real type). Returns
        the output columns as lists of mpf."""
        with mp.workdps(self.dps):
            cols = [mpmath.matrix([mpf(v) if not isinstance(v, Fraction) else _to_mpf(v) for v in c])
                    for c in Z]
            keys = [self.W_K * c for c in cols]
            vals = [self.W_O * (self.W_V * c) for c in cols]
            out = []
            for z in cols:
                q = self.W_Q * z
                a = [mpmath.fsum(k[i] * q[i] for i in range(self.s)) for k in keys]
                amax = max(a)
                w = [mpmath.exp(ai - amax) for ai in a]
                tot = mpmath.fsum(w)
                o = [z[i] + mpmath.fsum(w[k] * vals[k][i] for k in range(len(cols))) / tot
                     for i in range(self.d)]
                out.append(o)
            return out

    def log_delta_prime(self, L):
        """log of the guaranteed separation scale
        ln^2(L) e^{-2 gamma} eps^2 gamma_min / (4 (|V|+1)^4 d delta gamma_max^2),
        with gamma = p_1'p_1' gamma_max^2 bounding every attention score."""
        c = self.cfg
        gamma = float(self.p1p1) * c.gamma_max**2
        return (2 * math.log(math.log(L)) - 2 * gamma + math.log(c.eps_sep**2 * c.gamma_min)
                - math.log(4 * (self.vocab_size + 1) ** 4 * self.d * c.delta * c.gamma_max**2))

    def norm_accounting(self):
        with mp.workdps(self.dps):
            prod = [mpmath.norm(self.W_O * mpmath.matrix(p)) for p in self.p_V]
            WV = np.array(self.W_V.tolist(), dtype=float)
        return {
            "W_O_p": [float(v) for v in prod],
            "target": self.cfg.eps_sep / (4 * self.rho * self.cfg.gamma_max),
            "W_V_spectral": float(np.linalg.norm(WV, 2)),
            "sqrt_rho": math.sqrt(self.rho),
        }


def check_separated(vocab, cfg: ContextConfig):
    """Tokenwise (gamma_min, gamma_max, eps) separation, read non-strictly."""
    V = np.atleast_2d(np.asarray(vocab, dtype=float))
    norms = np.linalg.norm(V, axis=1)
    if np.any(norms < cfg.gamma_min * (1 - _REL)):
        raise SeparationError(f"token norm {norms.min():.6g} below gamma_min {cfg.gamma_min:.6g}")
    if np.any(norms > cfg.gamma_max * (1 + _REL)):
        raise SeparationError(f"token norm {norms.max():.6g} above gamma_max {cfg.gamma_max:.6g}")
    for a, b in itertools.combinations(range(len(V)), 2):
        g = np.linalg.norm(V[a] - V[b])
        if g < cfg.eps_sep * (1 - _REL):
            raise SeparationError(f"tokens {a} and {b} are {g:.6g} apart, below eps {cfg.eps_sep:.6g}")


MAX_DPS = 200_000  # beyond this a single exp takes seconds


def build_context_attention(vocab, cfg: ContextConfig, seed=0, max_dps=MAX_DPS) -> ContextAttention:
    """W_K = c e_1 u' + sum_{i>=2} e_i q_i', W_Q = e_1 u' + sum_{i>=2} e_{rho+i-1} q_i'
    so that W_K' W_Q = c u u' with c = 5 (|V|+1)^4 d delta / (eps gamma_min);
    W_V = sum_i e_i q_i' and W_O = sum_i q_i eps/(4 rho gamma_max) e_i'.
    The inner dimension is s = 2 d, and rho defaults to d."""
    V = np.atleast_2d(np.asarray(vocab, dtype=float))
    if len(np.unique(V, axis=0)) != len(V):
        raise ConfigError("vocabulary contains repeated tokens")
    check_separated(V, cfg)
    nV, d = V.shape
    s = 2 * d
    rho = min(d, s) if cfg.rho is None else cfg.rho
    if rho > d:
        raise ConfigError(f"rank {rho} exceeds min(d, s) = {d}")
    c = 5 * (nV + 1) ** 4 * d * cfg.delta / (cfg.eps_sep * cfg.gamma_min)
    if not c > 0:
        raise ConfigError("sequence length must be at least 2")
    dps = working_precision(c, cfg.gamma_max)
    if dps > max_dps:
        raise ConfigError(f"construction needs {dps} digits of precision (limit {max_dps}); "
                          "reduce the vocabulary or sequence length")
    u = _separating_direction(V, np.random.default_rng(seed))
    with mp.workdps(dps):
        Q = _mp_basis(u)
        cm = mpf(c)
        W_K = _outer_sum([(_unit(s, 0, cm), Q[0])] + [(_unit(s, i), Q[i]) for i in range(1, rho)], s, d)
        W_Q = _outer_sum([(_unit(s, 0), Q[0])] + [(_unit(s, rho + i - 1), Q[i]) for i in range(1, rho)], s, d)
        p_V = [_unit(s, i) for i in range(rho)]
        W_V = _outer_sum([(p_V[i], Q[i]) for i in range(rho)], s, d)
        scale = mpf(cfg.eps_sep) / (4 * rho * mpf(cfg.gamma_max))
        # |p'''_i| = eps / (4 rho gamma_max |p''_i|^2) with |p''_i| = 1
        W_O = _outer_sum([([scale * v for v in Q[i]], p_V[i]) for i in range(rho)], d, s)
    return ContextAttention(W_Q, W_K, W_V, W_O, Q[0], p_V, cm, cfg, rho, nV, d, s, dps)


# ---------------------------------------------------------------------------
# memorizer


def trapezoid_bump(s):
    """relu(s+2) - relu(s+1) - relu(s-1) + relu(s-2): 1 on |s| <= 1, 0 on |s| >= 2."""
    return _relu(s + 2) - _relu(s + 1) - _relu(s - 1) + _relu(s - 2)


@dataclass
class Memorizer:
    """Second layer: column k maps to sum_j value_j bump(R (u' o_k - key_j))."""

    keys: list
    values: list
    R: mpf
    u: list
    floor: mpf
    dps: int

    def forward(self, O):
        with mp.workdps(self.dps):
            res = []
            for o in O:
                proj = mpmath.fsum(a * mpf(b) for a, b in zip(self.u, o))
                res.append(float(mpmath.fsum(v * trapezoid_bump(self.R * (proj - k))
                                             for k, v in zip(self.keys, self.values) if v)))
            return np.array(res)


def build_memorizer(gf: GridFunction, R=None, ids=None, u=None, dps=None) -> Memorizer:
    """One bump per distinct context ID.

    ``ids`` maps each cell to its L attention output columns; without it the
    quantized grid tokens themselves serve as IDs. ``R`` defaults to
    4 / (smallest ID gap); an explicit R must satisfy R * gap > 2 and must
    push the floor region (entries below 1/(4D)) outside every bump.
    """
    if u is None:
        u = np.ones(gf.d) / math.sqrt(gf.d)
    if dps is None:
        dps = mp.dps
    with mp.workdps(dps):
        um = [mpf(float(x)) for x in u] if not isinstance(u[0], mpf) else list(u)
        table = {}
        for cell in gf.cells():
            lab = gf.labels.get(cell, np.zeros(gf.L))
            cols = ids[cell] if ids is not None else [[mpf(i) / gf.D for i in col] for col in cell]
            for k, col in enumerate(cols):
                key = mpmath.fsum(a * mpf(b) for a, b in zip(um, col))
                table.setdefault(_keyhash(key, dps), []).append((key, float(lab[k]), cell))
        keys, values = [], []
        for entries in table.values():
            labs = {v for _, v, _ in entries}
            if len(labs) > 1:
                raise ConfigError(f"cells {[e[2] for e in entries][:2]} share a context ID but not a label")
            keys.append(entries[0][0])
            values.append(entries[0][1])
        order = sorted(range(len(keys)), key=lambda i: keys[i])
        keys = [keys[i] for i in order]
        values = [values[i] for i in order]
        gaps = [keys[i + 1] - keys[i] for i in range(len(keys) - 1)]
        gap = min(gaps) if gaps else mpf(1)
        floor = mpf(1) / (4 * gf.D) * mpmath.fsum(um)
        floor_gap = keys[0] - floor if keys else mpf(1)
        if R is None:
            R = 4 / min(gap, floor_gap)
        R = mpf(R)
        if not R * gap > 2:
            raise ResolutionError(f"bump scale too small: R * gap = {mpmath.nstr(R * gap, 5)} <= 2")
        if not R * floor_gap >= 2:
            raise ResolutionError("bump scale does not separate the floor region")
        return Memorizer(keys, values, R, um, floor, dps)


def _keyhash(key, dps):
    """Bucket for IDs equal up to rounding (permuted copies of one context)."""
    return mpmath.nstr(key, max(dps - 30, 15), strip_zeros=False)


# ---------------------------------------------------------------------------
# assembly


@dataclass
class UATNetwork:
    quantizer: QuantizerFFN
    attention: ContextAttention
    memorizer: Memorizer
    grid: GridFunction
    ids: dict
    _cache: dict = field(default_factory=dict, repr=False)

    def context_ids(self, X):
        T = self.quantizer.forward(X)
        key = tuple(T.T.ravel())
        if key not in self._cache:
            self._cache[key] = self.attention.forward([list(col) for col in T.T])
        return self._cache[key]

    def __call__(self, X):
        return self.memorizer.forward(self.context_ids(X))


def assemble_uat(target, D, d, L, delta_q=None, R=None, rho=None) -> UATNetwork:
    """Quantizer, contextual attention over the grid vocabulary and a
    memorizer labelled by ``target`` at the cell centres."""
    if L < 2:
        raise ConfigError("sequence length must be at least 2")
    gf = GridFunction.from_target(target, D, d, L)
    quant = build_quantizer(D, delta_q)
    vocab = np.array(list(itertools.product(range(1, D + 1), repeat=d)), dtype=float) / D
    att = build_context_attention(vocab, ContextConfig.for_grid(D, d, L, rho))
    ids = {}
    for cell in gf.cells():
        ids[cell] = att.forward([[Fraction(i, D) for i in col] for col in cell])
    mem = build_memorizer(gf, R, ids, att.u, att.dps)
    net = UATNetwork(quant, att, mem, gf, ids)
    for cell in gf.cells():
        net._cache[tuple(Fraction(i, D) for col in cell for i in col)] = ids[cell]
    return net


# ---------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class UATReport:
    max_center_error: float
    duplicate_max_abs: float
    n_cells: int
    n_duplicate_free: int
    log10_margin: float
    log10_delta_prime: float
    max_movement: float
    movement_slack_log10: float
    eps_quarter: float


def separation_margin(att: ContextAttention, sequences):
    """Smallest output distance between unequal (token, vocabulary) pairs over
    duplicate-free sequences, as an mpf (0 on a collision)."""
    outs = {}
    with mp.workdps(att.dps):
        for seq in sequences:
            cols = [tuple(c) for c in seq]
            if len(set(cols)) < len(cols):
                continue
            O = att.forward([list(c) for c in cols])
            vset = frozenset(cols)
            for c, o in zip(cols, O):
                outs.setdefault((c, vset), o)
        items = list(outs.values())
        best = None
        for a, b in itertools.combinations(items, 2):
            g = mpmath.sqrt(mpmath.fsum((x - y) ** 2 for x, y in zip(a, b)))
            best = g if best is None or g < best else best
        return best if best is not None else mpf("inf")


def max_movement(att: ContextAttention, sequences):
    """Largest column displacement |out_k - z_k| (mpf) over duplicate-free
    sequences. A repeated max-norm token attends only to itself and moves by
    exactly eps/4, so those are excluded."""
    worst = mpf(0)
    with mp.workdps(att.dps):
        for seq in sequences:
            if len({tuple(c) for c in seq}) < len(seq):
                continue
            O = att.forward([list(c) for c in seq])
            for c, o in zip(seq, O):
                z = [x if not isinstance(x, Fraction) else _to_mpf(x) for x in c]
                m = mpmath.sqrt(mpmath.fsum((mpf(x) - y) ** 2 for x, y in zip(z, o)))
                worst = max(worst, m)
    return worst


def uat_report(net: UATNetwork) -> UATReport:
    gf, att = net.grid, net.attention
    errs, dup = [], []
    for cell in gf.cells():
        out = net(gf.center(cell))
        if gf.duplicate(cell):
            dup.append(np.max(np.abs(out)))
        else:
            errs.append(np.max(np.abs(out - gf.labels[cell])))
    seqs = [[[Fraction(i, gf.D) for i in col] for col in cell] for cell in gf.cells()]
    with mp.workdps(att.dps):
        margin = separation_margin(att, seqs)
        mv = max_movement(att, seqs)
        quarter = mpf(att.cfg.eps_sep) / 4
        slack = quarter - mv
        log_margin = float(mpmath.log10(margin)) if margin > 0 else -math.inf
        log_slack = float(mpmath.log10(slack)) if slack > 0 else -math.inf
    return UATReport(
        max_center_error=float(max(errs)) if errs else 0.0,
        duplicate_max_abs=float(max(dup)) if dup else 0.0,
        n_cells=len(gf.cells()), n_duplicate_free=len(errs),
        log10_margin=log_margin,
        log10_delta_prime=att.log_delta_prime(gf.L) / math.log(10),
        max_movement=float(mv), movement_slack_log10=log_slack,
        eps_quarter=float(att.cfg.eps_sep) / 4)


def interpolation_error(net: UATNetwork, target, points, coarse_D=None):
    """sup |net(X) - target(X)| over points whose cell (at ``coarse_D``,
    default the network's D) has no repeated token."""
    D = coarse_D or net.grid.D
    worst = 0.0
    for X in points:
        X = np.asarray(X, dtype=float)
        idx = np.clip(np.floor(X * D).astype(int) + 1, 1, D)
        cols = [tuple(c) for c in idx.T]
        if len(set(cols)) < len(cols):
            continue
        f = np.broadcast_to(np.asarray(target(X), dtype=float), (X.shape[1],))
        worst = max(worst, float(np.max(np.abs(net(X) - f))))
    return worst


def grid_centers(D, d, L):
    gf = GridFunction(D, d, L)
    return [gf.center(c) for c in gf.cells()]
