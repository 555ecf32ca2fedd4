"""Diffused local polynomials and the score assemblies built from them.

The initial density (or, under the strong assumption, the tilt ``f``) is
replaced on a clipped box by piecewise Taylor polynomials:

* x_0 cells are the half-open cubes ((v-1)/N, v/N] in the normalised
  coordinate x0' = x0 / R_B + 1/2, with R_B = 2 C_x sqrt(log N). Each cell is
  expanded at its right corner v/N.
* the condition uses a trapezoid partition of unity phi(3N(y - w/N)) with
  w = 0..N.

Convolving each cell polynomial against a truncated Taylor series of the
Gaussian kernel gives closed-form approximations f1 of p_t and f2 of
sigma_t grad p_t. The per-cell integrands are polynomials, so Gauss-Legendre
with enough nodes integrates them exactly.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import os
from dataclasses import dataclass
from math import factorial, lgamma, log

import numpy as np

from . import targets as tg
from .schedule import alpha_sigma


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class HolderParams:
    beta: float
    k1: int
    k2: int
    B_est: float = float("nan")

    def __post_init__(self):
        if self.k1 != int(np.floor(self.beta)):
            raise ValueError("k1 must equal floor(beta)")
        if self.k2 < 1:
            raise ValueError("k2 must be >= 1")


@dataclass(frozen=True)
class GridSpec:
    N: int
    C_x: float
    d_x: int = 1
    d_y: int = 1

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("the clipped box needs N >= 2 (log N > 0)")
        if self.C_x <= 0:
            raise ValueError("C_x must be positive")

    @property
    def half_width(self):
        return self.C_x * np.sqrt(np.log(self.N))

    @property
    def bounds(self):
        return (-self.half_width, self.half_width)

    @property
    def R_B(self):
        return 2 * self.half_width

    def x_anchors(self):
        """Right corners of the x cells along one axis (original scale)."""
        v = np.arange(1, self.N + 1)
        return self.R_B * (v / self.N - 0.5)

    def y_anchors(self):
        return np.arange(self.N + 1) / self.N


@dataclass(frozen=True)
class StrongDecomp:
    C2: float
    hat_alpha: float
    hat_sigma: float
    t: float


@dataclass(frozen=True)
class ScoreAssemblyConfig:
    eps_low: float
    K_cap: float

    def __post_init__(self):
        if not (self.eps_low > 0 and self.K_cap > 0):
            raise ValueError("eps_low and K_cap must be positive")


@dataclass(eq=False)
class DiffusedPoly:
    """Coefficient table of a diffused local polynomial.

    ``coeffs[c, w, m]`` is R_B^{|n_x|} / (n_x! n_y!) times the partial
    derivative for x-cell ``c`` (row-major over [N]^{d_x}), y-anchor ``w``
    (row-major over {0..N}^{d_y}) and multi-index ``multi[m] = (n_x, n_y)``.
    ``kind`` is "density" for the generic pipeline and "tilt" for the strong
    pipeline (then ``C2`` is the envelope constant).
    """

    coeffs: np.ndarray
    multi: list
    grid: GridSpec
    holder: HolderParams
    kind: str = "density"
    C2: float = 1.0

    @property
    def n_monomials(self):
        return int(np.count_nonzero(np.ones_like(self.coeffs)))


# ---------------------------------------------------------------------------
# small pieces


def trapezoid(a):
    a = np.abs(np.asarray(a, dtype=float))
    return np.clip(2.0 - a, 0.0, 1.0)


def choose_k2(N, beta, C_x, tol=1e-2, cap=80):
    """Kernel Taylor order.

    Smallest k >= max(3, ceil(beta log N)) whose series remainder
    u^{k+1}/(k+1)! at the window edge u = C_x^2 log N / 2 is below
    tol * N^{-beta}.
    """
    u = 0.5 * C_x**2 * np.log(N)
    k = max(3, int(np.ceil(beta * np.log(N))))
    target = log(tol) - beta * log(N)
    while k < cap and (k + 1) * log(max(u, 1e-300)) - lgamma(k + 2) > target:
        k += 1
    return k


def multi_indices(d_x, d_y, k1):
    out = []
    for tot in range(k1 + 1):
        for idx in itertools.product(range(tot + 1), repeat=d_x + d_y):
            if sum(idx) == tot:
                out.append((idx[:d_x], idx[d_x:]))
    return out


def hat_coeffs(t, C2):
    if not (t > 0 and C2 > 0):
        raise ValueError("need t > 0 and C2 > 0")
    a, s = alpha_sigma(t)
    den = a * a + C2 * s * s
    return StrongDecomp(float(C2), float(a / den), float(s / np.sqrt(den)), float(t))


def _kernel_params(poly_kind, x, t, C2):
    """Per-point (a, c, s): the kernel is exp(-(a z - c)^2 / (2 s^2))."""
    t = np.asarray(t, dtype=float)
    al, si = alpha_sigma(t)
    if poly_kind == "density":
        a = np.broadcast_to(al, (len(x),))
        return a[:, None] * np.ones_like(x), x, np.broadcast_to(si, (len(x),))[:, None] * np.ones_like(x)
    den = al * al + C2 * si * si
    ah, sh = al / den, si / np.sqrt(den)
    ah = np.broadcast_to(ah, (len(x),))[:, None]
    sh = np.broadcast_to(sh, (len(x),))[:, None]
    return np.ones_like(x), ah * x, sh * np.ones_like(x)


def _window(a, c, s, grid):
    W = grid.C_x * np.sqrt(np.log(grid.N))
    lo = np.maximum((c - s * W) / a, -grid.half_width)
    hi = np.minimum((c + s * W) / a, grid.half_width)
    return lo, hi


def clip_domain(x, grid: GridSpec, t):
    """Coordinate-wise box [(x - sigma W)/alpha, (x + sigma W)/alpha] cut to
    the global box; W = C_x sqrt(log N). Empty coordinates have lo > hi."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    a, c, s = _kernel_params("density", x[None], t, 1.0)
    lo, hi = _window(a, c, s, grid)
    return lo[0], hi[0]


def _truncated_exp(u, k):
    # sum_{j<=k} (-u)^j / j!  by Horner
    acc = np.ones_like(u)
    for j in range(k, 0, -1):
        acc = 1.0 - acc * u / j
    return acc


def _cell_moments(a, c, s, grid, k1, k2, with_factor):
    """Per coordinate, per cell, per order m <= k1:

        1/(s sqrt(2 pi)) * int_{cell cap window} ((z - z_v)/R_B)^m T_k2(u) [(a z - c)/s] dz

    with u = (a z - c)^2 / (2 s^2). Shapes: inputs (P,), output (P, N, k1+1).
    """
    N = grid.N
    edges = grid.R_B * (np.arange(N + 1) / N - 0.5)
    anchors = edges[1:]
    wlo, whi = _window(a, c, s, grid)
    lo = np.maximum(edges[None, :-1], wlo[:, None])
    hi = np.minimum(edges[None, 1:], whi[:, None])
    length = np.clip(hi - lo, 0.0, None)
    deg = k1 + 2 * k2 + (1 if with_factor else 0)
    q = deg // 2 + 2
    xi, wq = np.polynomial.legendre.leggauss(q)
    mid = 0.5 * (hi + lo)
    z = mid[..., None] + 0.5 * length[..., None] * xi  # (P, N, Q)
    r = (a[:, None, None] * z - c[:, None, None]) / s[:, None, None]
    kern = _truncated_exp(0.5 * r * r, k2)
    if with_factor:
        kern = kern * r
    base = kern * wq * (0.5 * length[..., None]) / (s[:, None, None] * np.sqrt(2 * np.pi))
    rel = (z - anchors[None, :, None]) / grid.R_B
    out = np.empty(z.shape[:2] + (k1 + 1,))
    powm = np.ones_like(rel)
    for m in range(k1 + 1):
        out[..., m] = np.sum(base * powm, axis=-1)
        powm = powm * rel
    return out


def _y_weights(y, grid, multi):
    """(P, W, M): trapezoid weight of anchor w times (y - w/N)^{n_y}."""
    N = grid.N
    anchors = grid.y_anchors()
    W_idx = list(itertools.product(range(N + 1), repeat=grid.d_y))
    P = len(y)
    phi = np.ones((P, len(W_idx)))
    diff = np.empty((P, len(W_idx), grid.d_y))
    for wi, w in enumerate(W_idx):
        for j, wj in enumerate(w):
            phi[:, wi] *= trapezoid(3 * N * (y[:, j] - anchors[wj]))
            diff[:, wi, j] = y[:, j] - anchors[wj]
    out = np.empty((P, len(W_idx), len(multi)))
    for mi, (_, ny) in enumerate(multi):
        term = phi.copy()
        for j, e in enumerate(ny):
            if e:
                term = term * diff[..., j] ** e
        out[..., mi] = term
    return out


def partition_weights(x0, y, grid: GridSpec):
    """psi_{v,w}(x0, y) for every (cell, y-anchor) pair, shape (P, N^d_x, (N+1)^d_y)."""
    x0 = np.atleast_2d(x0)
    y = np.atleast_2d(y)
    xp = x0 / grid.R_B + 0.5
    cell = np.clip(np.ceil(xp * grid.N).astype(int), 1, grid.N) - 1  # half-open, lower cell at edges
    inside = np.all((xp > 0) & (xp <= 1), axis=1)
    flat = np.ravel_multi_index(tuple(cell.T), (grid.N,) * grid.d_x)
    ind = np.zeros((len(x0), grid.N ** grid.d_x))
    ind[np.arange(len(x0)), flat] = inside
    yw = _y_weights(y, grid, [((0,) * grid.d_x, (0,) * grid.d_y)])[..., 0]
    return ind[:, :, None] * yw[:, None, :]


# ---------------------------------------------------------------------------
# coefficient tables


def taylor_table(family, grid: GridSpec, holder: HolderParams, kind="density", fd=None):
    """Scaled Taylor coefficients of p_0 (``kind="density"``) or of the
    normalised tilt f (``kind="tilt"``, strong families) at every grid anchor.

    Mixtures use analytic Hermite derivatives unless ``fd`` is True; other
    families use central differences with step 1e-3 times the cell width.
    """
    multi = multi_indices(grid.d_x, grid.d_y, holder.k1)
    xa = grid.x_anchors()
    ya = grid.y_anchors()
    X = np.array(list(itertools.product(xa, repeat=grid.d_x))).reshape(-1, grid.d_x)
    Y = np.array(list(itertools.product(ya, repeat=grid.d_y))).reshape(-1, grid.d_y)
    Xg = np.repeat(X, len(Y), axis=0)
    Yg = np.tile(Y, (len(X), 1))
    analytic = isinstance(family, tg.GaussianMixtureFamily) and kind == "density" and not fd
    if kind == "tilt" and not isinstance(family, tg.StrongHolderFamily):
        raise ValueError("tilt tables need a StrongHolderFamily")
    if not analytic and fd is False:
        raise ValueError("analytic derivatives unavailable for this family; enable finite differences")
    step = 1e-3 * grid.R_B / grid.N
    ystep = 1e-3 / grid.N
    coeffs = np.empty((len(X), len(Y), len(multi)))
    for mi, (nx, ny) in enumerate(multi):
        if analytic:
            d = family.density0_derivative(Xg, Yg, nx, ny)
        else:
            fn = family.f_tilde if kind == "tilt" else _density0_fn(family)
            d = _fd_mixed(fn, Xg, Yg, nx, ny, step, ystep)
        scale = grid.R_B ** sum(nx) / (np.prod([factorial(e) for e in nx]) * np.prod([factorial(e) for e in ny]))
        coeffs[:, :, mi] = (scale * d).reshape(len(X), len(Y))
    C2 = family.C2 if kind == "tilt" else 1.0
    return DiffusedPoly(coeffs, multi, grid, holder, kind, C2)


def _density0_fn(family):
    if isinstance(family, tg.StrongHolderFamily):
        return family.density0
    if isinstance(family, tg.GaussianMixtureFamily):
        return lambda x, y: np.exp(family.log_density(x, y, np.zeros(len(x))))
    raise ValueError(f"{type(family).__name__} has no density at t = 0")


def _fd_mixed(fn, X, Y, nx, ny, hx, hy):
    orders = list(nx) + list(ny)
    steps = [hx] * len(nx) + [hy] * len(ny)
    dx = X.shape[1]
    stencils = []
    from math import comb
    for m, h in zip(orders, steps):
        j = np.arange(m + 1)
        stencils.append([((m / 2 - jj) * h, (-1) ** jj * comb(m, jj) / h**m) for jj in j])
    out = np.zeros(len(X))
    for combo in itertools.product(*stencils):
        shift = np.array([c[0] for c in combo])
        w = float(np.prod([c[1] for c in combo]))
        out += w * fn(X + shift[:dx], Y + shift[dx:])
    return out


def min_grid_value(poly: DiffusedPoly):
    zero = [i for i, (nx, ny) in enumerate(poly.multi) if sum(nx) + sum(ny) == 0][0]
    return float(poly.coeffs[:, :, zero].min())


# ---------------------------------------------------------------------------
# evaluation


def _prep(poly, x, y, t):
    x = tg._batch(x, poly.grid.d_x)
    return x, tg._cond(y, len(x), poly.grid.d_y), t


def _evaluate(poly: DiffusedPoly, x, y, t, want_f2):
    g = poly.grid
    k1, k2 = poly.holder.k1, poly.holder.k2
    a, c, s = _kernel_params(poly.kind, x, t, poly.C2)
    P = len(x)
    G = [_cell_moments(a[:, i], c[:, i], s[:, i], g, k1, k2, False) for i in range(g.d_x)]
    Yw = _y_weights(y, g, poly.multi)
    # contracted coefficients per cell: (P, cells, M)
    cw = np.einsum("cwm,pwm->pcm", poly.coeffs, Yw)
    cells = list(itertools.product(range(g.N), repeat=g.d_x))

    def combine(mats):
        prod = np.ones((P, len(cells), len(poly.multi)))
        cell_arr = np.array(cells).reshape(len(cells), g.d_x)
        for mi, (nx, _) in enumerate(poly.multi):
            for i in range(g.d_x):
                prod[:, :, mi] *= mats[i][:, cell_arr[:, i], nx[i]]
        return np.sum(prod * cw, axis=(1, 2))

    f1 = combine(G)
    if not want_f2:
        return f1, None
    f2 = np.empty((P, g.d_x))
    for i in range(g.d_x):
        Gi = _cell_moments(a[:, i], c[:, i], s[:, i], g, k1, k2, True)
        mats = list(G)
        mats[i] = Gi
        f2[:, i] = combine(mats)
    return f1, f2


def f1_eval(poly: DiffusedPoly, x, y, t):
    x, y, t = _prep(poly, x, y, t)
    return _evaluate(poly, x, y, t, False)[0]


def f2_eval(poly: DiffusedPoly, x, y, t):
    x, y, t = _prep(poly, x, y, t)
    return _evaluate(poly, x, y, t, True)[1]


def f1_f2_eval(poly, x, y, t):
    x, y, t = _prep(poly, x, y, t)
    return _evaluate(poly, x, y, t, True)


# ---------------------------------------------------------------------------
# score assembly


def assembly_config(poly: DiffusedPoly, t, K=1.0, C3=None):
    g, hp = poly.grid, poly.holder
    if C3 is None:
        C3 = 0.5 * max(min_grid_value(poly), 1e-300)
    logN = np.log(g.N)
    eps_low = C3 * g.N ** (-hp.beta) * logN ** ((g.d_x + hp.k1) / 2)
    _, s = alpha_sigma(t)
    K_cap = K * (g.C_x * np.sqrt(g.d_x * logN) + 1) / s**2
    return ScoreAssemblyConfig(float(eps_low), float(K_cap))


def assemble_generic(f1, f2, t, cfg: ScoreAssemblyConfig):
    """f2 / (sigma_t max(f1, eps_low)), capped entrywise at +-K_cap."""
    _, s = alpha_sigma(t)
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    den = s * np.maximum(f1, cfg.eps_low)
    out = f2 / (den[..., None] if f2.ndim > f1.ndim else den)
    return np.clip(out, -cfg.K_cap, cfg.K_cap)


def assemble_strong(x, f1_h, f2_h, decomp: StrongDecomp):
    """-C2 x / (alpha^2 + C2 sigma^2) + (alpha_hat / sigma_hat) f2 / f1."""
    f1_h = np.asarray(f1_h, dtype=float)
    if np.any(f1_h <= 0):
        raise ValueError("f1 approximation of h is not positive; family lower bound violated or N too small")
    a, s = alpha_sigma(decomp.t)
    x = np.asarray(x, dtype=float)
    f2_h = np.asarray(f2_h, dtype=float)
    ratio = f2_h / (f1_h[..., None] if f2_h.ndim > f1_h.ndim else f1_h)
    return -decomp.C2 * x / (a * a + decomp.C2 * s * s) + decomp.hat_alpha / decomp.hat_sigma * ratio


def generic_score(poly: DiffusedPoly, x, y, t, cfg: ScoreAssemblyConfig | None = None):
    """Full generic pipeline. Points whose clipped box is empty get
    +-K_cap sign(f2), with f2 taken at the nearest point whose box is not empty."""
    x, y, t = _prep(poly, x, y, t)
    cfg = cfg or assembly_config(poly, t)
    f1, f2 = _evaluate(poly, x, y, t, True)
    out = assemble_generic(f1, f2, t, cfg)
    al, si = alpha_sigma(t)
    W = poly.grid.C_x * np.sqrt(np.log(poly.grid.N))
    reach = al * poly.grid.half_width + si * W
    empty = np.any(np.abs(x) >= reach, axis=1)
    if np.any(empty):
        xc = np.clip(x[empty], -reach + 0.5 * si * W, reach - 0.5 * si * W)
        _, f2c = _evaluate(poly, xc, y[empty], t, True)
        out[empty] = cfg.K_cap * np.sign(f2c)
    return out


def strong_score(poly: DiffusedPoly, x, y, t):
    if poly.kind != "tilt":
        raise ValueError("strong assembly needs a tilt table")
    x, y, t = _prep(poly, x, y, t)
    f1, f2 = _evaluate(poly, x, y, t, True)
    return assemble_strong(x, f1, f2, hat_coeffs(t, poly.C2))


def weighted_score_mse(score_fn, family, t, x_grid, y_values):
    """Trapezoid estimate of  mean_y  int |s_hat - score|^2 p_t(x|y) dx  in 1-D.

    ``score_fn(x, y, t)`` takes x of shape (P, 1)."""
    x = np.asarray(x_grid, dtype=float).reshape(-1, 1)
    total = 0.0
    for yv in np.atleast_1d(y_values):
        yy = np.full((len(x), family.d_y), yv)
        p = tg.oracle_density(family, x, yy, t)
        err = np.sum((score_fn(x, yy, t) - tg.oracle_score(family, x, yy, t)) ** 2, axis=1)
        total += np.trapezoid(err * p, x[:, 0])
    return total / len(np.atleast_1d(y_values))


# ---------------------------------------------------------------------------
# binary cache


def cache_key(fam_hash, N, k1, k2, window):
    blob = json.dumps([fam_hash, int(N), int(k1), int(k2), [float(w) for w in window]])
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def save_poly(poly: DiffusedPoly, path):
    g, h = poly.grid, poly.holder
    meta = json.dumps({"N": g.N, "C_x": g.C_x, "d_x": g.d_x, "d_y": g.d_y, "beta": h.beta, "k1": h.k1,
                       "k2": h.k2, "B_est": h.B_est, "kind": poly.kind, "C2": poly.C2,
                       "multi": [[list(a), list(b)] for a, b in poly.multi]})
    with open(path, "wb") as fh:
        np.savez(fh, coeffs=poly.coeffs, meta=np.frombuffer(meta.encode(), dtype=np.uint8))


def load_poly(path) -> DiffusedPoly:
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        coeffs = z["coeffs"]
    grid = GridSpec(meta["N"], meta["C_x"], meta["d_x"], meta["d_y"])
    holder = HolderParams(meta["beta"], meta["k1"], meta["k2"], meta["B_est"])
    multi = [(tuple(a), tuple(b)) for a, b in meta["multi"]]
    return DiffusedPoly(coeffs, multi, grid, holder, meta["kind"], meta["C2"])


def cached_taylor_table(family, grid, holder, cache_dir, window=(0.0, 0.0), kind="density"):
    os.makedirs(cache_dir, exist_ok=True)
    key = cache_key(tg.family_hash(family) + kind + f"{grid.C_x:.17g}", grid.N, holder.k1, holder.k2, window)
    path = os.path.join(cache_dir, f"poly_{key}.npz")
    if os.path.exists(path):
        return load_poly(path)
    poly = taylor_table(family, grid, holder, kind)
    save_poly(poly, path)
    return poly
