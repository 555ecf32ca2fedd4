"""Synthetic conditional data families with exact scores.

Three families are provided:

* :class:`GaussianMixtureFamily` -- isotropic Gaussian components whose means
  depend affinely on the condition ``y``.
* :class:`StrongHolderFamily` -- density ``exp(-C2 |x|^2 / 2) * f(x, y)`` with
  ``f`` bounded away from zero (d_x <= 2; the time-t quantities use
  Gauss-Hermite quadrature).
* :class:`LatentFamily` -- a mixture on R^{d_0} pushed into R^{d_x} by a
  column-orthonormal ``U``.

:class:`ProductFamily` stacks independent copies of a 1-D mixture, which is how
dimension sweeps keep the per-coordinate difficulty fixed.

Conventions: ``x`` has shape (n, d_x), ``y`` has shape (n, d_y) and ``t`` is a
scalar or an (n,) array. Single points are promoted to a batch of one and
results are returned for the batch.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from math import comb
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import eval_hermitenorm, logsumexp

from .schedule import alpha_sigma

LOG2PI = np.log(2 * np.pi)


def _batch(x, d):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    if x.ndim == 1:
        x = x[:, None] if d == 1 else x[None, :]
    if x.shape[-1] != d:
        raise ValueError(f"expected trailing dimension {d}, got shape {x.shape}")
    return x


def _cond(y, n, d_y):
    if d_y == 0:
        return np.zeros((n, 0))
    if y is None:
        raise ValueError("this family needs a condition y")
    y = np.asarray(y, dtype=float)
    if y.ndim == 0:
        y = y.reshape(1, 1)
    if y.ndim == 1:
        y = y[:, None] if (d_y == 1 and len(y) == n) else y[None, :]
    if y.shape[-1] != d_y:
        raise ValueError(f"condition must have dimension {d_y}, got {y.shape}")
    return np.broadcast_to(y, (n, d_y))


def _times(t, n):
    t = np.asarray(t, dtype=float)
    return np.broadcast_to(t, (n,)) if t.ndim == 0 else t


def _check_positive_time(t):
    if np.any(np.asarray(t) <= 0):
        raise ValueError("score is singular at t = 0")


# ---------------------------------------------------------------------------
# Gaussian mixtures


@dataclass(frozen=True, eq=False)
class GaussianMixtureFamily:
    """Mixture with components N(a_k + B_k y, s_k^2 I).

    Parameters
    ----------
    weights : (K,) mixture weights summing to one.
    offsets : (K, d_x) intercepts a_k.
    slopes : (K, d_x, d_y) matrices B_k.
    variances : (K,) isotropic variances s_k^2.
    """

    weights: np.ndarray
    offsets: np.ndarray
    slopes: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        a = np.asarray(self.offsets, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        K, d_x = a.shape
        B = np.asarray(self.slopes, dtype=float)
        if B.size == 0:
            B = np.zeros((K, d_x, B.shape[-1] if B.ndim == 3 else 0))
        B = B.reshape(K, d_x, -1)
        v = np.atleast_1d(np.asarray(self.variances, dtype=float))
        if w.shape != (K,) or v.shape != (K,):
            raise ValueError("weights/variances must have one entry per component")
        if abs(w.sum() - 1) > 1e-12 or np.any(w < 0):
            raise ValueError("weights must be a probability vector")
        if np.any(v <= 0):
            raise ValueError("variances must be positive")
        for name, val in (("weights", w), ("offsets", a), ("slopes", B), ("variances", v)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def d_x(self):
        return self.offsets.shape[1]

    @property
    def d_y(self):
        return self.slopes.shape[2]

    @property
    def K(self):
        return len(self.weights)

    def means(self, y):
        """Component means at each condition, shape (n, K, d_x)."""
        return self.offsets[None] + np.einsum("kij,nj->nki", self.slopes, y)

    # sampling -----------------------------------------------------------
    def sample(self, rng, n=1):
        y = rng.random((n, self.d_y))
        k = rng.choice(self.K, size=n, p=self.weights)
        mu = self.means(y)[np.arange(n), k]
        x0 = mu + np.sqrt(self.variances[k])[:, None] * rng.standard_normal((n, self.d_x))
        return x0, y

    # time-t quantities ---------------------------------------------------
    def _component_logs(self, x, y, t):
        a, s = alpha_sigma(t)
        mu = a[:, None, None] * self.means(y)
        var = a[:, None] ** 2 * self.variances[None] + s[:, None] ** 2
        diff = x[:, None, :] - mu
        logn = (-0.5 * np.sum(diff**2, axis=-1) / var
                - 0.5 * self.d_x * (LOG2PI + np.log(var)) + np.log(self.weights)[None])
        return logn, diff, var

    def log_density(self, x, y, t):
        logn, _, _ = self._component_logs(x, y, t)
        return logsumexp(logn, axis=1)

    def score(self, x, y, t):
        _check_positive_time(t)
        logn, diff, var = self._component_logs(x, y, t)
        r = np.exp(logn - logsumexp(logn, axis=1, keepdims=True))
        return -np.einsum("nk,nki->ni", r / var, diff)

    # tail / smoothness constants ----------------------------------------
    @cached_property
    def tail_constants(self):
        """(C1, C2) with p_0(x|y) <= C1 exp(-C2 |x|^2 / 2) for all y in [0,1]^d_y."""
        corners = np.array(list(itertools.product([0.0, 1.0], repeat=self.d_y))).reshape(-1, self.d_y)
        M = np.max(np.linalg.norm(self.means(corners), axis=-1))
        smin, smax = self.variances.min(), self.variances.max()
        C2 = 1.0 / (2 * smax)
        C1 = (2 * np.pi * smin) ** (-self.d_x / 2) * np.exp(M**2 / (2 * smin))
        return float(C1), float(C2)

    def density0_derivative(self, x0, y, nx, ny):
        """Mixed partial d^{nx}_x d^{ny}_y p_0(x0 | y) via Hermite polynomials.

        For a component, d/dy_j = -sum_i B_ij d/dx_i, so every y-derivative is
        rewritten as a polynomial in x-derivatives of the Gaussian.
        """
        x0 = _batch(x0, self.d_x)
        y = _cond(y, len(x0), self.d_y)
        nx, ny = tuple(int(v) for v in nx), tuple(int(v) for v in ny)
        mu = self.means(y)
        out = np.zeros(len(x0))
        for k in range(self.K):
            poly = {tuple([0] * self.d_x): 1.0}
            for j, order in enumerate(ny):
                for _ in range(order):
                    new = {}
                    for m, c in poly.items():
                        for i in range(self.d_x):
                            b = self.slopes[k, i, j]
                            if b == 0.0:
                                continue
                            mm = list(m)
                            mm[i] += 1
                            new[tuple(mm)] = new.get(tuple(mm), 0.0) - b * c
                    poly = new
            s = np.sqrt(self.variances[k])
            z = (x0 - mu[:, k]) / s
            base = np.exp(-0.5 * np.sum(z**2, axis=1)) / (2 * np.pi * self.variances[k]) ** (self.d_x / 2)
            acc = np.zeros(len(x0))
            for m, c in poly.items():
                term = np.full(len(x0), c)
                for i in range(self.d_x):
                    q = nx[i] + m[i]
                    if q:
                        term = term * (-1.0 / s) ** q * eval_hermitenorm(q, z[:, i])
                acc += term
            out += self.weights[k] * base * acc
        return out

    def to_dict(self):
        return {"kind": "mixture", "weights": self.weights.tolist(), "offsets": self.offsets.tolist(),
                "slopes": self.slopes.tolist(), "variances": self.variances.tolist()}


def standard_gaussian(d_x=1, d_y=1):
    return GaussianMixtureFamily([1.0], np.zeros((1, d_x)), np.zeros((1, d_x, d_y)), [1.0])


def single_gaussian(mean, variance=1.0, d_y=1):
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    return GaussianMixtureFamily([1.0], mean[None], np.zeros((1, len(mean), d_y)), [variance])


# ---------------------------------------------------------------------------
# Independent copies of a 1-D mixture


@dataclass(frozen=True, eq=False)
class ProductFamily:
    """``d_x`` independent coordinates, each drawn from the same 1-D ``base``
    given the shared condition ``y``."""

    base: GaussianMixtureFamily
    d_x: int

    def __post_init__(self):
        if self.base.d_x != 1:
            raise ValueError("product base must be one-dimensional")

    @property
    def d_y(self):
        return self.base.d_y

    def sample(self, rng, n=1):
        y = rng.random((n, self.d_y))
        b = self.base
        k = rng.choice(b.K, size=(n, self.d_x), p=b.weights)
        mu = b.means(y)[:, :, 0]  # (n, K)
        x0 = np.take_along_axis(mu, k, axis=1) + np.sqrt(b.variances[k]) * rng.standard_normal((n, self.d_x))
        return x0, y

    def _flat(self, x, y, t):
        n = len(x)
        return (x.reshape(-1, 1), np.repeat(y, self.d_x, axis=0), np.repeat(t, self.d_x))

    def log_density(self, x, y, t):
        xf, yf, tf = self._flat(x, y, t)
        return self.base.log_density(xf, yf, tf).reshape(len(x), self.d_x).sum(axis=1)

    def score(self, x, y, t):
        xf, yf, tf = self._flat(x, y, t)
        return self.base.score(xf, yf, tf).reshape(len(x), self.d_x)

    def to_dict(self):
        return {"kind": "product", "d_x": self.d_x, "base": self.base.to_dict()}


# ---------------------------------------------------------------------------
# Strong Hoelder family


def _gauss_hermite(n_nodes, dim):
    """Probabilists' Gauss-Hermite rule for E[g(Z)], Z ~ N(0, I_dim)."""
    z, w = np.polynomial.hermite_e.hermegauss(n_nodes)
    w = w / np.sqrt(2 * np.pi)
    if dim == 1:
        return z[:, None], w
    zz = np.stack(np.meshgrid(*([z] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    ww = np.prod(np.stack(np.meshgrid(*([w] * dim), indexing="ij"), axis=-1).reshape(-1, dim), axis=1)
    return zz, ww


@dataclass(frozen=True, eq=False)
class StrongHolderFamily:
    """p(x|y) = exp(-C2 |x|^2 / 2) * f(x, y) / Z(y),

    f(x, y) = C + amplitude * prod_i cos(omega_i x_i) * cos(nu * sum(y) + phase).

    ``Z(y)`` makes each conditional integrate to one. Writing
    ``kappa = E[prod cos(omega_i X_i)]`` under X ~ N(0, I/C2), it equals
    (2 pi / C2)^{d/2} (C + amplitude * kappa * g(y)). ``kappa`` is computed
    once by quadrature.
    """

    C2: float
    base: float
    amplitude: float
    omegas: tuple
    nu: float = 1.0
    phase: float = 0.0
    d_y: int = 1
    nodes: int = 64

    def __post_init__(self):
        om = tuple(float(w) for w in np.atleast_1d(self.omegas))
        object.__setattr__(self, "omegas", om)
        if not (self.C2 > 0 and self.base > 0):
            raise ValueError("C2 and base must be positive")
        if not 0 <= abs(self.amplitude) < self.base:
            raise ValueError("need |amplitude| < base so that f stays positive")
        if len(om) > 2:
            raise ValueError("StrongHolderFamily supports d_x <= 2 only")

    @property
    def d_x(self):
        return len(self.omegas)

    @cached_property
    def kappa(self):
        z, w = _gauss_hermite(self.nodes, self.d_x)
        return float(w @ np.prod(np.cos(np.asarray(self.omegas) * z / np.sqrt(self.C2)), axis=1))

    def g(self, y):
        return np.cos(self.nu * np.sum(y, axis=1) + self.phase)

    def normalizer(self, y):
        return (2 * np.pi / self.C2) ** (self.d_x / 2) * (self.base + self.amplitude * self.kappa * self.g(y))

    def f_tilde(self, x, y):
        """Normalised f, so that p_0 = exp(-C2|x|^2/2) * f_tilde."""
        f = self.base + self.amplitude * np.prod(np.cos(np.asarray(self.omegas) * x), axis=1) * self.g(y)
        return f / self.normalizer(y)

    def density0(self, x, y):
        return np.exp(-0.5 * self.C2 * np.sum(x**2, axis=1)) * self.f_tilde(x, y)

    @property
    def bounds(self):
        """(lower, upper) for f_tilde over all (x, y), i.e. for h."""
        ys = np.linspace(0, 1, 201)[:, None] * np.ones((1, self.d_y))
        Z = self.normalizer(ys)
        lo = (self.base - abs(self.amplitude)) / Z.max()
        hi = (self.base + abs(self.amplitude)) / Z.min()
        return float(lo), float(hi)

    def sample(self, rng, n=1):
        # rejection from the Gaussian envelope N(0, I/C2) against f <= C + |amp|
        y = rng.random((n, self.d_y))
        out = np.empty((n, self.d_x))
        todo = np.arange(n)
        top = self.base + abs(self.amplitude)
        while len(todo):
            prop = rng.standard_normal((len(todo), self.d_x)) / np.sqrt(self.C2)
            f = self.base + self.amplitude * np.prod(np.cos(np.asarray(self.omegas) * prop), axis=1) * self.g(y[todo])
            ok = rng.random(len(todo)) * top < f
            out[todo[ok]] = prop[ok]
            todo = todo[~ok]
        return out, y

    def hat(self, t):
        a, s = alpha_sigma(t)
        den = a**2 + self.C2 * s**2
        return a / den, s / np.sqrt(den), den

    def h_and_grad(self, x, y, t):
        """Quadrature values of h(x,y,t) and of (sigma_hat/alpha_hat) grad h.

        h = E[f_tilde(Z, y)],  Z ~ N(alpha_hat x, sigma_hat^2 I), and
        (sigma_hat/alpha_hat) grad h = E[f_tilde(Z, y) (Z - alpha_hat x) / sigma_hat].
        """
        ah, sh, _ = self.hat(t)
        z, w = _gauss_hermite(self.nodes, self.d_x)
        pts = ah[:, None, None] * x[:, None, :] + sh[:, None, None] * z[None]  # (n, Q, d)
        n, Q = pts.shape[:2]
        f = self.f_tilde(pts.reshape(-1, self.d_x), np.repeat(y, Q, axis=0)).reshape(n, Q)
        h = f @ w
        g2 = np.einsum("nq,q,qi->ni", f, w, z)
        return h, g2

    def log_density(self, x, y, t):
        t = np.asarray(t, dtype=float)
        out = np.empty(len(x))
        zero = t == 0
        if np.any(zero):
            out[zero] = np.log(self.density0(x[zero], y[zero]))
        if np.any(~zero):
            xs, ys, ts = x[~zero], y[~zero], t[~zero]
            _, _, den = self.hat(ts)
            h, _ = self.h_and_grad(xs, ys, ts)
            out[~zero] = (-0.5 * self.d_x * np.log(den) - 0.5 * self.C2 * np.sum(xs**2, axis=1) / den
                          + np.log(h))
        return out

    def score(self, x, y, t):
        _check_positive_time(t)
        ah, sh, den = self.hat(t)
        h, g2 = self.h_and_grad(x, y, t)
        return -self.C2 * x / den[:, None] + (ah / sh)[:, None] * g2 / h[:, None]

    def strong_score_parts(self, x, y, t):
        return self.h_and_grad(x, y, t)

    def to_dict(self):
        return {"kind": "strong", "C2": self.C2, "base": self.base, "amplitude": self.amplitude,
                "omegas": list(self.omegas), "nu": self.nu, "phase": self.phase, "d_y": self.d_y}


# ---------------------------------------------------------------------------
# Latent subspace family


@dataclass(frozen=True, eq=False)
class LatentFamily:
    """x_0 = U h with h drawn from a mixture on R^{d_0}."""

    U: np.ndarray
    latent: GaussianMixtureFamily

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        if U.shape[1] != self.latent.d_x:
            raise ValueError("U must have d_0 = latent.d_x columns")
        if np.max(np.abs(U.T @ U - np.eye(U.shape[1]))) > 1e-10:
            raise ValueError("U must have orthonormal columns")
        U.setflags(write=False)
        object.__setattr__(self, "U", U)

    @property
    def d_x(self):
        return self.U.shape[0]

    @property
    def d_0(self):
        return self.U.shape[1]

    @property
    def d_y(self):
        return self.latent.d_y

    def sample(self, rng, n=1):
        h, y = self.latent.sample(rng, n)
        return h @ self.U.T, y

    def log_density(self, x, y, t):
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0):
            raise ValueError("latent family has no density in R^{d_x} at t = 0")
        _, s = alpha_sigma(t)
        h = x @ self.U
        perp = x - h @ self.U.T
        k = self.d_x - self.d_0
        return (self.latent.log_density(h, y, t) - 0.5 * k * (LOG2PI + 2 * np.log(s))
                - 0.5 * np.sum(perp**2, axis=1) / s**2)

    def score(self, x, y, t):
        _check_positive_time(t)
        _, s = alpha_sigma(t)
        h = x @ self.U
        perp = x - h @ self.U.T
        return self.latent.score(h, y, t) @ self.U.T - perp / s[:, None] ** 2

    def to_dict(self):
        return {"kind": "latent", "U": self.U.tolist(), "latent": self.latent.to_dict()}


def random_latent_family(d_x, d_0, latent, rng):
    U, _ = np.linalg.qr(rng.standard_normal((d_x, d_0)))
    return LatentFamily(U, latent)


# ---------------------------------------------------------------------------
# module-level API


def sample_pair(family, rng, n=None):
    """Draw (x_0, y) pairs; with ``n=None`` a single pair of 1-D arrays."""
    x0, y = family.sample(rng, 1 if n is None else n)
    return (x0[0], y[0]) if n is None else (x0, y)


def _prep(family, x, y, t):
    x = _batch(x, family.d_x)
    y = _cond(y, len(x), family.d_y)
    return x, y, _times(t, len(x))


def oracle_score(family, x, y, t):
    x, y, t = _prep(family, x, y, t)
    _check_positive_time(t)
    return family.score(x, y, t)


def oracle_log_density(family, x, y, t):
    x, y, t = _prep(family, x, y, t)
    if np.any(t < 0):
        raise ValueError("time must be non-negative")
    return family.log_density(x, y, t)


def oracle_density(family, x, y, t):
    return np.exp(oracle_log_density(family, x, y, t))


def density0_derivative(family, x0, y, nx, ny, fd_step=None):
    """Mixed partial derivative of the t = 0 density.

    Mixtures use the analytic Hermite form; other families fall back to
    tensor-product central differences with step ``fd_step`` per axis.
    """
    if isinstance(family, GaussianMixtureFamily) and fd_step is None:
        return family.density0_derivative(x0, y, nx, ny)
    if isinstance(family, StrongHolderFamily):
        fn = family.density0
    elif isinstance(family, GaussianMixtureFamily):
        fn = lambda xx, yy: np.exp(family.log_density(xx, yy, np.zeros(len(xx))))
    else:
        raise ValueError(f"{type(family).__name__} has no density at t = 0")
    if fd_step is None:
        raise ValueError("finite-difference step required for this family")
    return finite_difference(fn, x0, y, nx, ny, fd_step)


def finite_difference(fn, x0, y, nx, ny, step):
    """Central-difference mixed partial of ``fn(x, y)`` (O(step^2))."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    orders = list(nx) + list(ny)
    dx = x0.shape[1]
    stencils = []
    for m in orders:
        j = np.arange(m + 1)
        coef = np.array([(-1) ** jj * comb(m, jj) for jj in j], dtype=float) / step**m
        stencils.append(list(zip((m / 2 - j) * step, coef)))
    out = np.zeros(len(x0))
    for combo in itertools.product(*stencils):
        shift = np.array([c[0] for c in combo])
        w = np.prod([c[1] for c in combo])
        out += w * fn(x0 + shift[:dx], y + shift[dx:])
    return out


def family_from_dict(d):
    kind = d["kind"]
    if kind == "mixture":
        return GaussianMixtureFamily(np.array(d["weights"]), np.array(d["offsets"]),
                                     np.array(d["slopes"]), np.array(d["variances"]))
    if kind == "product":
        return ProductFamily(family_from_dict(d["base"]), int(d["d_x"]))
    if kind == "strong":
        return StrongHolderFamily(d["C2"], d["base"], d["amplitude"], tuple(d["omegas"]),
                                  d.get("nu", 1.0), d.get("phase", 0.0), int(d.get("d_y", 1)))
    if kind == "latent":
        return LatentFamily(np.array(d["U"]), family_from_dict(d["latent"]))
    raise ValueError(f"unknown family kind {kind!r}")


def family_hash(family):
    blob = json.dumps(family.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
