"""A small in-context conditional diffusion transformer in numpy.

Tokens are the columns of a d x L' matrix. The flat input is patched into L
columns (column-major), and a condition token and a time token are appended.
Each block is ``FFN(SA(Z + E))`` with

    SA(Z)  = Z + W_O (W_V Z) softmax[(W_K Z)^T (W_Q Z)]      (softmax over keys)
    FFN(Z) = Z + W_2 relu(W_1 Z + b_1) + b_2

All forward functions act on a batch: token tensors have shape (B, d, L').
When a ``tape`` is passed, each op registers a backward closure on it; the
reverse pass lives in :mod:`ditlab.training`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .schedule import alpha_sigma


@dataclass(frozen=True)
class ReshapeSpec:
    d_x: int
    d: int
    L: int

    def __post_init__(self):
        if self.d * self.L != self.d_x:
            raise ValueError(f"d * L must equal d_x ({self.d} * {self.L} != {self.d_x})")


def patch_spec(d_x, p=2):
    """Square-image patching when d_x is a p-divisible square, else one token per
    coordinate group of size p (falling back to d = 1)."""
    side = int(round(np.sqrt(d_x)))
    if side * side == d_x and side % p == 0:
        return ReshapeSpec(d_x, p * p, d_x // (p * p))
    d = p * p if d_x % (p * p) == 0 else 1
    return ReshapeSpec(d_x, d, d_x // d)


def reshape(x, spec: ReshapeSpec):
    """(B, d_x) -> (B, d, L); column j holds x[j d : (j+1) d]."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if x.shape[-1] != spec.d_x:
        raise ValueError(f"input dimension {x.shape[-1]} != {spec.d_x}")
    X = x.reshape(-1, spec.L, spec.d).transpose(0, 2, 1)
    return X[0] if single else X


def unreshape(X, spec: ReshapeSpec):
    X = np.asarray(X, dtype=float)
    single = X.ndim == 2
    if X.shape[-2:] != (spec.d, spec.L):
        raise ValueError(f"token matrix shape {X.shape[-2:]} != {(spec.d, spec.L)}")
    x = np.swapaxes(X.reshape(-1, spec.d, spec.L), 1, 2).reshape(-1, spec.d_x)
    return x[0] if single else x


@dataclass
class TransformerParams:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    W_1: np.ndarray
    b_1: np.ndarray
    W_2: np.ndarray
    b_2: np.ndarray
    E: np.ndarray

    names = ("W_Q", "W_K", "W_V", "W_O", "W_1", "b_1", "W_2", "b_2", "E")

    @property
    def d(self):
        return self.W_Q.shape[1]

    @property
    def s(self):
        return self.W_Q.shape[0]

    @property
    def r(self):
        return self.W_1.shape[0]


@dataclass
class LatentSpec:
    W_U: np.ndarray  # d_x x d_0
    reshape: ReshapeSpec  # over the latent dimension d_0


@dataclass
class DiTModel:
    reshape: ReshapeSpec
    y_W: np.ndarray
    y_b: np.ndarray
    null: np.ndarray
    t_W: np.ndarray
    t_b: np.ndarray
    blocks: list
    head_W: np.ndarray
    head_b: np.ndarray
    latent: LatentSpec | None = None
    t_freqs: np.ndarray = field(default_factory=lambda: np.array([0.5, 1.0, 2.0]))

    @property
    def d_y(self):
        return self.y_W.shape[1]

    @property
    def trunk_spec(self):
        return self.latent.reshape if self.latent is not None else self.reshape

    def named_params(self):
        """(name, array) pairs in declaration order; arrays are live references."""
        out = [("y_W", self.y_W), ("y_b", self.y_b), ("null", self.null),
               ("t_W", self.t_W), ("t_b", self.t_b)]
        for i, blk in enumerate(self.blocks):
            out += [(f"blocks.{i}.{n}", getattr(blk, n)) for n in TransformerParams.names]
        out += [("head_W", self.head_W), ("head_b", self.head_b)]
        if self.latent is not None:
            out.append(("W_U", self.latent.W_U))
        return out

    def copy(self):
        m = replace(self, blocks=[replace(b, **{n: getattr(b, n).copy() for n in TransformerParams.names})
                                  for b in self.blocks])
        for n in ("y_W", "y_b", "null", "t_W", "t_b", "head_W", "head_b"):
            setattr(m, n, getattr(self, n).copy())
        if self.latent is not None:
            m.latent = LatentSpec(self.latent.W_U.copy(), self.latent.reshape)
        return m


def time_features(t, freqs):
    """[log t, sin(w log t), cos(w log t)] for each frequency w."""
    u = np.log(np.asarray(t, dtype=float))[..., None]
    return np.concatenate([u, np.sin(freqs * u), np.cos(freqs * u)], axis=-1)


def init_model(spec: ReshapeSpec, d_y, n_blocks=1, s=4, r=16, rng=None, latent_dim=None,
               pos_scale=0.01, init_scale=0.05, t_freqs=(0.5, 1.0, 2.0), latent_reshape=None):
    """Residual-identity initialisation.

    W_O, W_2 and the biases start at zero, the inner matrices are uniform on
    +-init_scale, the head is the identity and the first block's positional
    encoding is the ramp E[:, k] = 2 pos_scale (k + 1).
    With ``latent_dim`` set, the trunk runs on a d_0 = latent_dim input and a
    random column-orthonormal W_U is drawn.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    lat = None
    trunk = spec
    if latent_dim is not None:
        trunk = latent_reshape or patch_spec(latent_dim)
        W_U, _ = np.linalg.qr(rng.standard_normal((spec.d_x, latent_dim)))
        lat = LatentSpec(W_U, trunk)
    d, Lp = trunk.d, trunk.L + 2
    u = lambda *shape: rng.uniform(-init_scale, init_scale, size=shape)
    freqs = np.asarray(t_freqs, dtype=float)
    m = 1 + 2 * len(freqs)
    blocks = []
    for i in range(n_blocks):
        E = 2 * pos_scale * np.tile(np.arange(1, Lp + 1, dtype=float), (d, 1)) if i == 0 else np.zeros((d, Lp))
        blocks.append(TransformerParams(u(s, d), u(s, d), u(s, d), np.zeros((d, s)),
                                        u(r, d), np.zeros(r), np.zeros((d, r)), np.zeros(d), E))
    return DiTModel(spec, u(d, d_y), np.zeros(d), np.zeros(d), u(d, m), np.zeros(d), blocks,
                    np.eye(d), np.zeros(d), lat, freqs)


# ---------------------------------------------------------------------------
# ops


def softmax_keys(S):
    """Column-stochastic softmax over axis -2 (keys) with max subtraction."""
    S = S - S.max(axis=-2, keepdims=True)
    P = np.exp(S)
    return P / P.sum(axis=-2, keepdims=True)


def attention_forward(p: TransformerParams, Z, tape=None):
    Z = np.asarray(Z, dtype=float)
    single = Z.ndim == 2
    Zb = Z[None] if single else Z
    if not np.all(np.isfinite(Zb)):
        raise FloatingPointError("non-finite input to attention")
    Q = np.einsum("sd,bdl->bsl", p.W_Q, Zb)
    K = np.einsum("sd,bdl->bsl", p.W_K, Zb)
    V = np.einsum("sd,bdl->bsl", p.W_V, Zb)
    A = softmax_keys(np.einsum("bsi,bsj->bij", K, Q))
    H = np.einsum("bsi,bij->bsj", V, A)
    out = Zb + np.einsum("ds,bsl->bdl", p.W_O, H)
    if tape is not None:
        tape.push("attention", _attention_backward(p, Zb, Q, K, V, A, H))
    return out[0] if single else out


def _attention_backward(p, Z, Q, K, V, A, H):
    def back(g, grads):
        grads["W_O"] += np.einsum("bdl,bsl->ds", g, H)
        gH = np.einsum("ds,bdl->bsl", p.W_O, g)
        gV = np.einsum("bsj,bij->bsi", gH, A)
        gA = np.einsum("bsi,bsj->bij", V, gH)
        gS = A * (gA - np.sum(A * gA, axis=1, keepdims=True))
        gK = np.einsum("bij,bsj->bsi", gS, Q)
        gQ = np.einsum("bij,bsi->bsj", gS, K)
        grads["W_Q"] += np.einsum("bsl,bdl->sd", gQ, Z)
        grads["W_K"] += np.einsum("bsl,bdl->sd", gK, Z)
        grads["W_V"] += np.einsum("bsl,bdl->sd", gV, Z)
        return (g + np.einsum("sd,bsl->bdl", p.W_Q, gQ) + np.einsum("sd,bsl->bdl", p.W_K, gK)
                + np.einsum("sd,bsl->bdl", p.W_V, gV))
    return back


def ffn_forward(p: TransformerParams, Z, tape=None):
    Z = np.asarray(Z, dtype=float)
    single = Z.ndim == 2
    Zb = Z[None] if single else Z
    pre = np.einsum("rd,bdl->brl", p.W_1, Zb) + p.b_1[None, :, None]
    R = np.maximum(pre, 0.0)
    out = Zb + np.einsum("dr,brl->bdl", p.W_2, R) + p.b_2[None, :, None]
    if tape is not None:
        def back(g, grads):
            grads["W_2"] += np.einsum("bdl,brl->dr", g, R)
            grads["b_2"] += g.sum(axis=(0, 2))
            gpre = np.einsum("dr,bdl->brl", p.W_2, g) * (pre > 0)
            grads["W_1"] += np.einsum("brl,bdl->rd", gpre, Zb)
            grads["b_1"] += gpre.sum(axis=(0, 2))
            return g + np.einsum("rd,brl->bdl", p.W_1, gpre)
        tape.push("ffn", back)
    return out[0] if single else out


def block_forward(p: TransformerParams, Z, tape=None):
    Zb = np.asarray(Z, dtype=float) + p.E
    if tape is not None:
        tape.push("pos", lambda g, grads: (grads["E"].__iadd__(g.sum(axis=0)), g)[1])
    return ffn_forward(p, attention_forward(p, Zb, tape), tape)


def _as_batch(model, x, y, t, mask):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None]
    B = len(x)
    t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
    if y is None:
        yb = np.zeros((B, model.d_y))
        null = np.ones(B, dtype=bool)
    else:
        yb = np.asarray(y, dtype=float)
        yb = np.broadcast_to(yb.reshape(-1, model.d_y) if yb.ndim < 2 else yb, (B, model.d_y))
        null = np.zeros(B, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), (B,))
    return x, yb, t, null


def trunk_forward(model: DiTModel, h, y, t, null, tape=None):
    """g(h, y, t): the DiT map on flat inputs of size ``trunk_spec.d_x``."""
    spec = model.trunk_spec
    X = reshape(h, spec)
    feats = time_features(t, model.t_freqs)
    ytok = y @ model.y_W.T + model.y_b
    ytok = np.where(null[:, None], model.null[None], ytok)
    ttok = feats @ model.t_W.T + model.t_b
    Z = np.concatenate([X, ytok[:, :, None], ttok[:, :, None]], axis=2)
    if tape is not None:
        def back_embed(g, grads):
            gy = g[:, :, spec.L]
            gt = g[:, :, spec.L + 1]
            gy_real = np.where(null[:, None], 0.0, gy)
            grads["y_W"] += gy_real.T @ y
            grads["y_b"] += gy_real.sum(axis=0)
            grads["null"] += np.where(null[:, None], gy, 0.0).sum(axis=0)
            grads["t_W"] += gt.T @ feats
            grads["t_b"] += gt.sum(axis=0)
            return unreshape(g[:, :, :spec.L], spec)
        tape.push("embed", back_embed)
    for i, blk in enumerate(model.blocks):
        if tape is not None:
            tape.scope(f"blocks.{i}.")
        Z = block_forward(blk, Z, tape)
    if tape is not None:
        tape.scope("")
    out = Z[:, :, :spec.L]
    Y = np.einsum("ed,bdl->bel", model.head_W, out) + model.head_b[None, :, None]
    if tape is not None:
        Lp = Z.shape[2]

        def back_head(g, grads):
            grads["head_W"] += np.einsum("bel,bdl->ed", g, out)
            grads["head_b"] += g.sum(axis=(0, 2))
            gZ = np.zeros(g.shape[:2] + (Lp,))
            gZ[:, :, :spec.L] = np.einsum("ed,bel->bdl", model.head_W, g)
            return gZ
        tape.push("head", back_head)
        tape.push("unreshape", lambda g, grads: reshape(g, spec))
    return unreshape(Y, spec)


def dit_forward(model: DiTModel, x, y, t, mask=None, tape=None):
    """Score-network output for a batch. ``y=None`` (or ``mask`` True) selects
    the null condition token."""
    xb, yb, tb, null = _as_batch(model, x, y, t, mask)
    if model.latent is not None:
        return latent_forward(model, xb, yb if y is not None else None, tb, mask, tape)
    out = trunk_forward(model, xb, yb, tb, null, tape)
    return out[0] if np.ndim(x) == 1 else out


def latent_forward(model: DiTModel, x, y, t, mask=None, tape=None):
    """(W_U g(W_U^T x, y, t) - x) / sigma_t^2."""
    if model.latent is None:
        raise ValueError("model has no latent encoder/decoder")
    xb, yb, tb, null = _as_batch(model, x, y, t, mask)
    if np.any(tb <= 0):
        raise ValueError("latent output needs t > 0")
    W = model.latent.W_U
    _, s = alpha_sigma(tb)
    inv = 1.0 / s**2
    h = xb @ W
    if tape is not None:
        def back_enc(g, grads):  # g: gradient wrt h
            grads["W_U"] += xb.T @ g
            return g @ W.T
        tape.push("encode", back_enc)
    g_out = trunk_forward(model, h, yb, tb, null, tape)
    out = (g_out @ W.T - xb) * inv[:, None]
    if tape is not None:
        def back_dec(g, grads):
            gs = g * inv[:, None]
            grads["W_U"] += gs.T @ g_out
            return gs @ W
        tape.push("decode", back_dec)
    return out[0] if np.ndim(x) == 1 else out


# ---------------------------------------------------------------------------
# norms


@dataclass
class NormReport:
    spectral: dict
    two_inf: dict
    C_T: float
    L_T: list


def spectral_norm(M, iters=50, tol=1e-8, rng=None):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.any(M):
        return 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    v = rng.standard_normal(M.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = M.T @ (M @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        new = np.sqrt(nw)
        if abs(new - est) <= tol * new:
            est = new
            break
        est = new
    return float(np.linalg.norm(M @ v))


def two_inf_norm(M):
    """Maximum row Euclidean norm."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return float(np.max(np.linalg.norm(M, axis=1)))


def norm_report(model: DiTModel, rng=None, n_samples=1000, box=3.0, t_range=(0.05, 8.0)):
    rng = rng if rng is not None else np.random.default_rng(0)
    spec, two = {}, {}
    for name, arr in model.named_params():
        if arr.ndim == 2:
            spec[name] = spectral_norm(arr)
            two[name] = two_inf_norm(arr)
    x = rng.uniform(-box, box, (n_samples, model.reshape.d_x))
    y = rng.random((n_samples, model.d_y))
    t = rng.uniform(*t_range, n_samples)
    out = dit_forward(model, x, y, t)
    C_T = float(np.max(np.linalg.norm(out, axis=1)))
    lips = []
    ts = model.trunk_spec
    for blk in model.blocks:
        Z1 = rng.uniform(-box, box, (200, ts.d, ts.L + 2))
        Z2 = Z1 + 1e-4 * rng.standard_normal(Z1.shape)
        num = np.linalg.norm((block_forward(blk, Z1) - block_forward(blk, Z2)).reshape(200, -1), axis=1)
        den = np.linalg.norm((Z1 - Z2).reshape(200, -1), axis=1)
        lips.append(float(np.max(num / den)))
    return NormReport(spec, two, C_T, lips)


# ---------------------------------------------------------------------------
# checkpoints: b"DITLAB01", 12 little-endian int64 header fields, then every
# parameter in declaration order as little-endian float64, followed by the
# time-feature frequencies.

_MAGIC = b"DITLAB01"


def save_checkpoint(model: DiTModel, path):
    blk = model.blocks[0]
    ts = model.trunk_spec
    lat = model.latent
    header = [model.reshape.d_x, model.reshape.d, model.reshape.L, model.d_y, len(model.blocks),
              blk.s, blk.r, len(model.t_freqs), int(lat is not None),
              lat.W_U.shape[1] if lat else 0, ts.d, ts.L]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<12q", *header))
        for _, arr in model.named_params():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.t_freqs, dtype="<f8").tobytes())


def load_checkpoint(path) -> DiTModel:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError("not a ditlab checkpoint")
        (d_x, d, L, d_y, nb, s, r, nf, has_lat, d0, td, tL) = struct.unpack("<12q", fh.read(96))
        body = np.frombuffer(fh.read(), dtype="<f8")
    spec = ReshapeSpec(d_x, d, L)
    model = init_model(spec, d_y, nb, s, r, latent_dim=d0 if has_lat else None,
                       t_freqs=np.zeros(nf), latent_reshape=ReshapeSpec(d0, td, tL) if has_lat else None)
    pos = 0
    for _, arr in model.named_params():
        arr[...] = body[pos:pos + arr.size].reshape(arr.shape)
        pos += arr.size
    model.t_freqs = body[pos:pos + nf].copy()
    return model
