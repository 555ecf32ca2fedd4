import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ditlab import transformer as tf
from ditlab.schedule import alpha_sigma


def random_params(rng, d=2, s=3, r=4, Lp=3, scale=0.7):
    n = lambda *sh: scale * rng.standard_normal(sh)
    return tf.TransformerParams(n(s, d), n(s, d), n(s, d), n(d, s), n(r, d), n(r), n(d, r), n(d), n(d, Lp))


def identity_model(spec, d_y=1, n_blocks=2, rng=None, **kw):
    m = tf.init_model(spec, d_y, n_blocks, 4, 8, rng or np.random.default_rng(3), **kw)
    for b in m.blocks:
        b.E[...] = 0.0
    return m


def randomize(model, rng, scale=0.3):
    for _, arr in model.named_params():
        arr += scale * rng.standard_normal(arr.shape)
    return model


# --- reshape ------------------------------------------------------------------


def test_square_patching():
    spec = tf.patch_spec(16, 2)
    assert (spec.d, spec.L) == (4, 4)


def test_reshape_layout():
    spec = tf.ReshapeSpec(6, 2, 3)
    X = tf.reshape(np.arange(1.0, 7.0), spec)
    np.testing.assert_array_equal(X, [[1, 3, 5], [2, 4, 6]])


def test_reshape_round_trip(rng):
    spec = tf.ReshapeSpec(12, 3, 4)
    x = rng.standard_normal((100, 12))
    np.testing.assert_array_equal(tf.unreshape(tf.reshape(x, spec), spec), x)


def test_reshape_errors():
    with pytest.raises(ValueError):
        tf.ReshapeSpec(6, 4, 2)
    with pytest.raises(ValueError):
        tf.reshape(np.zeros(5), tf.ReshapeSpec(6, 2, 3))
    with pytest.raises(ValueError):
        tf.unreshape(np.zeros((3, 2)), tf.ReshapeSpec(6, 2, 3))


# --- attention ----------------------------------------------------------------


def test_attention_zero_output_projection(rng):
    p = random_params(rng)
    p.W_O[...] = 0.0
    Z = rng.standard_normal((2, 3))
    np.testing.assert_array_equal(tf.attention_forward(p, Z), Z)


def test_attention_single_token(rng):
    p = random_params(rng, Lp=1)
    Z = rng.standard_normal((2, 1))
    np.testing.assert_allclose(tf.attention_forward(p, Z), Z + p.W_O @ p.W_V @ Z, rtol=1e-14)


def test_attention_scalar_loop_oracle(rng):
    p = random_params(rng, d=2, s=3, Lp=3)
    Z = rng.standard_normal((2, 3))
    d, L = Z.shape
    s = p.W_Q.shape[0]
    out = [[Z[a][j] for j in range(L)] for a in range(d)]
    for j in range(L):
        scores = []
        for i in range(L):
            acc = 0.0
            for m in range(s):
                k = sum(p.W_K[m][c] * Z[c][i] for c in range(d))
                q = sum(p.W_Q[m][c] * Z[c][j] for c in range(d))
                acc += k * q
            scores.append(acc)
        mx = max(scores)
        w = [math.exp(v - mx) for v in scores]
        tot = sum(w)
        w = [v / tot for v in w]
        for a in range(d):
            for m in range(s):
                hv = sum(w[i] * sum(p.W_V[m][c] * Z[c][i] for c in range(d)) for i in range(L))
                out[a][j] += p.W_O[a][m] * hv
    np.testing.assert_allclose(tf.attention_forward(p, Z), out, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(0.1, 30))
def test_softmax_columns_sum_to_one(n, m, scale):
    S = scale * np.random.default_rng(n * 7 + m).standard_normal((2, n, m))
    A = tf.softmax_keys(S)
    assert np.max(np.abs(A.sum(axis=-2) - 1)) < 1e-12
    assert np.all(A >= 0)


def test_attention_rejects_non_finite(rng):
    Z = rng.standard_normal((2, 3))
    Z[0, 1] = np.nan
    with pytest.raises(FloatingPointError):
        tf.attention_forward(random_params(rng), Z)


def test_attention_is_stable_for_large_scores(rng):
    p = random_params(rng, scale=30.0)
    assert np.all(np.isfinite(tf.attention_forward(p, rng.standard_normal((2, 3)))))


# --- feed-forward -------------------------------------------------------------


def test_ffn_identity(rng):
    p = random_params(rng)
    p.W_2[...] = 0.0
    p.b_2[...] = 0.0
    Z = rng.standard_normal((2, 3))
    np.testing.assert_array_equal(tf.ffn_forward(p, Z), Z)


def test_ffn_dead_relu(rng):
    p = random_params(rng)
    p.W_1[...] = 0.0
    p.b_1[...] = -1.0
    Z = rng.standard_normal((2, 3))
    np.testing.assert_allclose(tf.ffn_forward(p, Z), Z + p.b_2[:, None], rtol=1e-15)


def test_ffn_pinned_two_by_two():
    p = tf.TransformerParams(*(np.zeros((1, 2)),) * 3, np.zeros((2, 1)),
                             np.array([[1.0, -1.0], [0.5, 2.0]]), np.array([0.0, -1.0]),
                             np.array([[2.0, 0.0], [1.0, 1.0]]), np.array([0.1, 0.2]), np.zeros((2, 2)))
    Z = np.array([[1.0, -2.0], [3.0, 0.5]])
    # column 0: pre = (-2, 5.5) -> relu (0, 5.5); column 1: pre = (-2.5, -1.0) -> (0, 0)
    expect = np.array([[1.0 + 0.0 + 0.1, -2.0 + 0.1], [3.0 + 5.5 + 0.2, 0.5 + 0.2]])
    np.testing.assert_allclose(tf.ffn_forward(p, Z), expect, rtol=1e-15)


# --- full model ---------------------------------------------------------------


def test_residual_identity(rng):
    spec = tf.ReshapeSpec(8, 2, 4)
    m = identity_model(spec, d_y=2)
    x = rng.standard_normal((10, 8))
    np.testing.assert_allclose(tf.dit_forward(m, x, rng.random((10, 2)), rng.uniform(0.1, 3, 10)), x, atol=1e-15)
    np.testing.assert_allclose(tf.dit_forward(m, x, None, 0.5), x, atol=1e-15)


def test_output_dimension_matches_input(rng):
    m = randomize(tf.init_model(tf.ReshapeSpec(6, 2, 3), 1, 2, 4, 8, rng), rng)
    assert tf.dit_forward(m, rng.standard_normal((5, 6)), rng.random((5, 1)), 0.3).shape == (5, 6)
    assert tf.dit_forward(m, rng.standard_normal(6), [0.2], 0.3).shape == (6,)


def test_null_token_differs_from_zero_condition(rng):
    m = randomize(tf.init_model(tf.ReshapeSpec(4, 2, 2), 1, 1, 4, 8, rng), rng)
    m.null[...] = 1.0
    x = rng.standard_normal((3, 4))
    a = tf.dit_forward(m, x, None, 0.5)
    b = tf.dit_forward(m, x, np.zeros((3, 1)), 0.5)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(tf.dit_forward(m, x, np.zeros((3, 1)), 0.5, mask=True), a)


def test_patch_permutation_equivariance(rng):
    spec = tf.ReshapeSpec(6, 2, 3)
    m = randomize(tf.init_model(spec, 1, 2, 4, 8, rng), rng)
    for b in m.blocks:
        b.E[...] = 0.0
    x = rng.standard_normal(6)
    perm = [2, 0, 1]
    X = tf.reshape(x, spec)
    xp = tf.unreshape(X[:, perm], spec)
    out = tf.reshape(tf.dit_forward(m, x, [0.4], 0.7), spec)
    outp = tf.reshape(tf.dit_forward(m, xp, [0.4], 0.7), spec)
    np.testing.assert_allclose(outp, out[:, perm], rtol=1e-12, atol=1e-14)


# --- latent variant -----------------------------------------------------------


def latent_model(rng, d_x=6, d0=2):
    return identity_model(tf.ReshapeSpec(d_x, d_x, 1), rng=rng, latent_dim=d0,
                          latent_reshape=tf.ReshapeSpec(d0, d0, 1))


def test_latent_zero_trunk(rng):
    m = latent_model(rng)
    m.head_W[...] = 0.0
    x = rng.standard_normal((4, 6))
    t = np.array([0.1, 0.5, 1.0, 3.0])
    _, s = alpha_sigma(t)
    np.testing.assert_allclose(tf.latent_forward(m, x, rng.random((4, 1)), t), -x / s[:, None] ** 2, rtol=1e-14)


def test_latent_orthogonal_score(rng):
    m = latent_model(rng)
    W = m.latent.W_U
    x = rng.standard_normal((5, 6))
    t = 0.8
    _, s = alpha_sigma(t)
    expect = -(x - x @ W @ W.T) / s**2
    np.testing.assert_allclose(tf.dit_forward(m, x, rng.random((5, 1)), t), expect, atol=1e-13)
    inside = rng.standard_normal((5, 2)) @ W.T
    np.testing.assert_allclose(tf.dit_forward(m, inside, rng.random((5, 1)), t), 0.0, atol=1e-13)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_latent_identity_for_any_orthonormal_basis(seed):
    rng = np.random.default_rng(seed)
    m = latent_model(rng, 5, 2)
    W, _ = np.linalg.qr(rng.standard_normal((5, 2)))
    m.latent.W_U[...] = W
    x = rng.standard_normal((3, 5))
    _, s = alpha_sigma(1.1)
    np.testing.assert_allclose(tf.dit_forward(m, x, rng.random((3, 1)), 1.1), -(x - x @ W @ W.T) / s**2, atol=1e-12)


def test_latent_requires_spec_and_positive_time(rng):
    with pytest.raises(ValueError):
        tf.latent_forward(identity_model(tf.ReshapeSpec(4, 2, 2)), np.zeros(4), [0.0], 0.5)
    with pytest.raises(ValueError):
        tf.latent_forward(latent_model(rng), np.zeros(6), [0.0], 0.0)


# --- norms --------------------------------------------------------------------


def test_norm_examples():
    assert tf.spectral_norm(np.eye(2)) == pytest.approx(1.0, rel=1e-12)
    assert tf.two_inf_norm(np.eye(2)) == 1.0
    M = np.array([[3.0, 4.0], [0.0, 0.0]])
    assert tf.spectral_norm(M) == pytest.approx(5.0, rel=1e-12)
    assert tf.two_inf_norm(M) == 5.0
    assert tf.spectral_norm(np.zeros((3, 2))) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3))
def test_norms_are_absolutely_homogeneous(seed, c):
    M = np.random.default_rng(seed).standard_normal((3, 4))
    assert tf.spectral_norm(c * M) == pytest.approx(abs(c) * tf.spectral_norm(M), rel=1e-6)
    assert tf.two_inf_norm(c * M) == pytest.approx(abs(c) * tf.two_inf_norm(M), rel=1e-12)


@pytest.mark.parametrize("shape", [(1, 1), (2, 5), (4, 4), (8, 3), (8, 8)])
def test_spectral_norm_matches_svd(rng, shape):
    for _ in range(10):
        M = rng.standard_normal(shape)
        assert tf.spectral_norm(M, iters=2000, tol=1e-14) == pytest.approx(np.linalg.svd(M, compute_uv=False)[0], rel=1e-6)


def test_two_inf_at_least_row_norms(rng):
    M = rng.standard_normal((5, 3))
    assert tf.two_inf_norm(M) >= np.linalg.norm(M, axis=1).max()


def test_norm_report(rng):
    m = randomize(tf.init_model(tf.ReshapeSpec(4, 2, 2), 1, 2, 4, 8, rng), rng)
    rep = tf.norm_report(m, n_samples=100)
    assert set(rep.spectral) == set(rep.two_inf)
    assert all(v >= 0 for v in rep.spectral.values()) and rep.C_T > 0
    assert len(rep.L_T) == 2 and all(v > 0 for v in rep.L_T)


# --- checkpoints --------------------------------------------------------------


@pytest.mark.parametrize("latent", [False, True])
def test_checkpoint_round_trip(tmp_path, rng, latent):
    if latent:
        m = tf.init_model(tf.ReshapeSpec(8, 8, 1), 2, 2, 4, 8, rng, latent_dim=4,
                          latent_reshape=tf.ReshapeSpec(4, 2, 2))
    else:
        m = tf.init_model(tf.ReshapeSpec(6, 2, 3), 2, 2, 4, 8, rng)
    randomize(m, rng)
    path = tmp_path / "m.bin"
    tf.save_checkpoint(m, path)
    back = tf.load_checkpoint(path)
    for (n1, a), (n2, b) in zip(m.named_params(), back.named_params()):
        assert n1 == n2
        np.testing.assert_array_equal(a, b)
    x = rng.standard_normal((3, m.reshape.d_x))
    y = rng.random((3, 2))
    np.testing.assert_array_equal(tf.dit_forward(back, x, y, 0.4), tf.dit_forward(m, x, y, 0.4))
    with open(path, "rb") as fh:
        assert fh.read(8) == b"DITLAB01"


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOTMODEL" + bytes(200))
    with pytest.raises(ValueError):
        tf.load_checkpoint(p)
