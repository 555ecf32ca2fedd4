import math

import numpy as np
import pytest
from scipy import integrate, stats

from ditlab import targets as tg
from ditlab import training as tr
from ditlab import transformer as tf
from ditlab.schedule import TimeWindow, alpha_sigma

WINDOW = TimeWindow(0.05, 4.0)


def random_model(rng, spec=tf.ReshapeSpec(6, 2, 3), d_y=1, scale=0.4, **kw):
    m = tf.init_model(spec, d_y, 1, 4, 8, rng, **kw)
    for name, arr in m.named_params():
        if name != "W_U":
            arr += scale * rng.standard_normal(arr.shape)
    return m


def fd_check(model, x0, y, draw, h=1e-5):
    _, grads = tr.loss_and_grad(model, x0, y, draw)
    worst = {}
    for name, arr in model.named_params():
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = tr.loss_from_draw(model, x0, y, draw)
            arr[idx] = old - h
            down = tr.loss_from_draw(model, x0, y, draw)
            arr[idx] = old
            fd[idx] = (up - down) / (2 * h)
        worst[name] = np.linalg.norm(grads[name] - fd) / max(np.linalg.norm(fd), 1e-8)
    return worst


# --- config -------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(mask_prob=1.5)
    with pytest.raises(ValueError):
        tr.TrainConfig(lr=-1.0)


# --- loss ---------------------------------------------------------------------


def test_zero_model_loss_is_kernel_term(rng):
    x0 = rng.standard_normal((50, 3))
    y = rng.random((50, 1))
    zero = lambda xt, yy, t, mask: np.zeros_like(xt)
    loss = tr.cfg_loss(None, x0, y, WINDOW, np.random.default_rng(5), score_fn=zero)
    # same draws, recomputed independently: t, mask, then eps
    r = np.random.default_rng(5)
    t = r.uniform(WINDOW.t0, WINDOW.T, 50)
    r.random(50)
    eps = r.standard_normal((50, 3))
    _, s = alpha_sigma(t)
    assert loss == pytest.approx(np.mean(np.sum(eps**2, axis=1) / s**2), rel=1e-12)


def test_perfect_hook_has_zero_loss(rng):
    x0 = rng.standard_normal((20, 2))
    y = rng.random((20, 1))
    draw = tr.draw_loss_noise(20, 2, WINDOW, rng)
    a, _ = alpha_sigma(draw.t)
    hook = lambda xt, yy, t, mask: -(xt - a[:, None] * x0[draw.idx]) / alpha_sigma(t)[1][:, None] ** 2
    assert tr.loss_from_draw(None, x0, y, draw, score_fn=hook) == pytest.approx(0.0, abs=1e-20)


def test_full_masking_always_queries_null(rng):
    seen = []

    def hook(xt, yy, t, mask):
        seen.append(np.asarray(mask).copy())
        return np.zeros_like(xt)

    tr.cfg_loss(None, rng.standard_normal((40, 2)), rng.random((40, 1)), WINDOW, rng, mask_prob=1.0, score_fn=hook)
    assert np.all(np.concatenate(seen))
    m = random_model(rng, tf.ReshapeSpec(2, 2, 1))
    x0 = rng.standard_normal((10, 2))
    a = tr.cfg_loss(m, x0, np.zeros((10, 1)), WINDOW, np.random.default_rng(1), mask_prob=1.0)
    b = tr.cfg_loss(m, x0, np.ones((10, 1)), WINDOW, np.random.default_rng(1), mask_prob=1.0)
    assert a == b


def test_time_draws_average(rng):
    draw = tr.draw_loss_noise(7, 2, WINDOW, rng, time_draws=3)
    assert len(draw.t) == 21 and list(draw.idx[:4]) == [0, 0, 0, 1]
    assert np.all((draw.t >= WINDOW.t0) & (draw.t <= WINDOW.T))


def test_loss_is_deterministic(rng):
    m = random_model(rng)
    x0 = rng.standard_normal((8, 6))
    y = rng.random((8, 1))
    a = tr.cfg_loss(m, x0, y, WINDOW, np.random.default_rng(3))
    b = tr.cfg_loss(m, x0, y, WINDOW, np.random.default_rng(3))
    assert a == b


# --- gradients ----------------------------------------------------------------


def test_gradient_check_every_parameter(rng):
    m = random_model(rng)
    x0 = rng.standard_normal((6, 6))
    y = rng.random((6, 1))
    draw = tr.draw_loss_noise(6, 6, WINDOW, rng, mask_prob=0.5)
    draw.mask[:2] = [True, False]
    worst = fd_check(m, x0, y, draw)
    assert max(worst.values()) < 1e-4, worst


def test_gradient_check_latent_model(rng):
    m = random_model(rng, tf.ReshapeSpec(4, 4, 1), latent_dim=2, latent_reshape=tf.ReshapeSpec(2, 2, 1))
    x0 = rng.standard_normal((5, 4))
    y = rng.random((5, 1))
    draw = tr.draw_loss_noise(5, 4, TimeWindow(0.3, 2.0), rng)
    worst = fd_check(m, x0, y, draw)
    assert max(worst.values()) < 1e-4, worst


def test_zero_model_gradients_finite_and_match_fd(rng):
    m = tf.init_model(tf.ReshapeSpec(2, 2, 1), 1, 1, 4, 8, rng)
    x0 = np.vstack([rng.standard_normal((4, 2)), -rng.standard_normal((4, 2))])
    y = rng.random((8, 1))
    draw = tr.draw_loss_noise(8, 2, WINDOW, rng)
    _, g = tr.loss_and_grad(m, x0, y, draw)
    assert all(np.all(np.isfinite(v)) for v in g.values())
    worst = fd_check(m, x0, y, draw)
    assert worst["blocks.0.W_O"] < 1e-4


def test_dead_value_path_has_zero_gradient(rng):
    m = random_model(rng)
    m.blocks[0].W_O[...] = 0.0
    x0 = rng.standard_normal((5, 6))
    _, g = tr.gradients(m, (x0, rng.random((5, 1))), WINDOW, rng)
    for k in ("W_V", "W_Q", "W_K"):
        np.testing.assert_array_equal(g[f"blocks.0.{k}"], 0.0)
    assert np.any(g["blocks.0.W_O"])


def test_linear_model_gradient_is_least_squares(rng):
    spec = tf.ReshapeSpec(6, 2, 3)
    m = tf.init_model(spec, 1, 1, 4, 8, rng)
    m.blocks[0].E[...] = 0.0
    m.head_W[...] = rng.standard_normal((2, 2))
    m.head_b[...] = rng.standard_normal(2)
    x0 = rng.standard_normal((9, 6))
    y = rng.random((9, 1))
    draw = tr.draw_loss_noise(9, 6, WINDOW, rng)
    _, g = tr.loss_and_grad(m, x0, y, draw)
    xt, _, target = tr._inputs(x0, y, draw)
    X = tf.reshape(xt, spec)  # (B, d, L)
    T = tf.reshape(target, spec)
    R = np.einsum("ed,bdl->bel", m.head_W, X) + m.head_b[None, :, None] - T
    gW = 2 / len(xt) * np.einsum("bel,bdl->ed", R, X)
    gb = 2 / len(xt) * R.sum(axis=(0, 2))
    np.testing.assert_allclose(g["head_W"], gW, rtol=1e-12)
    np.testing.assert_allclose(g["head_b"], gb, rtol=1e-12)


def test_empty_batch_raises(rng):
    with pytest.raises(ValueError):
        tr.gradients(random_model(rng), (np.zeros((0, 6)), np.zeros((0, 1))), WINDOW, rng)


def test_non_finite_gradient_names_op():
    tape = tr.Tape()
    tape.scope("blocks.0.")
    tape.push("ffn", lambda g, grads: g * np.nan)
    with pytest.raises(FloatingPointError, match="blocks.0.ffn"):
        tape.backward(np.ones(2), {})


# --- training -----------------------------------------------------------------


def small_cfg(**kw):
    base = dict(n=200, batch=32, lr=0.01, epochs=3, window=WINDOW, seed=4)
    base.update(kw)
    return tr.TrainConfig(**base)


def test_zero_learning_rate_leaves_parameters(rng):
    m = random_model(rng, tf.ReshapeSpec(1, 1, 1))
    before = [a.copy() for _, a in m.named_params()]
    tr.train(m, tg.standard_gaussian(), small_cfg(lr=0.0))
    for b, (_, a) in zip(before, m.named_params()):
        np.testing.assert_array_equal(a, b)


def test_training_is_deterministic():
    traces = []
    for _ in range(2):
        m = tf.init_model(tf.ReshapeSpec(2, 2, 1), 1, 1, 4, 8, np.random.default_rng(0))
        _, trace = tr.train(m, tg.standard_gaussian(2), small_cfg())
        traces.append(trace)
    assert traces[0] == traces[1]


def test_divergence_aborts_with_trace():
    m = tf.init_model(tf.ReshapeSpec(1, 1, 1), 1, 1, 4, 8, np.random.default_rng(0))
    with pytest.raises(tr.TrainingDiverged) as info:
        tr.train(m, tg.standard_gaussian(), small_cfg(lr=1e5, epochs=20))
    assert len(info.value.trace) >= 1


def test_latent_basis_stays_orthonormal(rng):
    fam = tg.random_latent_family(4, 2, tg.standard_gaussian(2), rng)
    m = tf.init_model(tf.ReshapeSpec(4, 4, 1), 1, 1, 4, 8, rng, latent_dim=2,
                      latent_reshape=tf.ReshapeSpec(2, 2, 1))
    tr.train(m, fam, small_cfg(lr=0.05))
    W = m.latent.W_U
    np.testing.assert_allclose(W.T @ W, np.eye(2), atol=1e-12)


def test_training_improves_on_zero_predictor():
    fam = tg.standard_gaussian()
    m = tf.init_model(tf.ReshapeSpec(1, 1, 1), 1, 1, 4, 16, np.random.default_rng(0))
    tr.train(m, fam, tr.TrainConfig(n=1000, batch=64, lr=0.01, epochs=15, window=WINDOW, seed=1))
    trained = tr.score_risk(tr.model_score(m), fam, WINDOW, 4000, np.random.default_rng(9))
    zero = tr.score_risk(tr.zero_score, fam, WINDOW, 4000, np.random.default_rng(9))
    assert trained.risk < 0.5 * zero.risk


# --- risk ---------------------------------------------------------------------


def oracle(fam):
    return lambda x, y, t: tg.oracle_score(fam, x, y, t)


def test_oracle_risk_is_zero(rng):
    fam = tg.GaussianMixtureFamily([0.5, 0.5], [[-1.0], [1.0]], [[[0.5]], [[-0.5]]], [0.25, 0.25])
    rep = tr.score_risk(oracle(fam), fam, WINDOW, 2000, rng)
    assert rep.risk <= 3 * rep.stderr + 1e-30


def test_zero_predictor_risk_is_dimension(rng):
    fam = tg.standard_gaussian(3)
    rep = tr.score_risk(tr.zero_score, fam, WINDOW, 20_000, rng)
    assert abs(rep.risk - 3) < 3 * rep.stderr
    assert rep.mc_points == 20_000


def test_shifted_oracle_risk(rng):
    fam = tg.single_gaussian([0.5, -1.0])
    c = np.array([0.3, -0.4])
    rep = tr.score_risk(lambda x, y, t: tg.oracle_score(fam, x, y, t) + c, fam, WINDOW, 1000, rng)
    assert rep.risk == pytest.approx(0.25, rel=1e-10)


def test_truncated_risk_examples():
    fam = tg.standard_gaussian()
    full = tr.score_risk(tr.zero_score, fam, WINDOW, 5000, np.random.default_rng(2))
    inf = tr.truncated_risk(tr.zero_score, fam, WINDOW, np.inf, 5000, np.random.default_rng(2))
    assert inf.risk == full.risk
    assert tr.truncated_risk(tr.zero_score, fam, WINDOW, 0.0, 1000, np.random.default_rng(2)).risk == 0.0
    expect, _ = integrate.quad(lambda x: x * x * stats.norm.pdf(x), -1, 1)
    assert round(expect, 4) == 0.1987
    one = tr.truncated_risk(tr.zero_score, fam, WINDOW, 1.0, 40_000, np.random.default_rng(2))
    assert abs(one.risk - expect) < 3 * one.stderr
    with pytest.raises(ValueError):
        tr.truncated_risk(tr.zero_score, fam, WINDOW, -1.0, 10, np.random.default_rng(2))


def test_truncated_risk_dominated(rng):
    fam = tg.GaussianMixtureFamily([0.5, 0.5], [[-1.0], [1.0]], [[[0.5]], [[-0.5]]], [0.25, 0.25])
    score = lambda x, y, t: 0.5 * tg.oracle_score(fam, x, y, t)
    for R in (0.5, 1.0, 2.0):
        a = tr.truncated_risk(score, fam, WINDOW, R, 3000, np.random.default_rng(11))
        b = tr.score_risk(score, fam, WINDOW, 3000, np.random.default_rng(11))
        assert a.risk <= b.risk + 3 * (a.stderr + b.stderr)


def test_risk_is_seeded():
    fam = tg.standard_gaussian()
    a = tr.score_risk(tr.zero_score, fam, WINDOW, 500, np.random.default_rng(4))
    b = tr.score_risk(tr.zero_score, fam, WINDOW, 500, np.random.default_rng(4))
    assert a == b
