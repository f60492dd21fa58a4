import numpy as np
import pytest
from hypothesis import given, strategies as st

from mapvae import diffcore as dc
from mapvae.errors import SizeError


def sig(x):
    return 1 / (1 + np.exp(-x))


def gru_reference(x, h, W, U, b):
    """Textbook GRU written gate by gate."""
    d = h.shape[-1]
    Wz, Wr, Wn = W[:, :d], W[:, d:2 * d], W[:, 2 * d:]
    Uz, Ur, Un = U[:, :d], U[:, d:2 * d], U[:, 2 * d:]
    bz, br, bn = b[:d], b[d:2 * d], b[2 * d:]
    z = sig(x @ Wz + h @ Uz + bz)
    r = sig(x @ Wr + h @ Ur + br)
    n = np.tanh(x @ Wn + (r * h) @ Un + bn)
    return (1 - z) * n + z * h


def random_point(seed, **shapes):
    r = np.random.default_rng(seed)
    return {k: r.normal(size=s) for k, s in shapes.items()}


# ---------------------------------------------------------------- tensor basics

def test_backward_accumulates_shared_use():
    x = dc.parameter([2.0, 3.0])
    y = dc.sum(dc.mul(x, x) + x)
    y.backward()
    np.testing.assert_allclose(x.grad, [5.0, 7.0])


def test_broadcast_add_unbroadcasts():
    a, b = dc.parameter(np.ones((4, 3))), dc.parameter(np.ones(3))
    dc.sum(a + b).backward()
    np.testing.assert_array_equal(b.grad, [4, 4, 4])


def test_elementwise_ops_gradcheck():
    point = random_point(0, a=(3, 4), b=(4,))

    def f(t):
        y = dc.mul(dc.sigmoid(t["a"]), dc.tanh(t["b"])) + dc.exp(dc.neg(t["a"])) * 0.1
        y = dc.reshape(dc.stack([y, dc.square(y)], axis=0), (2, 12))
        return dc.mean(dc.relu(y[:, 1:]) + 0.3 * y[:, 1:])

    assert dc.grad_check(f, point, tolerance=1e-4).passed


# ---------------------------------------------------------------- affine

def test_affine_identity_and_zero_weights():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(dc.affine(x, np.eye(3), np.zeros(3)).value, x)
    b = np.array([1.0, -2.0])
    np.testing.assert_array_equal(dc.affine(x, np.zeros((3, 2)), b).value, np.tile(b, (2, 1)))


def test_affine_shape_mismatch():
    with pytest.raises(SizeError):
        dc.affine(np.zeros((2, 3)), np.zeros((4, 2)))


def test_affine_gradcheck():
    point = random_point(1, x=(4, 3), W=(3, 5), b=(5,))
    rep = dc.grad_check(lambda t: dc.sum(dc.square(dc.affine(t["x"], t["W"], t["b"]))), point,
                        tolerance=1e-6)
    assert rep.passed, rep.errors


# ---------------------------------------------------------------- max pool

def test_max_pool_examples():
    np.testing.assert_array_equal(dc.set_max_pool(np.array([[1.0, 0], [0, 2]])).value, [1, 2])
    np.testing.assert_array_equal(dc.set_max_pool(np.array([[4.0, -1]])).value, [4, -1])


def test_max_pool_tie_routes_to_lowest_index():
    x = dc.parameter([[1.0, 0.0], [1.0, 0.0]])
    dc.sum(dc.set_max_pool(x)).backward()
    np.testing.assert_array_equal(x.grad, [[1, 1], [0, 0]])


@given(st.integers(0, 10_000), st.integers(1, 20))
def test_max_pool_permutation_invariant(seed, n):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, 5))
    np.testing.assert_array_equal(dc.set_max_pool(x).value, dc.set_max_pool(x[r.permutation(n)]).value)


def test_max_pool_gradcheck():
    point = random_point(2, x=(6, 4))
    assert dc.grad_check(lambda t: dc.sum(dc.square(dc.set_max_pool(t["x"]))), point).passed


# ---------------------------------------------------------------- GRU

def test_gru_zero_params_halves_hidden():
    p = dc.GRUParams(dc.Tensor(np.zeros((3, 12))), dc.Tensor(np.zeros((4, 12))),
                     dc.Tensor(np.zeros(12)))
    h = np.array([1.0, -2.0, 3.0, 0.5])
    np.testing.assert_allclose(dc.gru_step(np.ones(3), h, p).value, 0.5 * h, atol=1e-15)
    assert not dc.gru_step(np.zeros(3), np.zeros(4), p).value.any()


@given(st.integers(0, 10_000))
def test_gru_matches_reference(seed):
    pt = random_point(seed, x=(2, 3), h=(2, 4), W=(3, 12), U=(4, 12), b=(12,))
    p = dc.GRUParams(dc.Tensor(pt["W"]), dc.Tensor(pt["U"]), dc.Tensor(pt["b"]))
    np.testing.assert_allclose(dc.gru_step(pt["x"], pt["h"], p).value,
                               gru_reference(**pt), rtol=1e-12, atol=1e-14)


def test_gru_gradcheck():
    point = random_point(3, x=(3,), h=(4,), W=(3, 12), U=(4, 12), b=(12,))
    rep = dc.grad_check(lambda t: dc.sum(dc.square(dc.gru_step(
        t["x"], t["h"], dc.GRUParams(t["W"], t["U"], t["b"])))), point, tolerance=1e-4)
    assert rep.passed, rep.errors


# ---------------------------------------------------------------- KL and reparameterization

def test_kl_examples():
    assert float(dc.kl_diag_gaussian(np.zeros(7), np.ones(7)).value) == 0.0
    assert float(dc.kl_diag_gaussian([1.0], [1.0]).value) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        dc.kl_diag_gaussian([0.0], [0.0])


@given(st.integers(0, 10_000))
def test_kl_nonnegative(seed):
    r = np.random.default_rng(seed)
    assert float(dc.kl_diag_gaussian(r.normal(size=5), np.exp(r.normal(size=5))).value) >= 0


def test_kl_monte_carlo():
    r = np.random.default_rng(4)
    mu, sigma = np.array([0.5, -1.0, 0.2]), np.array([0.7, 1.3, 0.9])
    z = mu + sigma * r.standard_normal((1_000_000, 3))
    log_q = -0.5 * (((z - mu) / sigma) ** 2 + 2 * np.log(sigma)).sum(axis=1)
    log_p = -0.5 * (z ** 2).sum(axis=1)
    closed = float(dc.kl_diag_gaussian(mu, sigma).value)
    assert abs(np.mean(log_q - log_p) - closed) <= 0.01 * closed


def test_kl_gradcheck():
    point = {"mu": np.array([0.3, -0.8]), "s": np.array([0.6, 1.7])}
    assert dc.grad_check(lambda t: dc.kl_diag_gaussian(t["mu"], t["s"]), point).passed


def test_reparameterize_hooks():
    mu, sigma = np.array([1.0, 2.0]), np.array([0.5, 3.0])
    np.testing.assert_array_equal(dc.reparameterize(mu, sigma, eps=0.0).z.value, mu)
    g = dc.reparameterize(np.zeros(4), np.ones(4), seed=9)
    np.testing.assert_array_equal(g.z.value, g.eps)
    tiny = dc.reparameterize(mu, np.full(2, 1e-12), seed=1)
    np.testing.assert_allclose(tiny.z.value, mu, atol=1e-10)
    np.testing.assert_allclose(g.z.value, g.mu.value + g.eps * g.sigma.value, atol=1e-12)


def test_reparameterize_gradients():
    mu, sigma = dc.parameter([0.0, 1.0]), dc.parameter([1.0, 2.0])
    g = dc.reparameterize(mu, sigma, seed=3)
    dc.sum(g.z).backward()
    np.testing.assert_array_equal(mu.grad, [1, 1])
    np.testing.assert_array_equal(sigma.grad, g.eps)


def test_reparameterize_statistics():
    z = np.stack([dc.reparameterize(np.zeros(3), np.ones(3), seed=s).z.value
                  for s in range(100_000)])
    assert np.all(np.abs(z.mean(axis=0)) <= 0.02)
    assert np.all(np.abs(z.var(axis=0) - 1) <= 0.02)


# ---------------------------------------------------------------- batch norm

def test_batch_norm_standardizes():
    x = np.random.default_rng(5).normal(3, 2, size=(16, 4))
    out = dc.batch_norm(x, dc.BatchNormState.init(4), "train").value
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=0), 1, atol=1e-4)


def test_batch_norm_standardized_passthrough():
    x = np.random.default_rng(6).normal(size=(32, 3))
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    out = dc.batch_norm(x, dc.BatchNormState.init(3, eps=1e-12), "train").value
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_batch_norm_zero_variance_channel_finite():
    x = np.ones((8, 2))
    x[:, 1] = np.arange(8)
    assert np.all(np.isfinite(dc.batch_norm(x, dc.BatchNormState.init(2)).value))


def test_batch_norm_guards_and_eval():
    state = dc.BatchNormState.init(2)
    with pytest.raises(SizeError):
        dc.batch_norm(np.ones((1, 2)), state, "train")
    np.testing.assert_allclose(dc.batch_norm(np.ones((1, 2)), state, "eval").value, 1 / np.sqrt(1 + 1e-5))
    off = dc.BatchNormState.init(2, enabled=False)
    np.testing.assert_array_equal(dc.batch_norm(np.ones((1, 2)), off, "train").value, [[1, 1]])


def test_batch_norm_running_stats():
    state = dc.BatchNormState.init(1, momentum=0.5)
    dc.batch_norm(np.array([[0.0], [2.0]]), state, "train")
    np.testing.assert_allclose(state.running_mean, [0.5])
    np.testing.assert_allclose(state.running_var, [0.5 * 1 + 0.5 * 2.0])


def test_batch_norm_gradcheck():
    point = random_point(7, x=(5, 3))
    state = dc.BatchNormState.init(3)
    state.gamma.value[:] = [1.5, 0.5, 2.0]
    w = np.random.default_rng(8).normal(size=(5, 3))
    rep = dc.grad_check(lambda t: dc.sum(dc.mul(dc.batch_norm(t["x"], state), w)), point)
    assert rep.passed, rep.errors


# ---------------------------------------------------------------- point losses

def test_emd_loss_values_and_gradient():
    r = np.random.default_rng(9)
    pred, target = r.normal(size=(2, 6, 3)), r.normal(size=(2, 6, 3))
    from mapvae.transport import emd_bruteforce
    out = dc.emd_loss(pred, target)
    np.testing.assert_allclose(out.value, [emd_bruteforce(p, t).cost for p, t in zip(pred, target)],
                               atol=1e-9)
    rep = dc.grad_check(lambda t: dc.sum(dc.emd_loss(t["p"], target)), {"p": pred}, step=1e-6)
    assert rep.passed, rep.errors


def test_chamfer_loss_matches_transport_and_gradcheck():
    from mapvae.transport import chamfer
    r = np.random.default_rng(10)
    pred, target = r.normal(size=(2, 7, 3)), r.normal(size=(2, 5, 3))
    np.testing.assert_allclose(dc.chamfer_loss(pred, target).value,
                               [chamfer(p, t) for p, t in zip(pred, target)], rtol=1e-12)
    rep = dc.grad_check(lambda t: dc.sum(dc.chamfer_loss(t["p"], target)), {"p": pred}, step=1e-6)
    assert rep.passed, rep.errors


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient_no_move():
    params = {"x": np.array([1.0, -2.0])}
    state = dc.AdamState()
    dc.adam_step(params, {"x": np.zeros(2)}, state)
    np.testing.assert_array_equal(params["x"], [1.0, -2.0])
    assert state.t == 1


def test_adam_descends_quadratic():
    params = {"x": np.array([1.0])}
    dc.adam_step(params, {"x": 2 * params["x"]}, dc.AdamState(), dc.AdamHyper(lr=0.1))
    assert params["x"][0] < 1.0


def test_adam_deterministic():
    def run():
        params = {"x": np.array([1.0, 2.0, 3.0])}
        state = dc.AdamState()
        for _ in range(50):
            dc.adam_step(params, {"x": np.sin(params["x"]) + params["x"]}, state)
        return params["x"]
    assert run().tobytes() == run().tobytes()


def test_adam_first_step_size_is_lr():
    params = {"x": np.array([5.0])}
    dc.adam_step(params, {"x": np.array([123.0])}, dc.AdamState(), dc.AdamHyper(lr=0.01))
    assert params["x"][0] == pytest.approx(4.99, abs=1e-9)


# ---------------------------------------------------------------- grad_check itself

def test_grad_check_quadratic_exact():
    A = np.random.default_rng(11).normal(size=(4, 4))
    A = A @ A.T
    rep = dc.grad_check(lambda t: dc.sum(dc.mul(t["x"], dc.affine(t["x"], A))),
                        {"x": np.random.default_rng(12).normal(size=4)})
    assert rep.max_error <= 1e-8


def test_grad_check_flags_max_pool_tie():
    rep = dc.grad_check(lambda t: dc.sum(dc.set_max_pool(t["x"])), {"x": np.array([[1.0], [1.0]])})
    assert rep.excluded["x"] == 2 and rep.checked["x"] == 0


def test_grad_check_detects_wrong_gradient():
    def bad(t):
        x = t["x"]
        return dc._node(float((x.value ** 2).sum()), (x,), lambda g: x._accumulate(g * x.value))
    rep = dc.grad_check(bad, {"x": np.array([1.0, 2.0])})
    assert not rep.passed
