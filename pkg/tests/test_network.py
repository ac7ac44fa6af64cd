import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distilab.network import (
    RELU,
    NetworkParams,
    Surrogate,
    UndefinedDerivativeError,
    forward,
    grad_a,
    grad_w,
    grad_w_many,
    init_symmetric,
    kernel,
    loss,
    reinit_bias,
    surrogate_eval,
)
from distilab.task_model import LabeledSet

SP = Surrogate("softplus", 4.0)


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def random_net(rng, d, L):
    return NetworkParams(rng.standard_normal(L), rng.standard_normal((d, L)), rng.standard_normal(L))


def test_init_symmetric_properties():
    th = init_symmetric(7, 12, seed=3)
    assert th.is_mirror_symmetric()
    np.testing.assert_allclose(np.linalg.norm(th.W, axis=0), 1.0, atol=1e-12)
    np.testing.assert_array_equal(th.W, th.W[:, ::-1])
    np.testing.assert_array_equal(th.a, -th.a[::-1])
    assert set(np.abs(th.a)) == {1.0} and np.all(th.b == 0)
    X = np.random.default_rng(0).standard_normal((100, 7))
    assert np.max(np.abs(forward(th, X))) <= 1e-12
    with pytest.raises(ValueError):
        init_symmetric(3, 5, 0)


def test_forward_examples():
    e1 = np.array([1.0, 0.0])
    th = NetworkParams([1.0, -1.0], np.column_stack([e1, e1]), [0.0, 0.0])
    assert forward(th, e1) == 0.0
    th2 = th.with_(a=np.array([1.0, 1.0]))
    x = np.array([0.7, -2.0])
    assert forward(th2, x) == pytest.approx(2 * 0.7)
    assert forward(th2, -x) == 0.0


def test_forward_batch_over_labeled_set():
    rng = np.random.default_rng(1)
    th = random_net(rng, 3, 4)
    D = LabeledSet(rng.standard_normal((5, 3)), np.zeros(5))
    np.testing.assert_allclose(forward(th, D), [forward(th, x) for x in D.X], rtol=1e-14, atol=1e-15)


def test_kernel_examples():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((6, 3))
    assert np.all(kernel(NetworkParams(np.zeros(4), np.zeros((3, 4)), np.zeros(4)), X) == 0)
    assert np.all(kernel(NetworkParams(np.zeros(4), np.zeros((3, 4)), np.ones(4)), X) == 1)
    th = NetworkParams([1.0, 1.0], np.array([[1.0, 0.0], [0.0, 1.0]]), [-0.5, 0.0])
    assert kernel(th, np.array([[1.0, 0.0]]))[0, 0] == pytest.approx(0.5)


def test_kernel_permutation_equivariant():
    rng = np.random.default_rng(3)
    th = random_net(rng, 4, 6)
    X = rng.standard_normal((9, 4))
    perm = rng.permutation(9)
    np.testing.assert_array_equal(kernel(th, X[perm]), kernel(th, X)[:, perm])


def test_grad_w_at_symmetric_init_closed_form():
    rng = np.random.default_rng(4)
    th = init_symmetric(5, 8, 0)
    D = LabeledSet(rng.standard_normal((30, 5)), rng.standard_normal(30))
    G = grad_w(th, D)
    S = (D.X @ th.W > 0).astype(float)
    expected = -(D.X.T @ (D.y[:, None] * S)) / D.N * th.a
    np.testing.assert_allclose(G, expected, atol=1e-14)
    assert np.all(grad_w(th, LabeledSet(D.X, np.zeros(30))) == 0)
    with pytest.raises(ValueError):
        grad_w(th, LabeledSet(np.zeros((0, 5)), np.zeros(0)))


def test_relu_derivative_at_zero_is_zero():
    th = NetworkParams([1.0], np.array([[1.0]]), [0.0])
    D = LabeledSet(np.array([[0.0]]), np.array([1.0]))
    assert grad_w(th, D)[0, 0] == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31))
def test_grad_w_finite_difference(d, L, N, seed):
    rng = np.random.default_rng(seed)
    th = random_net(rng, d, L)
    D = LabeledSet(rng.standard_normal((N, d)), rng.standard_normal(N))
    G = grad_w(th, D, SP)
    fd = central_diff(lambda W: loss(th.with_(W=W), D, SP), np.array(th.W))
    np.testing.assert_allclose(G, fd, rtol=1e-5, atol=1e-8 * max(1.0, np.abs(fd).max()))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.floats(0, 1), st.integers(0, 2**31))
def test_grad_a_finite_difference(d, L, N, lam, seed):
    rng = np.random.default_rng(seed)
    th = random_net(rng, d, L)
    D = LabeledSet(rng.standard_normal((N, d)), rng.standard_normal(N))

    def obj(a):
        t = th.with_(a=a)
        return loss(t, D) + 0.5 * lam * a @ a

    fd = central_diff(obj, np.array(th.a))
    np.testing.assert_allclose(grad_a(th, D, lam), fd, rtol=1e-5, atol=1e-8 * max(1.0, np.abs(fd).max()))


def test_grad_a_examples():
    rng = np.random.default_rng(5)
    th = random_net(rng, 3, 4).with_(a=np.zeros(4))
    D = LabeledSet(rng.standard_normal((7, 3)), rng.standard_normal(7))
    K = kernel(th, D.X)
    np.testing.assert_allclose(grad_a(th, D), -K @ D.y / 7, atol=1e-14)
    a = rng.standard_normal(4)
    D2 = LabeledSet(D.X, K.T @ a)
    assert np.abs(grad_a(th.with_(a=a), D2)).max() <= 1e-12


def test_grad_w_many_matches_single():
    rng = np.random.default_rng(6)
    D = LabeledSet(rng.standard_normal((50, 4)), rng.standard_normal(50))
    nets = [init_symmetric(4, 6, s) for s in range(3)] + [random_net(rng, 4, 6)]
    for G, th in zip(grad_w_many(nets, D), nets):
        np.testing.assert_allclose(G, grad_w(th, D), atol=1e-13)


def test_reinit_bias():
    th = init_symmetric(4, 10_000, 0)
    a, b = reinit_bias(th, 5), reinit_bias(th, 5)
    np.testing.assert_array_equal(a.b, b.b)
    np.testing.assert_array_equal(a.a, th.a)
    np.testing.assert_array_equal(a.W, th.W)
    n = a.L
    assert abs(a.b.mean()) <= 5 / np.sqrt(n)
    assert abs(a.b.var() - 1) <= 5 * np.sqrt(2 / n)


def test_surrogate_examples():
    h, d1, d2 = surrogate_eval(Surrogate("softplus", 4.0), 0.0)
    assert d1 == pytest.approx(0.5) and d2 == pytest.approx(1.0)
    assert h == pytest.approx(np.log(2) / 4)
    assert Surrogate("softplus", 8).d1(60.0) == pytest.approx(1.0)
    with pytest.raises(UndefinedDerivativeError):
        surrogate_eval(RELU, 0.3)
    assert surrogate_eval(RELU, 0.3, need_second=False)[1] == 1.0
    with pytest.raises(ValueError):
        Surrogate("softplus", 0.0)


@pytest.mark.parametrize("gamma", [2.0, 8.0, 32.0])
def test_softplus_derivatives_consistent(gamma):
    s = Surrogate("softplus", gamma)
    t = np.linspace(-1, 1, 41)
    eps = 1e-6
    np.testing.assert_allclose(s.d1(t), (s.h(t + eps) - s.h(t - eps)) / (2 * eps), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(s.d2(t), (s.d1(t + eps) - s.d1(t - eps)) / (2 * eps), rtol=1e-5, atol=1e-8)
    assert np.all(s.d2(t) > 0)
    assert np.all(np.isfinite(s.h(np.array([-800.0, 800.0]))))


def test_surrogate_parse():
    assert Surrogate.parse("softplus:4") == Surrogate("softplus", 4.0)
    assert Surrogate.parse("relu") == RELU
    assert Surrogate.parse("quadratic").d2(0.3) == 1.0


def test_params_flat_and_csv_roundtrip(tmp_path):
    th = random_net(np.random.default_rng(7), 3, 4)
    v = th.flat()
    np.testing.assert_array_equal(v[:4], th.a)
    np.testing.assert_array_equal(v[4:7], th.W[:, 0])
    th.to_csv(tmp_path / "p.csv")
    back = NetworkParams.from_csv(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.flat(), v)
