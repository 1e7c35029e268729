import numpy as np
import pytest

from olive.mlp import TinyMlp, softmax


def test_size_default_shape():
    assert TinyMlp(32, 16, 10).size == 698


def test_gradient_matches_finite_differences():
    net = TinyMlp(5, 4, 3)
    rng = np.random.default_rng(0)
    theta = net.init_params(rng).astype(np.float64) + rng.normal(0, 0.1, net.size)
    X = rng.normal(size=(7, 5))
    y = rng.integers(0, 3, 7)
    _, g = net.loss_and_grad(theta, X, y)
    eps = 1e-6
    num = np.empty_like(theta)
    for i in range(net.size):
        e = np.zeros_like(theta)
        e[i] = eps
        num[i] = (net.loss_and_grad(theta + e, X, y)[0] - net.loss_and_grad(theta - e, X, y)[0]) / (2 * eps)
    np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-7)


def test_soft_targets_equal_hard_targets():
    net = TinyMlp(3, 4, 3)
    theta = net.init_params(np.random.default_rng(1))
    X = np.random.default_rng(2).normal(size=(4, 3))
    y = np.array([0, 2, 1, 2])
    a = net.loss_and_grad(theta, X, y)
    b = net.loss_and_grad(theta, X, np.eye(3)[y])
    assert a[0] == pytest.approx(b[0])
    np.testing.assert_allclose(a[1], b[1])


def test_fit_learns_separable_data():
    rng = np.random.default_rng(3)
    X = np.concatenate([rng.normal(-2, 0.5, (50, 2)), rng.normal(2, 0.5, (50, 2))])
    y = np.repeat([0, 1], 50)
    net = TinyMlp(2, 8, 2)
    theta = net.fit(net.init_params(rng), X, y, lr=0.5, epochs=50)
    assert net.accuracy(theta, X, y) > 0.95


def test_deterministic_given_seed():
    net = TinyMlp(4, 3, 2, dropout=0.5)
    a = net.init_params(np.random.default_rng(5))
    b = net.init_params(np.random.default_rng(5))
    assert a.tobytes() == b.tobytes()
    X = np.ones((3, 4))
    ga = net.loss_and_grad(a, X, [0, 1, 0], np.random.default_rng(1))[1]
    gb = net.loss_and_grad(b, X, [0, 1, 0], np.random.default_rng(1))[1]
    assert np.array_equal(ga, gb)


def test_softmax_rows_sum_to_one():
    p = softmax(np.array([[1000.0, 0.0], [1.0, 1.0]]))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert p[1, 0] == pytest.approx(0.5)


def test_wrong_parameter_count():
    with pytest.raises(ValueError):
        TinyMlp(2, 2, 2).logits(np.zeros(3), np.zeros((1, 2)))
