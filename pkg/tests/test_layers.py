import numpy as np
import pytest

from src import layers


def numeric_grad(f, x, eps=1e-6):
    """Central differences of the scalar f() with respect to every entry of x (modified in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        plus = f()
        x[idx] = old - eps
        minus = f()
        x[idx] = old
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def rel_error(analytic, numeric):
    return np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(analytic)), 1e-12)


@pytest.fixture
def gen():
    return np.random.default_rng(3)


def naive_conv(x, w, b):
    n, c, d, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], d, h, wd))
    for o in range(w.shape[0]):
        for i in range(d):
            for j in range(h):
                for k in range(wd):
                    out[:, o, i, j, k] = np.sum(xp[:, :, i:i + 3, j:j + 3, k:k + 3] * w[o], axis=(1, 2, 3, 4)) + b[o]
    return out


def test_conv_forward_matches_direct_sum(gen):
    x = gen.standard_normal((2, 2, 4, 3, 5))
    w = gen.standard_normal((3, 2, 3, 3, 3))
    b = gen.standard_normal(3)
    out, _ = layers.conv3d_forward(x, w, b)
    np.testing.assert_allclose(out, naive_conv(x, w, b), atol=1e-12)


def test_conv_gradients(gen):
    x = gen.standard_normal((2, 2, 3, 4, 3))
    w = gen.standard_normal((2, 2, 3, 3, 3))
    b = gen.standard_normal(2)
    r = gen.standard_normal((2, 2, 3, 4, 3))
    loss = lambda: np.sum(layers.conv3d_forward(x, w, b)[0] * r)
    _, cache = layers.conv3d_forward(x, w, b)
    dx, dw, db = layers.conv3d_backward(r, cache)
    assert rel_error(dx, numeric_grad(loss, x)) < 1e-6
    assert rel_error(dw, numeric_grad(loss, w)) < 1e-6
    assert rel_error(db, numeric_grad(loss, b)) < 1e-6


def test_conv_backward_can_skip_input_gradient(gen):
    x = gen.standard_normal((1, 1, 3, 3, 3))
    w = gen.standard_normal((2, 1, 3, 3, 3))
    _, cache = layers.conv3d_forward(x, w, np.zeros(2))
    dx, dw, _ = layers.conv3d_backward(np.ones((1, 2, 3, 3, 3)), cache, need_dx=False)
    assert dx is None
    assert dw.shape == w.shape


def test_relu(gen):
    x = np.array([-1.0, 0.0, 2.0])
    out, mask = layers.relu_forward(x)
    np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(layers.relu_backward(np.ones(3), mask), [0.0, 0.0, 1.0])


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradients(gen, train):
    x = gen.standard_normal((3, 2, 2, 3, 2)) * 2.0 + 1.0
    gamma = gen.uniform(0.5, 1.5, 2)
    beta = gen.standard_normal(2)
    rm, rv = gen.standard_normal(2), gen.uniform(0.5, 2.0, 2)
    r = gen.standard_normal(x.shape)

    def loss():
        return np.sum(layers.batchnorm_forward(x, gamma, beta, rm, rv, train)[0] * r)

    _, cache, _ = layers.batchnorm_forward(x, gamma, beta, rm, rv, train)
    dx, dgamma, dbeta = layers.batchnorm_backward(r, cache)
    assert rel_error(dx, numeric_grad(loss, x)) < 1e-5
    assert rel_error(dgamma, numeric_grad(loss, gamma)) < 1e-6
    assert rel_error(dbeta, numeric_grad(loss, beta)) < 1e-6


def test_batchnorm_training_statistics(gen):
    x = gen.standard_normal((4, 3, 2, 2, 2)) * 3.0 + 5.0
    out, _, (mean, var) = layers.batchnorm_forward(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), True)
    per_channel = np.moveaxis(x, 1, 0).reshape(3, -1)
    np.testing.assert_allclose(mean, per_channel.mean(axis=1))
    np.testing.assert_allclose(var, per_channel.var(axis=1, ddof=1))
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3, 4)), 0.0, atol=1e-12)


def test_batchnorm_eval_uses_running_statistics():
    x = np.full((1, 1, 1, 1, 2), 3.0)
    out, _, _ = layers.batchnorm_forward(x, np.array([2.0]), np.array([1.0]), np.array([1.0]), np.array([4.0]), False, eps=0.0)
    np.testing.assert_allclose(out, 2.0 * (3.0 - 1.0) / 2.0 + 1.0)


def test_maxpool_ceil_mode_shape(gen):
    out, _ = layers.maxpool_forward(gen.standard_normal((2, 3, 5, 4, 3)))
    assert out.shape == (2, 3, 3, 2, 2)


def test_maxpool_values():
    x = np.arange(27, dtype=float).reshape(1, 1, 3, 3, 3)
    out, _ = layers.maxpool_forward(x)
    np.testing.assert_array_equal(out[0, 0, :, :, 0], [[13.0, 16.0], [22.0, 25.0]])
    assert out[0, 0, 1, 1, 1] == 26.0


def test_maxpool_gradients(gen):
    x = gen.permutation(np.arange(2 * 2 * 3 * 5 * 4, dtype=float)).reshape(2, 2, 3, 5, 4) * 0.1
    r = gen.standard_normal((2, 2, 2, 3, 2))
    loss = lambda: np.sum(layers.maxpool_forward(x)[0] * r)
    _, cache = layers.maxpool_forward(x)
    dx = layers.maxpool_backward(r, cache)
    assert dx.shape == x.shape
    np.testing.assert_allclose(dx, numeric_grad(loss, x), atol=1e-8)
    # every output routes its gradient to exactly one input
    assert np.count_nonzero(dx) == r.size


def test_linear_gradients(gen):
    x = gen.standard_normal((4, 5))
    w = gen.standard_normal((3, 5))
    b = gen.standard_normal(3)
    r = gen.standard_normal((4, 3))
    loss = lambda: np.sum(layers.linear_forward(x, w, b)[0] * r)
    _, cache = layers.linear_forward(x, w, b)
    dx, dw, db = layers.linear_backward(r, cache)
    assert rel_error(dx, numeric_grad(loss, x)) < 1e-7
    assert rel_error(dw, numeric_grad(loss, w)) < 1e-7
    assert rel_error(db, numeric_grad(loss, b)) < 1e-7
