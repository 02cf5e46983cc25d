import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ringflow.errors import DivergenceError, ModelFormatError
from ringflow.neural import (
    Adam,
    DenseNet,
    adam_step,
    gaussian_log_prob,
    gaussian_sample,
    log_sigmoid_deriv,
    net_backward,
    net_forward,
    read_model_file,
    sigmoid,
    write_model_file,
)


def flat_fd(net, x, dy, h=1e-5):
    """Central differences of <dy, net(x)> with respect to every parameter."""
    out = []
    for p in net.params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = np.sum(dy * net(x))
            p[idx] = old - h
            dn = np.sum(dy * net(x))
            p[idx] = old
            g[idx] = (up - dn) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b)))


def test_zero_net_outputs_zero():
    net = DenseNet((3, 8, 2), zero=True)
    np.testing.assert_array_equal(net(np.array([1.0, -2.0, 3.0])), [0.0, 0.0])


def test_identity_linear_layer():
    net = DenseNet((3, 3), zero=True)
    net.W[0][...] = np.eye(3)
    x = np.array([0.3, -1.2, 5.0])
    np.testing.assert_array_equal(net(x), x)


def test_forward_is_deterministic_and_batched():
    net = DenseNet((4, 16, 16, 2), rng=np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(5, 4))
    y1, y2 = net(x), net(x)
    np.testing.assert_array_equal(y1, y2)
    np.testing.assert_allclose(y1[2], net(x[2]), rtol=1e-14)


def test_zero_upstream_gives_zero_grads():
    net = DenseNet((3, 5, 2), rng=np.random.default_rng(0))
    y, cache = net_forward(net, np.ones(3))
    grads, dx = net_backward(net, cache, np.zeros(2))
    assert all(np.all(g == 0) for g in grads) and np.all(dx == 0)


def test_linear_net_outer_product():
    net = DenseNet((3, 2), rng=np.random.default_rng(0))
    x = np.array([1.0, 2.0, -1.0])
    dy = np.array([0.5, -2.0])
    _, cache = net.forward(x)
    grads, dx = net.backward(cache, dy)
    np.testing.assert_allclose(grads[0], np.outer(dy, x), rtol=1e-15)
    np.testing.assert_allclose(grads[1], dy)
    np.testing.assert_allclose(dx, net.W[0].T @ dy, rtol=1e-15)


@pytest.mark.parametrize("sizes", [(4, 64, 64, 1), (24, 64, 64, 2), (3, 7, 5, 2)])
def test_backward_matches_finite_differences(sizes):
    r = np.random.default_rng(sum(sizes))
    net = DenseNet(sizes, rng=r)
    x = r.normal(size=(3, sizes[0]))
    dy = r.normal(size=(3, sizes[-1]))
    _, cache = net.forward(x)
    grads, dx = net.backward(cache, dy)
    for g, fd in zip(grads, flat_fd(net, x, dy)):
        assert rel_err(g, fd) <= 1e-4
    fdx = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = 1e-5
        fdx[idx] = (np.sum(dy * net(x + e)) - np.sum(dy * net(x - e))) / 2e-5
    assert rel_err(dx, fdx) <= 1e-4


def test_stale_cache_detected():
    net = DenseNet((2, 3, 1), rng=np.random.default_rng(0))
    _, cache = net.forward(np.ones(2))
    net.touch()
    with pytest.raises(RuntimeError):
        net.backward(cache, np.ones(1))


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    opt = Adam(p, lr=0.1)
    adam_step(p, [np.zeros(2)], opt)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_adam_zero_gradient_decays_moments():
    p = [np.array([1.0])]
    opt = Adam(p, lr=0.1)
    opt.step(p, [np.array([2.0])])
    m, v = opt.m[0].copy(), opt.v[0].copy()
    opt.step(p, [np.zeros(1)])
    np.testing.assert_allclose(opt.m[0], 0.9 * m)
    np.testing.assert_allclose(opt.v[0], 0.999 * v)


def test_adam_first_step_hand_computed():
    g = np.array([0.3, -4.0])
    p = [np.array([1.0, 1.0])]
    opt = Adam(p, lr=1e-3)
    opt.step(p, [g])
    m_hat = (0.1 * g) / 0.1
    v_hat = (0.001 * g * g) / 0.001
    expected = 1.0 - 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8)
    np.testing.assert_allclose(p[0], expected, rtol=1e-12)
    np.testing.assert_allclose(p[0], [1.0 - 1e-3, 1.0 + 1e-3], rtol=1e-7)


def test_adam_constant_gradient_moves_monotonically():
    p = [np.array([0.0])]
    opt = Adam(p, lr=0.01)
    prev = 0.0
    for _ in range(50):
        opt.step(p, [np.array([2.0])])
        assert p[0][0] < prev
        prev = p[0][0]


def test_adam_refuses_non_finite_gradients():
    p = [np.array([1.0])]
    opt = Adam(p)
    with pytest.raises(DivergenceError):
        opt.step(p, [np.array([np.nan])])
    assert p[0][0] == 1.0 and opt.t == 0


def test_adam_clips_global_norm():
    p = [np.array([0.0, 0.0])]
    opt = Adam(p, lr=1.0, max_grad_norm=1.0)
    opt.step(p, [np.array([30.0, 40.0])])
    np.testing.assert_allclose(opt.m[0], 0.1 * np.array([0.6, 0.8]))


def test_gaussian_log_prob_examples():
    assert gaussian_log_prob([0.0], [1.0], [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    assert gaussian_log_prob([0.0], [1.0], [0.0]) == pytest.approx(-0.918939, abs=1e-6)
    assert gaussian_log_prob([0.0], [1.0], [1.0]) == pytest.approx(-1.418939, abs=1e-6)
    d = gaussian_log_prob([0.3], [1.0], [0.3]) - gaussian_log_prob([0.3], [2.0], [0.3])
    assert d == pytest.approx(math.log(2), abs=1e-15)


def test_gaussian_sample_properties():
    x, eps = gaussian_sample(np.array([2.0]), 1e-300, np.random.default_rng(0))
    assert x[0] == 2.0
    a, _ = gaussian_sample(np.zeros(3), 1.0, np.random.default_rng(4))
    b, _ = gaussian_sample(np.zeros(3), 1.0, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)
    big, _ = gaussian_sample(np.zeros(100_000), 1.0, np.random.default_rng(0))
    assert abs(big.mean()) < 0.02 and abs(big.std() - 1) < 0.02


@given(st.floats(-30, 30))
def test_log_sigmoid_deriv_stable(z):
    s = sigmoid(z)
    val = log_sigmoid_deriv(z)
    assert np.isfinite(val)
    if abs(z) < 20:
        assert val == pytest.approx(math.log(s * (1 - s)), rel=1e-9)


def test_model_file_round_trip(tmp_path):
    net = DenseNet((4, 6, 2), rng=np.random.default_rng(3))
    path = tmp_path / "m.bin"
    write_model_file(path, "policy", {"k": "v"}, {"actor": net}, {"log_std": np.array([-0.5])})
    role, meta, nets, vecs = read_model_file(path)
    assert role == "policy" and meta == {"k": "v"}
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(nets["actor"](x), net(x))
    np.testing.assert_array_equal(vecs["log_std"], [-0.5])


@pytest.mark.parametrize("cut", [4, 20, -8])
def test_truncated_model_file_rejected(tmp_path, cut):
    path = tmp_path / "m.bin"
    write_model_file(path, "generator", {}, {"net": DenseNet((2, 2), rng=np.random.default_rng(0))}, {})
    blob = path.read_bytes()
    path.write_bytes(blob[:cut])
    with pytest.raises(ModelFormatError):
        read_model_file(path)


def test_corrupted_payload_rejected(tmp_path):
    path = tmp_path / "m.bin"
    write_model_file(path, "generator", {}, {"net": DenseNet((2, 2), rng=np.random.default_rng(0))}, {})
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ModelFormatError):
        read_model_file(path)
