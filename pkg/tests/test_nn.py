import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from batchrl.nn import (AdamState, DenseNet, NumericError, adam_step, clip_by_norm,
                        cross_entropy_loss, dropout_masks, huber_loss, load_params, log_softmax,
                        logsumexp, quantile_huber_loss, read_net, save_params, softmax, write_net)


def fd_grad(f, params, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. ``params`` (mutated in place)."""
    g = np.zeros_like(params)
    for i in range(params.size):
        old = params[i]
        params[i] = old + h
        up = f()
        params[i] = old - h
        down = f()
        params[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b)))


# -- DenseNet ---------------------------------------------------------------

def test_param_count():
    net = DenseNet([4, 8, 3])
    assert net.size == (4 + 1) * 8 + (8 + 1) * 3
    assert DenseNet([4, 8, 3], use_bias=False).size == 4 * 8 + 8 * 3


def test_zero_net_outputs():
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert np.array_equal(DenseNet([3, 4, 2]).forward(x), np.zeros((5, 2)))
    probs = DenseNet([3, 4, 4], output="softmax").forward(x)
    assert np.allclose(probs, 0.25, atol=1e-15)


def test_identity_linear_layer():
    net = DenseNet([3, 3], use_bias=False)
    net.weights[0][...] = np.eye(3)
    x = np.array([1.5, -2.0, 0.25])
    assert np.array_equal(net.forward(x), x)


def test_hand_two_layer_forward():
    net = DenseNet([2, 2, 1])
    net.weights[0][...] = np.eye(2)
    net.weights[1][...] = np.array([[1.0], [1.0]])
    assert net.forward(np.array([-1.0, 2.0]))[0] == 2.0


def test_forward_dimension_mismatch():
    with pytest.raises(ValueError):
        DenseNet([3, 2]).forward(np.zeros(4))


def test_multi_head_shape():
    net = DenseNet([3, 6, 2 * 5], head_count=5, rng=np.random.default_rng(0))
    assert net.forward(np.zeros((7, 3))).shape == (7, 2, 5)


def test_single_parameter_gradient():
    net = DenseNet([1, 1], use_bias=False)
    net.weights[0][...] = 0.7
    _, cache = net.forward_cache(np.array([[3.0]]))
    assert net.backward(cache, np.array([[1.0]]))[0] == 3.0


def test_zero_upstream_zero_gradient():
    net = DenseNet([3, 5, 2], rng=np.random.default_rng(1))
    _, cache = net.forward_cache(np.ones((4, 3)))
    assert np.array_equal(net.backward(cache, np.zeros((4, 2))), np.zeros(net.size))


def test_backward_shape_mismatch():
    net = DenseNet([3, 5, 2], rng=np.random.default_rng(1))
    _, cache = net.forward_cache(np.ones((4, 3)))
    with pytest.raises(ValueError):
        net.backward(cache, np.zeros((4, 3)))


@pytest.mark.parametrize("output", ["linear", "softmax", "relu"])
def test_backward_matches_finite_differences(output):
    rng = np.random.default_rng(3)
    net = DenseNet([4, 6, 5, 3], output=output, rng=rng)
    net.params += rng.normal(scale=0.1, size=net.size)  # non-zero biases
    x = rng.normal(size=(6, 4))
    up = rng.normal(size=(6, 3))
    _, cache = net.forward_cache(x)
    analytic = net.backward(cache, up)
    numeric = fd_grad(lambda: float(np.sum(net.forward(x) * up)), net.params)
    assert rel_err(analytic, numeric) < 1e-4


def test_backward_with_dropout_masks_matches_finite_differences():
    rng = np.random.default_rng(4)
    net = DenseNet([4, 6, 3], rng=rng)
    x = rng.normal(size=(5, 4))
    up = rng.normal(size=(5, 3))
    masks = dropout_masks(net.layer_sizes, 5, 0.3, rng)
    _, cache = net.forward_cache(x, masks, 0.3)
    analytic = net.backward(cache, up)
    numeric = fd_grad(lambda: float(np.sum(net.forward_cache(x, masks, 0.3)[0] * up)),
                      net.params)
    assert rel_err(analytic, numeric) < 1e-4


def test_dropout_zero_probability_equals_unmasked():
    rng = np.random.default_rng(5)
    net = DenseNet([3, 8, 2], rng=rng)
    x = rng.normal(size=(4, 3))
    masks = dropout_masks(net.layer_sizes, 4, 0.0, rng)
    assert np.array_equal(net.forward_cache(x, masks, 0.0)[0], net.forward(x))


def test_inverted_dropout_expectation():
    # single linear layer: the masked output is linear in the mask, so the
    # average over masks converges to the unmasked output
    rng = np.random.default_rng(6)
    net = DenseNet([5, 3], rng=rng)
    x = rng.normal(size=(1, 5))
    n = 10_000
    xs = np.repeat(x, n, axis=0)
    masks = dropout_masks(net.layer_sizes, n, 0.2, rng)
    outs = net.forward_cache(xs, masks, 0.2)[0]
    se = outs.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(outs.mean(axis=0) - net.forward(x)[0]) < 3 * se + 1e-12)


def test_binary_round_trip(tmp_path):
    net = DenseNet([4, 7, 6], head_count=3, output="linear", rng=np.random.default_rng(7))
    save_params(net, tmp_path / "n.bin")
    back = load_params(tmp_path / "n.bin")
    assert back.layer_sizes == net.layer_sizes and back.head_count == 3
    assert back.params.tobytes() == net.params.tobytes()
    raw = (tmp_path / "n.bin").read_bytes()
    # little-endian float64 payload at the end
    assert raw[-8 * net.size:] == net.params.astype("<f8").tobytes()


def test_binary_truncated():
    net = DenseNet([2, 2])
    buf = io.BytesIO()
    write_net(buf, net)
    with pytest.raises(ValueError):
        read_net(io.BytesIO(buf.getvalue()[:-3]))


@settings(max_examples=50, deadline=None)
@given(scale=st.floats(1e-3, 1e3), seed=st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(scale, seed):
    z = np.random.default_rng(seed).normal(size=(4, 6)) * scale
    assert np.allclose(softmax(z).sum(axis=1), 1.0, atol=1e-9)


# -- Adam -------------------------------------------------------------------

def test_adam_zero_gradient_no_change():
    p = np.array([1.0, -2.0])
    s = AdamState(2)
    adam_step(s, p, np.zeros(2))
    assert np.array_equal(p, [1.0, -2.0]) and s.step == 1


def test_adam_first_step_magnitude():
    p = np.array([0.0])
    s = AdamState(1, learning_rate=0.01, adam_epsilon=1e-12)
    adam_step(s, p, np.array([1.0]))
    # bias-corrected m_hat = v_hat = 1, so the step is lr * 1 / (1 + eps)
    assert p[0] == pytest.approx(-0.01, rel=1e-9)


def test_adam_deterministic():
    rng = np.random.default_rng(8)
    grads = rng.normal(size=(20, 5))
    pa, pb = np.zeros(5), np.zeros(5)
    sa, sb = AdamState(5), AdamState(5)
    for g in grads:
        adam_step(sa, pa, g)
        adam_step(sb, pb, g.copy())
    assert pa.tobytes() == pb.tobytes()


def test_adam_non_finite_gradient():
    with pytest.raises(NumericError) as err:
        adam_step(AdamState(2), np.zeros(2), np.array([1.0, np.nan]), iteration=17)
    assert err.value.iteration == 17


def test_clip_by_norm():
    g = np.array([3.0, 4.0])
    assert np.allclose(clip_by_norm(g, 1.0), [0.6, 0.8])
    assert np.array_equal(clip_by_norm(g, 10.0), g)


# -- losses -----------------------------------------------------------------

def test_huber_branches():
    assert huber_loss(0.5, 1.0) == (0.125, 0.5)
    loss, d = huber_loss(-2.0, 1.0)
    assert loss == 1.5 and d == -1.0
    # knee continuity
    assert huber_loss(1.0, 1.0)[0] == 0.5 == 0.5 * 1.0 ** 2 == 1.0 * (1.0 - 0.5)


@settings(max_examples=50, deadline=None)
@given(kappa=st.floats(0.1, 5.0), eps=st.floats(1e-9, 1e-6))
def test_huber_smooth_at_knee(kappa, eps):
    lo, dlo = huber_loss(kappa - eps, kappa)
    hi, dhi = huber_loss(kappa + eps, kappa)
    assert abs(hi - lo) < 3 * kappa * eps
    assert abs(dhi - dlo) < 2 * eps


def test_quantile_huber_hand_value():
    loss, _ = quantile_huber_loss(-0.4, 0.25, 1.0)
    assert abs(loss - 0.06) < 1e-12
    assert quantile_huber_loss(0.0, 0.3, 1.0)[0] == 0.0


@settings(max_examples=50, deadline=None)
@given(delta=st.floats(-10, 10), kappa=st.floats(0.1, 3))
def test_quantile_midpoint_is_half_huber(delta, kappa):
    assert quantile_huber_loss(delta, 0.5, kappa)[0] == 0.5 * huber_loss(delta, kappa)[0]


@settings(max_examples=50, deadline=None)
@given(delta=st.floats(-10, 10).filter(lambda d: d != 0), tau=st.floats(0.01, 0.99),
       kappa=st.floats(0.1, 3))
def test_quantile_weights_complementary(delta, tau, kappa):
    # at a fixed level the weights of +delta and -delta sum to one
    pair = quantile_huber_loss(delta, tau, kappa)[0] + quantile_huber_loss(-delta, tau, kappa)[0]
    assert pair == pytest.approx(huber_loss(delta, kappa)[0], rel=1e-12)
    # mirroring both the residual and the level leaves the loss unchanged
    assert quantile_huber_loss(delta, tau, kappa)[0] == pytest.approx(
        quantile_huber_loss(-delta, 1 - tau, kappa)[0], rel=1e-12)


def test_logsumexp_values():
    assert logsumexp([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)
    assert logsumexp([3.5]) == 3.5
    assert abs(logsumexp([1000.0, 1000.0]) - (1000 + math.log(2))) < 1e-12


def test_cross_entropy_values():
    loss, grad = cross_entropy_loss(np.zeros(4), 2)
    assert abs(loss - math.log(4)) < 1e-12
    assert np.allclose(grad, [0.25, 0.25, -0.75, 0.25])
    loss, _ = cross_entropy_loss(np.array([1000.0, 0.0]), 0)
    assert 0.0 <= loss < 1e-12
    with pytest.raises(ValueError):
        cross_entropy_loss(np.zeros(3), 3)


def test_cross_entropy_gradient_fd():
    rng = np.random.default_rng(9)
    z = rng.normal(size=5)
    _, grad = cross_entropy_loss(z, 1)
    numeric = fd_grad(lambda: cross_entropy_loss(z, 1)[0], z)
    assert rel_err(grad, numeric) < 1e-4


def test_log_softmax_consistent():
    z = np.random.default_rng(10).normal(size=(3, 4))
    assert np.allclose(np.exp(log_softmax(z)), softmax(z))
