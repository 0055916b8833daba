import threading

import numpy as np
import pytest

from scae import tensor as T
from scae.errors import ContractError, DimensionError, NumericError
from scae.tensor import Tensor

from gradcases import CASES, MAX_REL_ERROR, worst_error
from oracles import conv2d_loops, conv_transpose2d_loops, numeric_grad, rel_error


@pytest.mark.parametrize("op", sorted(CASES))
def test_gradient_matches_central_differences(op):
    assert worst_error(op, cases=25, seed=1) <= MAX_REL_ERROR


def test_linear_map_gradient_is_input():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    w = Tensor(np.ones((2, 3)), requires_grad=True)
    T.backward(T.sum_all(T.mul(w, Tensor(x))))
    np.testing.assert_array_equal(w.grad, x)


def test_backward_twice_raises():
    w = Tensor(np.ones(3), requires_grad=True)
    loss = T.sum_all(T.mul(w, 2.0))
    T.backward(loss)
    with pytest.raises(ContractError):
        T.backward(loss)


def test_backward_needs_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.mul(w, 2.0))


def test_reusing_consumed_graph_raises():
    w = Tensor(np.ones(3), requires_grad=True)
    h = T.mul(w, 2.0)
    T.backward(T.sum_all(h))
    with pytest.raises(ContractError):
        T.add(h, 1.0)


def test_gradients_accumulate_over_shared_use():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    T.backward(T.sum_all(T.add(T.mul(w, w), T.mul(w, 3.0))))
    np.testing.assert_allclose(w.grad, 2 * w.data + 3.0)


def test_no_grad_records_nothing():
    w = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.mul(w, 2.0)
    assert not y.requires_grad


def test_graphs_are_per_thread():
    seen = []

    def worker():
        seen.append(T.current_graph())

    t = threading.Thread(target=worker)
    t.start()
    t.join()
    assert seen[0] is not T.current_graph()


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_forward_raises():
    with pytest.raises(NumericError):
        T.mul(Tensor(np.array([np.float32(3e38)])), 10.0)


def test_binary_ops_need_equal_shapes():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


@pytest.mark.parametrize(
    "d, beta, expected",
    [(0.5, 1.0, 0.125), (2.0, 1.0, 1.5), (0.0, 1.0, 0.0), (1.0, 2.0, 0.25)],
)
def test_huber_values(d, beta, expected):
    out = T.huber_loss(Tensor(np.array([d])), Tensor(np.zeros(1)), beta)
    assert out.item() == pytest.approx(expected, abs=1e-7)


def test_leaky_relu_values():
    out = T.leaky_relu(Tensor(np.array([-2.0, 0.0, 3.0])), 0.1)
    np.testing.assert_allclose(out.data, [-0.2, 0.0, 3.0], rtol=1e-6)


def test_quantize_tie_goes_up():
    assert T.quantize_ste(Tensor(np.array([0.5])), 2).item() == 0.75


def test_quantize_bin_centers_are_fixed_points():
    levels = 16
    centers = (np.arange(levels) + 0.5) / levels
    np.testing.assert_array_equal(T.quantize_ste(Tensor(centers), levels).data, centers.astype(np.float32))


def test_quantize_clamps_out_of_range():
    out = T.quantize_ste(Tensor(np.array([-3.0, 7.0])), 4)
    np.testing.assert_array_equal(out.data, [0.125, 0.875])


def test_straight_through_gradient_is_ones_inside():
    z = Tensor(np.array([-0.2, 0.0, 0.3, 1.0, 1.4]), requires_grad=True)
    T.backward(T.sum_all(T.quantize_ste(z, 8)))
    np.testing.assert_array_equal(z.grad, [0, 1, 1, 1, 0])


def test_entropy_surrogate_bounds():
    rng = np.random.default_rng(0)
    for bits in (1, 2, 4):
        z = Tensor(rng.uniform(-0.2, 1.2, (3, 4, 5, 5)))
        h = T.entropy_surrogate(z, 2 ** bits).item()
        assert 0.0 <= h <= bits + 1e-6


def test_entropy_surrogate_constant_at_bin_center_is_zero():
    z = Tensor(np.full((2, 3, 4, 4), (5 + 0.5) / 16))
    assert T.entropy_surrogate(z, 16).item() == 0.0


def test_soft_histogram_conserves_mass():
    rng = np.random.default_rng(1)
    z = rng.uniform(-0.5, 1.5, (2, 3, 4, 4))
    counts = T.soft_histogram(z, 8)
    np.testing.assert_allclose(counts.sum(axis=1), 2 * 16)
    assert counts.min() >= 0


# ---------------------------------------------------------------------------
# convolutions


@pytest.mark.parametrize("seed", range(12))
def test_conv2d_matches_loops(seed):
    rng = np.random.default_rng(seed)
    k, s = int(rng.integers(1, 5)), int(rng.integers(1, 3))
    p = int(rng.integers(0, k))
    x = rng.standard_normal((2, 3, 7, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, k, k)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), s, p)
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, s, p), rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("seed", range(12))
def test_conv_transpose2d_matches_scatter_loops(seed):
    rng = np.random.default_rng(100 + seed)
    k, s = int(rng.integers(1, 5)), int(rng.integers(1, 3))
    p = int(rng.integers(0, k))
    x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    w = rng.standard_normal((3, 2, k, k)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    out = T.conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), s, p)
    np.testing.assert_allclose(out.data, conv_transpose2d_loops(x, w, b, s, p), rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("seed", range(20))
def test_conv_adjoint_identity(seed):
    rng = np.random.default_rng(200 + seed)
    k = int(rng.integers(1, 5))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, k))
    cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    ho = int(rng.integers(1, 5))
    h = (ho - 1) * s + k - 2 * p
    if h < 1:
        p, h = 0, (ho - 1) * s + k
    x = rng.standard_normal((1, cin, h, h)).astype(np.float32)
    w = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
    y = rng.standard_normal((1, cout, ho, ho)).astype(np.float32)
    lhs = np.vdot(T.conv2d(Tensor(x), Tensor(w), None, s, p).data.astype(np.float64), y)
    rhs = np.vdot(x, T.conv_transpose2d(Tensor(y), Tensor(w), None, s, p).data.astype(np.float64))
    assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))


def test_conv_rejects_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))


def test_conv_rejects_oversized_kernel():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


def test_two_layer_conv_net_gradients():
    # finite differences are meaningless across the leaky-relu kink, so pick
    # the first instance whose pre-activations all sit well away from zero
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0, 1, (2, 2, 6, 6)).astype(np.float32)
        w1 = (rng.standard_normal((3, 2, 3, 3)) * 0.5).astype(np.float32)
        b1 = (rng.standard_normal(3) * 0.1).astype(np.float32)
        w2 = (rng.standard_normal((3, 2, 4, 4)) * 0.5).astype(np.float32)
        b2 = (rng.standard_normal(2) * 0.1).astype(np.float32)
        pre = conv2d_loops(x, w1, b1, 2, 1)
        if np.abs(pre).min() > 0.05:
            break
    arrays = [w1, b1, w2, b2]

    def net(ws):
        h = T.leaky_relu(T.conv2d(Tensor(x), ws[0], ws[1], 2, 1), 0.1)
        y = T.sigmoid(T.conv_transpose2d(h, ws[2], ws[3], 2, 1))
        return T.huber_loss(y, Tensor(x))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    T.backward(net(leaves))

    def f():
        with T.no_grad():
            return float(net([Tensor(a) for a in arrays]).data)

    for i, leaf in enumerate(leaves):
        assert rel_error(leaf.grad, numeric_grad(f, arrays, i, 1e-2)) <= MAX_REL_ERROR


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 3, 8, 8)))
    w = Tensor(rng.standard_normal((4, 3, 3, 3)))
    a = T.conv2d(x, w, None, 2, 1).data
    b = T.conv2d(x, w, None, 2, 1).data
    assert a.tobytes() == b.tobytes()
