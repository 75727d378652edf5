import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gdifd import autograd as ag
from gdifd.autograd import Tensor
from gdifd.gradcheck import check_gradients


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_sum_gradient_is_ones():
    x = leaf([1.0, -2.0, 5.0])
    ag.backward(ag.sum(x))
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])


def test_square_gradient():
    x = leaf([2.0, -1.0])
    ag.backward(ag.sum(x * x))
    assert np.array_equal(x.grad, [4.0, -2.0])


def test_non_scalar_root_rejected():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        ag.backward(x * 2.0)


def test_every_reachable_leaf_gets_a_grad():
    a, b, c = leaf(np.ones(3)), leaf(np.ones(3)), Tensor(np.ones(3))
    unused = leaf([1.0])
    out = ag.sum(ag.relu(a * -1.0) + b * c)
    ag.backward(out)
    assert a.grad is not None and np.array_equal(a.grad, np.zeros(3))
    assert b.grad is not None and b.grad.shape == b.shape
    assert c.grad is None
    assert unused.grad is None


def test_fan_out_doubles_gradient():
    x = leaf([0.3, -1.2, 4.0])
    ag.backward(ag.sum(x * 3.0))
    once = x.grad.copy()
    y = leaf([0.3, -1.2, 4.0])
    ag.backward(ag.sum(y * 3.0) + ag.sum(y * 3.0))
    assert np.array_equal(y.grad, 2.0 * once)


def test_backward_visits_each_node_once():
    x = leaf(np.arange(4.0))
    h = x * 2.0
    out = ag.sum(h + h + h)
    order = ag.topological_order(out)
    assert len(order) == len({id(n) for n in order})
    ag.backward(out)
    assert np.array_equal(x.grad, np.full(4, 6.0))


def test_deep_chain_does_not_recurse():
    x = leaf([1.0])
    y = x
    for _ in range(5000):
        y = y * 1.0
    ag.backward(ag.sum(y))
    assert x.grad[0] == 1.0


def test_mul_values():
    assert np.array_equal((Tensor([1.0, 2.0]) * Tensor([3.0, 4.0])).data, [3.0, 8.0])


def test_mean_of_constant():
    x = leaf(np.full((2, 5), 7.5))
    m = ag.mean(x)
    assert m.data == 7.5
    ag.backward(m)
    assert np.allclose(x.grad, 1.0 / 10)


@pytest.mark.parametrize("x, value, slope", [(0.005, 0.0, 0.0), (0.02, 0.01, 1.0)])
def test_hinge_cases(x, value, slope):
    t = leaf([x])
    out = ag.sum(ag.maximum(t - 0.01, 0.0))
    assert out.data == pytest.approx(value, abs=1e-15)
    ag.backward(out)
    assert t.grad[0] == slope


def test_relu_kink_subgradient_is_zero():
    x = leaf([0.0])
    ag.backward(ag.sum(ag.relu(x)))
    assert x.grad[0] == 0.0


@pytest.mark.parametrize("x, slope", [(0.7, 1.0), (-0.7, 0.0)])
def test_relu_slope_matches_finite_differences(x, slope):
    t = leaf([x])
    ag.backward(ag.sum(ag.relu(t)))
    numeric = ag.finite_diff_grad(lambda v: ag.sum(ag.relu(v)), Tensor([x]))
    assert t.grad[0] == slope
    assert numeric.data[0] == pytest.approx(slope, abs=1e-9)


def test_incompatible_shapes_named_in_error():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(4))


def test_per_channel_broadcast_backward():
    x = leaf(np.random.default_rng(0).normal(size=(2, 3, 4, 4)))
    b = leaf(np.zeros((3, 1, 1)))
    ag.backward(ag.sum(x + b))
    assert b.grad.shape == (3, 1, 1)
    assert np.array_equal(b.grad.reshape(-1), np.full(3, 32.0))


def test_finite_diff_of_sum_is_ones():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 2)))
    g = ag.finite_diff_grad(ag.sum, x)
    assert np.allclose(g.data, 1.0, atol=1e-9)


def test_finite_diff_sigmoid_at_zero():
    g = ag.finite_diff_grad(lambda v: ag.sum(ag.sigmoid(v)), Tensor([0.0]))
    assert g.data[0] == pytest.approx(0.25, abs=1e-10)


def test_finite_diff_leaves_input_untouched():
    data = np.random.default_rng(2).normal(size=5)
    x = Tensor(data.copy())
    ag.finite_diff_grad(lambda v: ag.sum(ag.exp(v)), x)
    assert np.array_equal(x.data, data)


def test_no_grad_builds_no_graph():
    x = leaf([1.0, 2.0])
    with ag.no_grad():
        y = ag.exp(x) * 2.0
        assert not ag.is_grad_enabled()
    assert ag.is_grad_enabled()
    assert not y.requires_grad and y._parents == ()


def test_sigmoid_is_stable_for_large_inputs():
    x = leaf([-800.0, 800.0])
    y = ag.sigmoid(x)
    assert np.all(np.isfinite(y.data))
    assert y.data[0] == 0.0 and y.data[1] == 1.0


def test_getitem_fancy_index_accumulates_duplicates():
    x = leaf(np.arange(4.0))
    ag.backward(ag.sum(x[np.array([1, 1, 3])]))
    assert np.array_equal(x.grad, [0.0, 2.0, 0.0, 1.0])


def test_minimum_tie_goes_to_first_argument():
    a, b = leaf([1.0]), leaf([1.0])
    ag.backward(ag.sum(ag.minimum(a, b)))
    assert (a.grad[0], b.grad[0]) == (1.0, 0.0)


def test_upsample_nearest_values():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    up = ag.upsample_nearest(x, 2).data[0, 0]
    assert np.array_equal(up, np.kron(np.arange(4.0).reshape(2, 2), np.ones((2, 2))))


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(3).normal(size=(2, 5, 3)) * 20)
    assert np.allclose(ag.softmax(x, axis=1).data.sum(axis=1), 1.0, atol=1e-12)


finite = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_elementwise_chain_matches_finite_differences(a, b):
    x, y = leaf(a), leaf(b)
    err = check_gradients(lambda: ag.sum(ag.exp(x * 0.3) * y - (x - y) * (x + 1.5)), [x, y])
    assert err < 1e-4


def test_forward_is_deterministic():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(4, 4)))
        return ag.softmax(ag.exp(x) * x, axis=0).data

    assert np.array_equal(run(), run())
