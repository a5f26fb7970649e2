"""Graph engine tests: forward values, chain rule vs finite differences, reversal semantics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datkit import ndnum
from datkit.errors import ContractError, GraphStateError, ShapeError


def fd_grad(root, leaf, h_scale=1e-5):
    """Central-difference gradient of the root scalar w.r.t. one leaf tensor.

    Independent of the backward pass: perturbs the leaf value in place and
    reruns the forward walk.
    """
    base = leaf.value.copy()
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        h = h_scale * max(1.0, abs(base[idx]))
        leaf.value = base.copy()
        leaf.value[idx] = base[idx] + h
        f_plus = float(ndnum.forward(root))
        leaf.value = base.copy()
        leaf.value[idx] = base[idx] - h
        f_minus = float(ndnum.forward(root))
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    leaf.value = base
    ndnum.forward(root)
    return grad


def assert_close_rel(a, b, rtol=1e-5):
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    assert np.all(np.abs(a - b) <= rtol * denom), f"max err {np.max(np.abs(a - b) / denom)}"


class TestForward:
    def test_matmul_hand(self):
        a = ndnum.input_node([[1.0, 2.0]])
        b = ndnum.input_node([[3.0], [4.0]])
        out = ndnum.matmul(a, b)
        assert ndnum.forward(out).tolist() == [[11.0]]

    def test_relu(self):
        x = ndnum.input_node([-1.0, 0.0, 2.0])
        assert ndnum.forward(ndnum.relu(x)).tolist() == [0.0, 0.0, 2.0]

    def test_grad_reverse_is_identity_forward(self):
        x = ndnum.input_node([5.0, -3.0])
        for lam in (0.0, 0.5, 1.0):
            assert ndnum.forward(ndnum.grad_reverse(x, lam)).tolist() == [5.0, -3.0]

    def test_shape_mismatch_names_both_shapes(self):
        a = ndnum.input_node([[1.0, 2.0]])
        b = ndnum.input_node([[1.0, 2.0]])
        with pytest.raises(ShapeError, match=r"\(1, 2\).*\(1, 2\)"):
            ndnum.matmul(a, b)
        with pytest.raises(ShapeError):
            ndnum.add_bias(a, ndnum.input_node([1.0, 2.0, 3.0]))


class TestBackward:
    def test_sum_of_scale(self):
        x = ndnum.input_node([1.0, 2.0], name="x")
        root = ndnum.sum_all(ndnum.scale(x, 3.0))
        ndnum.forward(root)
        grads = ndnum.backward(root)
        assert grads["x"].tolist() == [3.0, 3.0]

    def test_grad_reverse_unit_lambda(self):
        x = ndnum.input_node([1.0, 2.0], name="x")
        root = ndnum.sum_all(ndnum.grad_reverse(x, 1.0))
        ndnum.forward(root)
        assert ndnum.backward(root)["x"].tolist() == [-1.0, -1.0]

    def test_grad_reverse_zero_lambda(self):
        x = ndnum.input_node([1.0, 2.0], name="x")
        root = ndnum.sum_all(ndnum.grad_reverse(x, 0.0))
        ndnum.forward(root)
        assert ndnum.backward(root)["x"].tolist() == [0.0, 0.0]

    def test_grad_reverse_scales_upstream(self):
        # Upstream gradient of 2 into the reversal node: parent sees -lambda * 2.
        x = ndnum.input_node([7.0], name="x")
        root = ndnum.scale(ndnum.sum_all(ndnum.grad_reverse(x, 0.5)), 2.0)
        ndnum.forward(root)
        assert ndnum.backward(root)["x"].tolist() == [-1.0]

        x2 = ndnum.input_node([7.0], name="x")
        root2 = ndnum.scale(ndnum.sum_all(ndnum.grad_reverse(x2, 1.0)), 2.0)
        ndnum.forward(root2)
        assert ndnum.backward(root2)["x"].tolist() == [-2.0]

    def test_root_grad_is_one(self):
        x = ndnum.input_node([1.0, 2.0])
        root = ndnum.sum_all(x)
        ndnum.forward(root)
        ndnum.backward(root)
        assert float(root.grad) == 1.0

    def test_backward_before_forward_raises(self):
        x = ndnum.input_node([1.0])
        root = ndnum.sum_all(x)
        with pytest.raises(GraphStateError):
            ndnum.backward(root)

    def test_non_scalar_root_raises(self):
        x = ndnum.input_node([1.0, 2.0])
        root = ndnum.scale(x, 2.0)
        ndnum.forward(root)
        with pytest.raises(ContractError):
            ndnum.backward(root)

    def test_negative_lambda_rejected(self):
        x = ndnum.input_node([1.0])
        with pytest.raises(ContractError):
            ndnum.grad_reverse(x, -0.1)
        with pytest.raises(ContractError):
            ndnum.grad_reverse(x, float("nan"))


def build_random_graph(rng, dim):
    """Three-layer graph over a dim-wide input: affine, relu, affine, weighted CE."""
    x = ndnum.input_node(rng.normal(size=(2, dim)), name="x")
    w1 = ndnum.input_node(rng.normal(size=(dim, dim)), name="w1")
    b1 = ndnum.input_node(rng.normal(size=(dim,)), name="b1")
    w2 = ndnum.input_node(rng.normal(size=(dim, 2)), name="w2")
    b2 = ndnum.input_node(rng.normal(size=(2,)), name="b2")
    h = ndnum.relu(ndnum.add_bias(ndnum.matmul(x, w1), b1))
    logits = ndnum.add_bias(ndnum.matmul(h, w2), b2)
    root = ndnum.softmax_cross_entropy(logits, [0, 1], class_weights=[1.3, 0.7])
    leaves = {"x": x, "w1": w1, "b1": b1, "w2": w2, "b2": b2}
    return root, leaves, h


def relu_inputs_clear_of_kink(h_node, margin=1e-3):
    pre = h_node.parents[0].value
    return np.min(np.abs(pre)) > margin


class TestFiniteDifferences:
    def test_random_graphs_match_central_differences(self):
        rng = np.random.default_rng(7)
        checked = 0
        while checked < 12:
            dim = int(rng.integers(2, 9))
            root, leaves, h = build_random_graph(rng, dim)
            ndnum.forward(root)
            if not relu_inputs_clear_of_kink(h):
                continue  # finite differences are invalid across the relu kink
            grads = ndnum.backward(root)
            for name, leaf in leaves.items():
                assert_close_rel(grads[name], fd_grad(root, leaf))
            checked += 1

    def test_mean_and_sum_ops(self):
        rng = np.random.default_rng(3)
        x = ndnum.input_node(rng.normal(size=(3, 4)), name="x")
        root = ndnum.mean_all(ndnum.relu(ndnum.scale(x, 2.0)))
        ndnum.forward(root)
        grads = ndnum.backward(root)
        assert_close_rel(grads["x"], fd_grad(root, x))


class TestProperties:
    def test_reversal_forward_matches_scale_one(self):
        rng = np.random.default_rng(11)
        val = rng.normal(size=(4, 3))
        for lam in (0.0, 0.3, 1.0):
            xa = ndnum.input_node(val, name="x")
            ra = ndnum.sum_all(ndnum.relu(ndnum.grad_reverse(xa, lam)))
            xb = ndnum.input_node(val, name="x")
            rb = ndnum.sum_all(ndnum.relu(ndnum.scale(xb, 1.0)))
            assert np.array_equal(ndnum.forward(ra), ndnum.forward(rb))
            ga = ndnum.backward(ra)["x"]
            gb = ndnum.backward(rb)["x"]
            np.testing.assert_allclose(ga, -lam * gb, rtol=0, atol=1e-15)

    def test_backward_linearity_of_added_roots(self):
        val = [1.5, -0.5, 2.0]
        x1 = ndnum.input_node(val, name="x")
        r1 = ndnum.sum_all(ndnum.scale(x1, 2.0))
        ndnum.forward(r1)
        g1 = ndnum.backward(r1)["x"]

        x2 = ndnum.input_node(val, name="x")
        r2 = ndnum.mean_all(ndnum.relu(x2))
        ndnum.forward(r2)
        g2 = ndnum.backward(r2)["x"]

        x = ndnum.input_node(val, name="x")
        combined = ndnum.add_bias(ndnum.sum_all(ndnum.scale(x, 2.0)), ndnum.mean_all(ndnum.relu(x)))
        ndnum.forward(combined)
        g = ndnum.backward(combined)["x"]
        np.testing.assert_allclose(g, g1 + g2, rtol=0, atol=1e-15)

    def test_bitwise_determinism(self):
        rng = np.random.default_rng(5)
        val = rng.normal(size=(3, 3))

        def run():
            x = ndnum.input_node(val, name="x")
            w = ndnum.input_node(np.eye(3) * 0.5, name="w")
            root = ndnum.softmax_cross_entropy(ndnum.matmul(ndnum.relu(x), w), [0, 1, 2])
            f = ndnum.forward(root).copy()
            g = ndnum.backward(root)
            return f, g["x"].copy(), g["w"].copy()

        f1, gx1, gw1 = run()
        f2, gx2, gw2 = run()
        assert f1.tobytes() == f2.tobytes()
        assert gx1.tobytes() == gx2.tobytes()
        assert gw1.tobytes() == gw2.tobytes()

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=16))
    @settings(max_examples=200, deadline=None)
    def test_forward_values_finite_on_finite_inputs(self, values):
        x = ndnum.input_node(values)
        root = ndnum.mean_all(ndnum.relu(ndnum.scale(ndnum.grad_reverse(x, 0.5), 1.25)))
        assert np.isfinite(ndnum.forward(root))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_give_log2(self):
        logits = ndnum.input_node([[0.0, 0.0]])
        root = ndnum.softmax_cross_entropy(logits, [0])
        assert float(ndnum.forward(root)) == pytest.approx(np.log(2.0), rel=1e-12)

    def test_extreme_logits_stay_finite(self):
        logits = ndnum.input_node([[1000.0, -1000.0]])
        root = ndnum.softmax_cross_entropy(logits, [1])
        assert np.isfinite(ndnum.forward(root))

    def test_label_out_of_range(self):
        logits = ndnum.input_node([[0.0, 0.0]])
        with pytest.raises(ContractError):
            ndnum.softmax_cross_entropy(logits, [2])
