import numpy as np
import pytest

from stilab import autodiff as ad
from stilab.autodiff import (
    AutodiffError,
    NonScalarOutputError,
    ParameterStore,
    ShapeMismatchError,
    Tape,
    finite_difference_check,
    parameter_gradients,
)


def grad_of(build):
    """Build a scalar graph on a fresh tape; return (tape grads, leaves dict)."""
    tape = Tape()
    loss, leaves = build(tape)
    return tape.backward(loss), leaves


class TestPrimitiveBackwardRules:
    def test_relu_subgradient(self):
        grads, leaves = grad_of(
            lambda tape: (ad.sum_reduce(ad.relu(tape.leaf(np.array([2.0, -2.0])))), None)
        )
        (only,) = [g for tid, g in grads.items()]
        assert np.array_equal(only, [1.0, 0.0])

    def test_softmax_backward_analytic_jacobian(self):
        # oracle: ds_i = s_i (delta_ij - s_j) contracted with upstream (1, 0)
        tape = Tape()
        x = tape.leaf(np.array([0.0, 0.0]))
        s = ad.softmax(x, axis=0)
        loss = ad.dot(s, tape.constant(np.array([1.0, 0.0])))
        grads = tape.backward(loss)
        s_val = np.array([0.5, 0.5])
        upstream = np.array([1.0, 0.0])
        oracle = s_val * (upstream - np.sum(upstream * s_val))
        assert np.allclose(grads[x.tid], oracle, atol=1e-15)
        assert np.allclose(grads[x.tid], [0.25, -0.25], atol=1e-15)

    def test_l2_normalize_gradient_orthogonal_to_input(self):
        rng = np.random.default_rng(0)
        x_val = rng.standard_normal(6)
        x_val /= np.linalg.norm(x_val)
        upstream = rng.standard_normal(6)
        upstream -= upstream @ x_val * x_val  # orthogonal component only
        tape = Tape()
        x = tape.leaf(x_val)
        loss = ad.dot(ad.l2_normalize(x, axis=0), tape.constant(upstream))
        grads = tape.backward(loss)
        assert abs(grads[x.tid] @ x_val) < 1e-12

    def test_max_reduce_routes_ties_to_smallest_index(self):
        tape = Tape()
        x = tape.leaf(np.array([3.0, 3.0, 1.0]))
        loss = ad.max_reduce(x, axis=0)
        grads = tape.backward(loss)
        assert np.array_equal(grads[x.tid], [1.0, 0.0, 0.0])

    def test_max_reduce_routes_to_argmax(self):
        tape = Tape()
        x = tape.leaf(np.array([[1.0, 5.0, 2.0], [7.0, 0.0, 7.0]]))
        loss = ad.sum_reduce(ad.max_reduce(x, axis=1))
        grads = tape.backward(loss)
        assert np.array_equal(grads[x.tid], [[0, 1, 0], [1, 0, 0]])

    def test_clip_gradient_masks_outside(self):
        tape = Tape()
        x = tape.leaf(np.array([-2.0, 0.5, 2.0]))
        loss = ad.sum_reduce(ad.clip(x, -1.0, 1.0))
        grads = tape.backward(loss)
        assert np.array_equal(grads[x.tid], [0.0, 1.0, 0.0])


class TestBackwardStructure:
    def test_sum_of_linear_map_has_rank_one_gradient(self):
        # f = sum(x . W): dW = outer(x, ones), from the hand formula
        rng = np.random.default_rng(1)
        x_val = rng.standard_normal(4)
        tape = Tape()
        w = tape.leaf(rng.standard_normal((4, 3)))
        loss = ad.sum_reduce(ad.matmul(tape.constant(x_val), w))
        grads = tape.backward(loss)
        assert np.allclose(grads[w.tid], np.outer(x_val, np.ones(3)), atol=1e-15)
        assert np.linalg.matrix_rank(grads[w.tid]) == 1

    def test_constant_output_gives_all_zero_parameter_gradients(self):
        store = ParameterStore()
        store.register("w", np.ones((2, 2)))
        tape = Tape()
        store.leaves(tape)
        loss = ad.sum_reduce(tape.constant(np.ones(3)))
        grads = parameter_gradients(loss, store)
        assert np.array_equal(grads["w"], np.zeros((2, 2)))

    def test_disconnected_parameter_gets_exact_zero(self):
        store = ParameterStore()
        store.register("used", np.array([1.0, 2.0]))
        store.register("unused", np.array([[3.0]]))
        tape = Tape()
        leaves = store.leaves(tape)
        loss = ad.sum_reduce(ad.mul(leaves["used"], leaves["used"]))
        grads = parameter_gradients(loss, store)
        assert np.array_equal(grads["used"], [2.0, 4.0])
        assert np.array_equal(grads["unused"], [[0.0]])

    def test_backward_linearity(self):
        rng = np.random.default_rng(2)
        x_val = rng.standard_normal(5)
        a, b = 2.5, -1.25

        def build(combine):
            tape = Tape()
            x = tape.leaf(x_val)
            f = ad.sum_reduce(ad.mul(x, x))
            g = ad.sum_reduce(ad.exp(x))
            loss = combine(f, g)
            return tape.backward(loss)[x.tid]

        combined = build(lambda f, g: ad.add(ad.mul(f, a), ad.mul(g, b)))
        separate = a * build(lambda f, g: f) + b * build(lambda f, g: g)
        assert np.allclose(combined, separate, atol=1e-12)

    def test_identical_tapes_give_bitwise_identical_gradients(self):
        rng = np.random.default_rng(3)
        x_val = rng.standard_normal((3, 4))

        def run():
            tape = Tape()
            x = tape.leaf(x_val)
            y = ad.softmax(ad.matmul(x, tape.constant(rng_w)), axis=1)
            return tape.backward(ad.sum_reduce(ad.mul(y, y)))[x.tid]

        rng_w = rng.standard_normal((4, 4))
        assert np.array_equal(run(), run())

    def test_non_scalar_backward_rejected(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(NonScalarOutputError):
            tape.backward(ad.mul(x, 2.0))

    def test_cross_tape_mixing_rejected(self):
        a = Tape().leaf(np.ones(2))
        b = Tape().leaf(np.ones(2))
        with pytest.raises(AutodiffError):
            ad.add(a, b)

    def test_gradient_accumulates_over_reuse(self):
        tape = Tape()
        x = tape.leaf(np.array(3.0))
        loss = ad.add(ad.mul(x, x), ad.mul(x, 4.0))  # x^2 + 4x
        grads = tape.backward(loss)
        assert float(grads[x.tid]) == 10.0


class TestShapeErrors:
    def test_matmul_inner_mismatch(self):
        tape = Tape()
        with pytest.raises(ShapeMismatchError):
            ad.matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((4, 2))))

    def test_dot_requires_matching_vectors(self):
        tape = Tape()
        with pytest.raises(ShapeMismatchError):
            ad.dot(tape.constant(np.ones(3)), tape.constant(np.ones(4)))

    def test_weighted_sum_shape_check(self):
        tape = Tape()
        with pytest.raises(ShapeMismatchError):
            ad.weighted_sum(tape.constant(np.ones((3, 4))), tape.constant(np.ones(2)))

    def test_stack_shape_check(self):
        tape = Tape()
        with pytest.raises(ShapeMismatchError):
            ad.stack([tape.constant(np.ones(2)), tape.constant(np.ones(3))])


class TestCompositePlumbingGradients:
    def test_finite_differences_through_every_plumbing_op(self):
        # one graph using transpose, stack, index_select, expand_dims, clip,
        # exp, log, div, mean/sum, log_softmax, l2_normalize and matmul
        rng = np.random.default_rng(4)
        store = ParameterStore()
        store.register("w", rng.standard_normal((4, 4)) * 0.3 + np.eye(4))
        store.register("v", rng.standard_normal(4))
        base = rng.standard_normal((3, 4))

        def loss_fn(params):
            tape = Tape()
            leaves = params.leaves(tape)
            x = ad.matmul(tape.constant(base), ad.transpose(leaves["w"]))
            x = ad.log_softmax(x, axis=1)
            picked = ad.index_select(x, np.array([0, 2, 1]), axis=0)
            scaled = ad.mul(picked, ad.expand_dims(ad.exp(leaves["v"]), 0))
            vec = ad.mean_reduce(scaled, axis=0)
            unit = ad.l2_normalize(vec, axis=0)
            stacked = ad.stack([unit, ad.clip(vec, -0.5, 0.5)], axis=0)
            return ad.sum_reduce(ad.div(stacked, 3.0))

        err = finite_difference_check(loss_fn, store, eps=1e-6, coords_per_param=5, seed=0)
        assert err < 1e-6


class TestFiniteDifferenceCheck:
    def test_quadratic_is_nearly_exact(self):
        store = ParameterStore()
        store.register("x", np.array(3.0))

        def loss_fn(params):
            tape = Tape()
            leaves = params.leaves(tape)
            return ad.mul(leaves["x"], leaves["x"])

        err = finite_difference_check(loss_fn, store, eps=1e-4)
        assert err < 1e-7

    def test_analytic_gradient_value_matches_hand_derivative(self):
        store = ParameterStore()
        store.register("x", np.array(3.0))
        tape = Tape()
        leaves = store.leaves(tape)
        loss = ad.mul(leaves["x"], leaves["x"])
        grads = parameter_gradients(loss, store)
        assert float(grads["x"]) == 6.0

    def test_independent_parameter_reports_zero_both_ways(self):
        store = ParameterStore()
        store.register("x", np.array(2.0))
        store.register("dead", np.array(5.0))

        def loss_fn(params):
            tape = Tape()
            leaves = params.leaves(tape)
            return ad.mul(leaves["x"], leaves["x"])

        err = finite_difference_check(loss_fn, store, eps=1e-5)
        assert err < 1e-7
        tape = Tape()
        leaves = store.leaves(tape)
        grads = parameter_gradients(ad.mul(leaves["x"], leaves["x"]), store)
        assert float(grads["dead"]) == 0.0

    def test_non_finite_loss_rejected(self):
        store = ParameterStore()
        store.register("x", np.array(0.0))

        def loss_fn(params):
            tape = Tape()
            leaves = params.leaves(tape)
            return ad.log(leaves["x"])  # log(0) = -inf

        with np.errstate(divide="ignore"):
            with pytest.raises(AutodiffError):
                finite_difference_check(loss_fn, store)

    def test_invalid_eps_rejected(self):
        with pytest.raises(ValueError):
            finite_difference_check(lambda p: None, ParameterStore(), eps=0.0)


class TestParameterStore:
    def test_duplicate_registration_rejected(self):
        store = ParameterStore()
        store.register("a", np.zeros(2))
        with pytest.raises(KeyError):
            store.register("a", np.zeros(2))

    def test_set_value_shape_checked(self):
        store = ParameterStore()
        store.register("a", np.zeros((2, 2)))
        with pytest.raises(ShapeMismatchError):
            store.set_value("a", np.zeros(3))

    def test_values_are_read_only_snapshots(self):
        store = ParameterStore()
        store.register("a", np.zeros(2))
        with pytest.raises(ValueError):
            store.value("a")[0] = 1.0
        before = store.value("a")
        store.set_value("a", np.ones(2))
        assert np.array_equal(before, np.zeros(2))

    def test_fingerprint_tracks_values(self):
        store = ParameterStore()
        store.register("a", np.zeros(2))
        first = store.fingerprint()
        store.set_value("a", np.ones(2))
        assert store.fingerprint() != first

    def test_duplicate_named_leaf_on_one_tape_rejected(self):
        store = ParameterStore()
        store.register("a", np.zeros(2))
        tape = Tape()
        store.leaves(tape)
        with pytest.raises(AutodiffError):
            store.leaves(tape)
