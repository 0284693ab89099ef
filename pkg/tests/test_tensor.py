"""Engine-level checks: forward values, backward rules, mask semantics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relayformer import tensor as T
from relayformer.tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    finite_difference_gradient,
    gradient,
    max_relative_error,
)


def randt(rng, *shape, requires_grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad, dtype=np.float64)


class TestForwardValues:
    def test_add(self):
        out = T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_softmax_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_masked_fill_then_softmax_zeroes_padding(self):
        logits = Tensor([0.0, 0.0, 123.0])
        masked = T.masked_fill(logits, np.array([False, False, True]))
        out = T.softmax(masked)
        np.testing.assert_allclose(out.data, [0.5, 0.5, 0.0])

    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
            T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError, match="matmul"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_nonfinite_surfaces_as_error(self):
        with pytest.raises(NonFiniteError, match="div"):
            T.div(Tensor([1.0]), Tensor([0.0]))

    def test_reshape_permute_roundtrip_bit_exact(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 3, 4, 5)))
        back = T.permute(T.permute(x, (3, 1, 0, 2)), (2, 1, 3, 0))
        assert (back.data == x.data).all()
        again = T.reshape(T.reshape(x, (6, 20)), (2, 3, 4, 5))
        assert (again.data == x.data).all()

    def test_split_concat_roundtrip(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((4, 6)))
        parts = T.split(x, [2, 3, 1], axis=1)
        merged = T.concat(parts, axis=1)
        assert (merged.data == x.data).all()


class TestGradientRules:
    def test_square_scalar(self):
        x = Tensor(3.0, requires_grad=True, dtype=np.float64)
        (g,) = gradient(lambda t: T.mul(t, t), [x])
        np.testing.assert_allclose(g, 6.0)

    def test_softmax_sum_is_constant(self):
        rng = np.random.default_rng(2)
        x = randt(rng, 5)
        (g,) = gradient(lambda t: T.reduce_sum(T.softmax(t)), [x])
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_relu_subgradient_zero_at_zero(self):
        x = Tensor([1.0, -1.0], dtype=np.float64)
        w = Tensor([[1.0], [1.0]], requires_grad=True, dtype=np.float64)
        (g,) = gradient(
            lambda wt: T.reduce_sum(T.relu(T.matmul(T.reshape(x, (1, 2)), wt))), [w]
        )
        np.testing.assert_array_equal(g, [[0.0], [0.0]])

    def test_detached_input_gets_zero_gradient(self):
        x = Tensor([2.0], requires_grad=False, dtype=np.float64)
        y = Tensor([3.0], requires_grad=True, dtype=np.float64)
        gx, gy = gradient(lambda a, b: T.reduce_sum(T.mul(a, b)), [x, y])
        np.testing.assert_array_equal(gx, [0.0])
        np.testing.assert_array_equal(gy, [2.0])

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            gradient(lambda t: t, [x])

    def test_shared_subexpression_counted_once(self):
        # z = (x + x) * (x + x); dz/dx = 8x
        x = Tensor(1.5, requires_grad=True, dtype=np.float64)
        y = T.add(x, x)
        z = T.mul(y, y)
        z.backward()
        np.testing.assert_allclose(x.grad, 8 * 1.5)

    def test_masked_slot_gets_zero_weight_and_zero_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=np.float64)
        mask = np.array([False, False, True])
        w = T.softmax(T.masked_fill(x, mask))
        assert w.data[2] == 0.0
        loss = T.reduce_sum(T.mul(w, Tensor([1.0, -2.0, 5.0], dtype=np.float64)))
        loss.backward()
        assert x.grad[2] == 0.0


class TestFiniteDifferenceOracle:
    def test_square(self):
        x = Tensor(3.0, dtype=np.float64)
        (g,) = finite_difference_gradient(lambda t: T.mul(t, t), [x], eps=1e-4)
        np.testing.assert_allclose(g, 6.0, atol=1e-7)

    def test_linear_is_all_ones(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal(7), dtype=np.float64)
        (g,) = finite_difference_gradient(lambda t: T.reduce_sum(t), [x], eps=1e-4)
        np.testing.assert_allclose(g, np.ones(7), atol=1e-9)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_difference_gradient(lambda t: t, [Tensor(1.0)], eps=0.0)

    @pytest.mark.parametrize(
        "name,fn",
        [
            ("mul", lambda a, b: T.reduce_sum(T.mul(a, b))),
            ("div", lambda a, b: T.reduce_sum(T.div(a, T.add(T.mul(b, b), 1.0)))),
            ("matmul", lambda a, b: T.reduce_sum(T.matmul(a, T.transpose(b)))),
            ("softmax", lambda a, b: T.reduce_sum(T.mul(T.softmax(a), T.exp(b)))),
            ("log_softmax", lambda a, b: T.reduce_sum(T.mul(T.log_softmax(a), b))),
            ("relu", lambda a, b: T.reduce_sum(T.relu(T.mul(a, b)))),
            ("mean", lambda a, b: T.reduce_mean(T.mul(a, b), axis=1).sum()),
            ("power", lambda a, b: T.reduce_sum(T.power(T.add(T.mul(a, a), 1.0), 1.5) + b)),
            ("sqrt", lambda a, b: T.reduce_sum(T.sqrt(T.add(T.mul(a, a), T.mul(b, b)) + 1.0))),
            ("concat", lambda a, b: T.reduce_sum(T.mul(T.concat([a, b], axis=0), T.concat([b, a], axis=0)))),
        ],
    )
    def test_primitive_grads_match_fd(self, name, fn):
        rng = np.random.default_rng(hash(name) % 2**32)
        a = randt(rng, 3, 4)
        b = randt(rng, 3, 4)
        auto = gradient(fn, [a, b])
        fd = finite_difference_gradient(fn, [a, b], eps=1e-4)
        for ga, gf in zip(auto, fd):
            assert max_relative_error(ga, gf, floor=1e-8) <= 1e-4

    def test_split_grad_matches_fd(self):
        rng = np.random.default_rng(21)
        a = randt(rng, 4, 5)

        def fn(t):
            left, mid, right = T.split(t, [1, 3, 1], axis=1)
            return T.reduce_sum(T.mul(mid, mid)) + T.reduce_sum(T.mul(left, right))

        (auto,) = gradient(fn, [a])
        (fd,) = finite_difference_gradient(fn, [a], eps=1e-4)
        assert max_relative_error(auto, fd) <= 1e-4

    def test_take_grad_matches_fd_with_repeats(self):
        rng = np.random.default_rng(11)
        a = randt(rng, 5, 3)
        idx = np.array([0, 2, 2, 4])

        def fn(t):
            picked = T.take(t, idx, axis=0)
            return T.reduce_sum(T.mul(picked, picked))

        (auto,) = gradient(fn, [a])
        (fd,) = finite_difference_gradient(fn, [a], eps=1e-4)
        assert max_relative_error(auto, fd) <= 1e-4

    def test_batched_matmul_with_broadcast(self):
        rng = np.random.default_rng(12)
        a = randt(rng, 2, 3, 4)
        b = randt(rng, 4, 5)

        def fn(x, y):
            return T.reduce_sum(T.power(T.matmul(x, y), 2.0))

        auto = gradient(fn, [a, b])
        fd = finite_difference_gradient(fn, [a, b], eps=1e-4)
        for ga, gf in zip(auto, fd):
            assert max_relative_error(ga, gf) <= 1e-4

    def test_layer_norm_grad(self):
        rng = np.random.default_rng(13)
        x = randt(rng, 2, 6)
        gamma = randt(rng, 6)
        beta = randt(rng, 6)

        def fn(xt, g, b):
            return T.reduce_sum(T.power(T.layer_norm(xt, g, b), 2.0))

        auto = gradient(fn, [x, gamma, beta])
        fd = finite_difference_gradient(fn, [x, gamma, beta], eps=1e-4)
        for ga, gf in zip(auto, fd):
            assert max_relative_error(ga, gf) <= 1e-4

    def test_batch_norm_train_mode_grad(self):
        rng = np.random.default_rng(14)
        x = randt(rng, 4, 3, 5)
        gamma = randt(rng, 1, 3, 1)
        beta = randt(rng, 1, 3, 1)
        w = Tensor(rng.standard_normal((4, 3, 5)), dtype=np.float64)

        def fn(xt, g, b):
            rm = np.zeros((1, 3, 1))
            rv = np.ones((1, 3, 1))
            out = T.batch_norm(xt, g, b, rm, rv, axes=(0, 2), training=True)
            return T.reduce_sum(T.mul(out, w) + T.power(out, 3.0))

        auto = gradient(fn, [x, gamma, beta])
        fd = finite_difference_gradient(fn, [x, gamma, beta], eps=1e-4)
        for ga, gf in zip(auto, fd):
            assert max_relative_error(ga, gf) <= 1e-4


class TestProperties:
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=16))
    @settings(max_examples=60, deadline=None)
    def test_softmax_rows_normalized_nonnegative(self, values):
        out = T.softmax(Tensor(np.array(values, dtype=np.float64)))
        assert (out.data >= 0).all()
        assert abs(out.data.sum() - 1.0) <= 1e-6

    @given(
        st.integers(1, 4), st.integers(1, 4), st.integers(1, 4),
        st.integers(0, 2**31 - 1),
    )
    @settings(max_examples=40, deadline=None)
    def test_reshape_roundtrip_identity(self, a, b, c, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((a, b, c)))
        y = T.reshape(T.reshape(x, (a * b * c,)), (a, b, c))
        assert (y.data == x.data).all()

    def test_batch_norm_eval_uses_running_stats(self):
        x = Tensor(np.array([[10.0], [20.0]]))
        gamma = Tensor(np.ones((1, 1)))
        beta = Tensor(np.zeros((1, 1)))
        rm = np.array([[15.0]])
        rv = np.array([[25.0]])
        out = T.batch_norm(x, gamma, beta, rm, rv, axes=(0,), training=False, eps=0.0)
        np.testing.assert_allclose(out.data, [[-1.0], [1.0]])

    def test_batch_norm_running_stats_update(self):
        x = Tensor(np.array([[1.0], [3.0]]))
        gamma = Tensor(np.ones((1, 1)))
        beta = Tensor(np.zeros((1, 1)))
        rm = np.zeros((1, 1))
        rv = np.ones((1, 1))
        T.batch_norm(x, gamma, beta, rm, rv, axes=(0,), training=True, momentum=0.9)
        np.testing.assert_allclose(rm, [[0.9 * 0.0 + 0.1 * 2.0]])
        np.testing.assert_allclose(rv, [[0.9 * 1.0 + 0.1 * 1.0]])
