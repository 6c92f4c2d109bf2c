import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hivg import tensor as T
from hivg.tensor import Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def naive_matmul(a, b):
    n, k = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1.0, 0], [0, 1]]), Tensor([[3.0, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_scalar_matrices(self):
        assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_against_triple_loop(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        out = T.matmul(Tensor(a), Tensor(b)).data
        assert np.max(np.abs(out - naive_matmul(a, b))) < 1e-12

    def test_shape_errors(self):
        with pytest.raises(ValueError, match="inner"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ValueError, match="rank"):
            T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))
        with pytest.raises(ValueError, match="broadcast"):
            T.matmul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 3, 2))))

    def test_batched_grad(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        assert T.gradcheck(lambda: T.sum_(T.matmul(a, b) ** 2), [a, b]) < 1e-6


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_large_logits_do_not_overflow(self):
        with np.errstate(over="raise", invalid="raise"):
            out = T.softmax(Tensor([1000.0, 0.0])).data
        assert out[0] == 1.0 and 0 <= out[1] < 1e-300

    def test_sums_to_one(self, rng):
        assert abs(T.softmax(Tensor(rng.standard_normal(5))).data.sum() - 1) < 1e-6

    @given(arrays(np.float64, (3, 6), elements=finite))
    def test_rows_are_distributions(self, x):
        out = T.softmax(Tensor(x), axis=-1).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(-1), 1, atol=1e-9)

    @given(arrays(np.float64, 6, elements=finite), st.floats(-100, 100))
    def test_shift_invariant(self, x, c):
        np.testing.assert_allclose(T.softmax(Tensor(x)).data, T.softmax(Tensor(x + c)).data, atol=1e-9)


class TestLayerNorm:
    def _ln(self, x):
        d = x.shape[-1]
        return T.layernorm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)))

    def test_constant_row(self):
        np.testing.assert_array_equal(self._ln(np.array([5.0, 5, 5])).data, [0, 0, 0])

    def test_two_values(self):
        np.testing.assert_allclose(self._ln(np.array([1.0, -1])).data, [1, -1], atol=1e-4)

    def test_normalises(self, rng):
        out = self._ln(rng.standard_normal(32) * 3 + 2).data
        assert abs(out.mean()) <= 1e-6
        assert abs(out.var() - 1) <= 1e-4

    def test_rejects_bad_eps_and_shapes(self):
        with pytest.raises(ValueError, match="eps"):
            T.layernorm(Tensor(np.ones(3)), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0)
        with pytest.raises(ValueError, match="gain"):
            T.layernorm(Tensor(np.ones(3)), Tensor(np.ones(2)), Tensor(np.zeros(2)))

    @given(arrays(np.float64, (2, 8), elements=st.floats(-20, 20)))
    def test_output_is_standardised(self, x):
        out = self._ln(x).data
        assert np.all(np.abs(out.mean(-1)) < 1e-6)
        # zero-variance rows collapse to zero instead of exploding
        assert np.all(np.isfinite(out))


class TestBackward:
    def test_quadratic(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.backward(T.sum_(x * x))
        np.testing.assert_array_equal(x.grad, [2, 4])

    def test_matmul_chain_matches_finite_differences(self, rng):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        c = Tensor(rng.standard_normal((5, 2)), requires_grad=True)
        assert T.gradcheck(lambda: T.sum_(T.tanh(T.matmul(T.matmul(a, b), c))), [a, b, c], h=1e-5) < 1e-4

    def test_detached_gets_no_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        d = x.detach()
        T.backward(T.sum_(x * d))
        assert d.grad is None and not d.requires_grad
        np.testing.assert_array_equal(x.grad, [1, 2])

    def test_frozen_operand_gets_no_grad(self):
        w = Tensor([3.0])
        x = Tensor([2.0], requires_grad=True)
        T.backward(T.sum_(w * x))
        assert w.grad is None

    def test_reused_tensor_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        T.backward(T.sum_(y + y * x))
        np.testing.assert_allclose(x.grad, [2 * 3 + 3 * 9])

    def test_needs_scalar_with_grad(self):
        with pytest.raises(ValueError, match="scalar"):
            T.backward(Tensor(np.ones(2), requires_grad=True) * 2)
        with pytest.raises(ValueError, match="does not require grad"):
            T.backward(T.sum_(Tensor(np.ones(2))))

    def test_tape_is_in_execution_order(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        tape = T.backward(T.sum_(T.exp(x * 2)))
        assert tape.ops == ["mul", "exp", "sum"]

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * 2
        assert y.node is None and not y.requires_grad
        assert T.is_grad_enabled()

    def test_no_grad_is_thread_local(self):
        seen = []

        def worker():
            seen.append(T.is_grad_enabled())

        with T.no_grad():
            t = threading.Thread(target=worker)
            t.start()
            t.join()
        assert seen == [True]


class TestPrimitives:
    @pytest.mark.parametrize("op", [T.exp, T.tanh, T.sigmoid, T.gelu, T.log_sigmoid,
                                    lambda x: T.softmax(x, axis=-1), lambda x: T.log_softmax(x, axis=-1),
                                    lambda x: T.l2_normalize(x, axis=-1)])
    def test_unary_gradients(self, op, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w = rng.standard_normal((3, 4))
        assert T.gradcheck(lambda: T.sum_(op(x) * w), [x]) < 1e-6

    def test_broadcast_gradients(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 4)), requires_grad=True)
        assert T.gradcheck(lambda: T.sum_(T.div(a * b, b * b + 2) - a), [a, b]) < 1e-6

    def test_split_concat_roundtrip(self, rng):
        x = Tensor(rng.standard_normal((2, 7)), requires_grad=True)
        parts = T.split(x, [3, 4], axis=1)
        np.testing.assert_array_equal(T.concat(parts, axis=1).data, x.data)
        with pytest.raises(ValueError, match="sum"):
            T.split(x, [3, 3], axis=1)

    def test_embedding_scatters_repeated_ids(self):
        w = Tensor(np.zeros((4, 2)), requires_grad=True)
        T.backward(T.sum_(T.embedding(w, np.array([1, 1, 3]))))
        np.testing.assert_array_equal(w.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])

    def test_smooth_l1_regimes(self):
        out = T.smooth_l1(Tensor([0.5, -2.0]), beta=1.0).data
        np.testing.assert_allclose(out, [0.125, 1.5])

    def test_l2_normalize_zero_row(self):
        out = T.l2_normalize(Tensor(np.zeros((1, 3)))).data
        np.testing.assert_array_equal(out, 0)

    def test_scalar_operands_keep_dtype(self):
        x = Tensor(np.ones(2, dtype=np.float32))
        assert (x * 2.5 + 1).dtype == np.float32

    @given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)),
           arrays(np.float64, (2, 3), elements=st.floats(-3, 3)))
    def test_add_mul_gradients_match_closed_form(self, a, b):
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        T.backward(T.sum_(ta * tb + ta))
        np.testing.assert_allclose(ta.grad, b + 1)
        np.testing.assert_allclose(tb.grad, a)


class TestDebugMode:
    def test_non_finite_raises_under_debug(self, monkeypatch):
        monkeypatch.setattr(T, "DEBUG", True)
        with np.errstate(invalid="ignore"), pytest.raises(T.NonFiniteError, match="log"):
            T.log(Tensor([-1.0]))

    def test_relative_error_floor(self):
        assert T.relative_error(np.zeros(3), np.zeros(3)) == 0.0
        assert T.relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
