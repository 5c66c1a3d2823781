import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from convemo import numerics as nx
from convemo.errors import ContractError, DegenerateRowError, DimensionError, ConfigError, NumericError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self, rng):
        A = rng.normal(size=(2, 3))
        np.testing.assert_array_equal((nx.tensor(np.eye(2)) @ nx.tensor(A)).data, A)

    def test_hand_product(self):
        out = nx.tensor([[1, 2], [3, 4]]) @ nx.tensor([[0], [1]])
        np.testing.assert_array_equal(out.data, [[2], [4]])

    def test_annihilator(self):
        out = nx.tensor(np.zeros((2, 3))) @ nx.tensor(np.ones((3, 2)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nx.tensor(np.ones((2, 3))) @ nx.tensor(np.ones((2, 3)))

    def test_batched_broadcast_gradient(self, rng):
        a = nx.tensor(rng.normal(size=(3, 2, 4)))
        b = nx.tensor(rng.normal(size=(4, 5)))
        assert nx.finite_diff_check(lambda _: (a @ b).sum() * (a @ b).sum(), [a, b]) < 1e-6


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nx.softmax_rows(nx.tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])

    def test_no_overflow(self):
        out = nx.softmax_rows(nx.tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)

    def test_closed_form(self):
        out = nx.softmax_rows(nx.tensor([[math.log(2.0), 0.0]])).data
        np.testing.assert_allclose(out, [[2 / 3, 1 / 3]], rtol=1e-14)

    def test_masked_entries_exactly_zero(self):
        out = nx.softmax_rows(nx.tensor([[3.0, 1.0, 2.0]]), np.array([[True, False, True]])).data
        assert out[0, 1] == 0.0
        assert abs(out.sum() - 1.0) < 1e-12

    def test_fully_masked_row(self):
        with pytest.raises(DegenerateRowError):
            nx.softmax_rows(nx.tensor([[1.0, 2.0]]), np.array([[False, False]]))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-1e6, 1e6)), st.integers(0, 2 ** 24 - 1))
    def test_rows_sum_to_one(self, x, bits):
        mask = np.array([(bits >> i) & 1 for i in range(24)], dtype=bool).reshape(4, 6)
        mask[:, 0] = True
        out = nx.softmax_rows(nx.tensor(x), mask).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(out[~mask] == 0.0)


class TestGroupNorm:
    def test_constant_input_gives_beta(self):
        x = nx.tensor(np.full((2, 4), 0.1))
        out = nx.group_norm(x, 2, np.ones(4), np.zeros(4)).data
        assert np.all(out == 0.0)
        beta = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_array_equal(nx.group_norm(x, 2, np.ones(4), beta).data, np.tile(beta, (2, 1)))

    def test_two_element_group(self):
        out = nx.group_norm(nx.tensor([[1.0, -1.0]]), 1, np.ones(2), np.zeros(2), eps=1e-5).data
        np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-5)

    def test_zero_gamma_collapses_to_beta(self, rng):
        beta = rng.normal(size=6)
        out = nx.group_norm(nx.tensor(rng.normal(size=(3, 6))), 3, np.zeros(6), beta).data
        np.testing.assert_array_equal(out, np.tile(beta, (3, 1)))

    def test_indivisible_groups(self):
        with pytest.raises(ConfigError):
            nx.group_norm(nx.tensor(np.ones((1, 5))), 2, np.ones(5), np.zeros(5))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (3, 8), elements=finite))
    def test_standardises(self, x):
        out = nx.group_norm(nx.tensor(x), 2, np.ones(8), np.zeros(8)).data.reshape(3, 2, 4)
        xg = x.reshape(3, 2, 4)
        for r in range(3):
            for g in range(2):
                if np.ptp(xg[r, g]) == 0:
                    assert np.all(out[r, g] == 0)
                    continue
                var = xg[r, g].var()
                assert abs(out[r, g].mean()) < 1e-6
                # eps=1e-5 shrinks the variance to var / (var + eps)
                assert abs(out[r, g].var() - var / (var + 1e-5)) < 1e-9
                if var > 0.1:
                    assert abs(out[r, g].var() - 1.0) < 1e-4

    def test_gradient(self, rng):
        x = nx.tensor(rng.normal(size=(2, 3, 8)))
        gamma, beta = nx.tensor(rng.normal(size=8)), nx.tensor(rng.normal(size=8))
        w = rng.normal(size=(2, 3, 8))
        assert nx.finite_diff_check(lambda _: (nx.group_norm(x, 2, gamma, beta) * w).sum(), [x, gamma, beta]) < 1e-4


class TestBackward:
    def test_sum(self):
        x = nx.tensor([1.0, 2.0, 3.0], requires_grad=True)
        nx.backward(x.sum())
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_square(self):
        x = nx.tensor([1.0, 2.0], requires_grad=True)
        nx.backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2, 4])

    def test_sigmoid_at_zero(self):
        x = nx.tensor(0.0, requires_grad=True)
        nx.backward(nx.sigmoid(x))
        assert x.grad == 0.25

    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            nx.backward(nx.tensor([1.0, 2.0], requires_grad=True) * 2)

    def test_shared_subexpression_accumulates(self):
        x = nx.tensor(3.0, requires_grad=True)
        y = x * x
        nx.backward(y + y)
        assert x.grad == 12.0

    def test_tape_is_deterministic(self, rng):
        x0 = rng.normal(size=(3, 4))
        grads = []
        for _ in range(2):
            x = nx.tensor(x0, requires_grad=True)
            tape = nx.backward(nx.softmax_rows(x @ x.T).sum() + nx.elu(x).mean())
            grads.append(x.grad)
        np.testing.assert_array_equal(*grads)
        assert tape.ops()[-1] == "add"

    def test_nan_forward_raises_naming_op(self):
        x = nx.tensor([-1.0], requires_grad=True)
        with pytest.raises(NumericError, match="sqrt"):
            nx.sqrt(x)

    def test_no_grad_records_nothing(self):
        x = nx.tensor([1.0], requires_grad=True)
        with nx.no_grad():
            y = x * 2
        assert not y.requires_grad


class TestFiniteDiff:
    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (5,), elements=st.floats(0.1, 10)), st.lists(st.booleans(), min_size=5, max_size=5))
    def test_quadratic(self, mag, signs):
        # magnitudes bounded away from 0 so rounding of the summed loss stays below 1e-6 relative
        x = nx.tensor(mag * np.where(signs, 1.0, -1.0))
        assert nx.finite_diff_check(lambda t: (t * t).sum(), x) < 1e-6

    def test_constant(self):
        x = nx.tensor([1.0, 2.0])
        assert nx.finite_diff_check(lambda t: nx.tensor(5.0) + 0.0 * t.sum(), x) == 0.0

    def test_rejects_float32(self):
        with pytest.raises(ContractError):
            nx.finite_diff_check(lambda t: t.sum(), nx.tensor([1.0], dtype=np.float32))

    def test_step_range(self):
        with pytest.raises(ConfigError):
            nx.finite_diff_check(lambda t: t.sum(), nx.tensor([1.0]), h=1e-2)

    @pytest.mark.parametrize("fn", [nx.sigmoid, nx.tanh, nx.exp, nx.elu, lambda t: nx.leaky_relu(t, 0.2),
                                    lambda t: nx.log(t * t + 1.0), lambda t: nx.sqrt(t * t + 1.0),
                                    lambda t: nx.softmax_rows(t), nx.log_softmax_rows,
                                    lambda t: t ** 3, lambda t: 1.0 / (t * t + 1.0),
                                    lambda t: nx.concat([t, t * 2], axis=0), lambda t: t[:, 1:],
                                    lambda t: nx.transpose(t) @ t, lambda t: t.mean(axis=0)])
    def test_primitives(self, fn, rng):
        x = nx.tensor(rng.normal(size=(3, 4)) + 0.05)
        w = rng.normal(size=fn(nx.tensor(x.data)).shape)
        assert nx.finite_diff_check(lambda t: (fn(t) * w).sum(), x) < 1e-4


def test_default_dtype_float32_training():
    with nx.default_dtype("float32"):
        t = nx.tensor([1.0, 2.0])
        assert t.dtype == np.float32
        assert (t * 0.5 + 1.0).dtype == np.float32
