import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_grad_matches
from convemo import numerics as nx
from convemo.diffusion_fusion import (FusionParams, ModalityQKV, attention_from_logits, cross_modal_attention,
                                      degree_normalize, fuse, gated_fuse, self_attention_matrix,
                                      transfer_values)
from convemo.errors import ConfigError, DegenerateRowError, DimensionError


def T(x):
    return nx.tensor(np.asarray(x, dtype=float))


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class TestSelfAttention:
    def test_zero_projections_uniform(self, rng):
        z = np.zeros((4, 4))
        S = self_attention_matrix(T(rng.normal(size=(5, 4))), ModalityQKV(T(z), T(z), T(z))).data
        np.testing.assert_allclose(S, 0.2)

    def test_uniform_over_valid_keys(self, rng):
        z = np.zeros((3, 3))
        S = self_attention_matrix(T(rng.normal(size=(4, 3))), ModalityQKV(T(z), T(z), T(z)),
                                  mask=[True, True, True, False]).data
        np.testing.assert_allclose(S[:3, :3], 1 / 3)
        assert np.all(S[:, 3] == 0) and np.all(S[3] == 0)

    def test_closed_form_logits(self):
        S = attention_from_logits(T([[0.0, np.log(3)], [0.0, 0.0]])).data
        np.testing.assert_allclose(S, [[0.25, 0.75], [0.5, 0.5]], atol=1e-12)

    def test_scale_is_d_by_default(self, rng):
        Z = rng.normal(size=(3, 4))
        p = ModalityQKV(*(T(rng.normal(size=(4, 4))) for _ in range(3)))
        Q, K = Z @ p.W_Q.data, Z @ p.W_K.data
        np.testing.assert_allclose(self_attention_matrix(T(Z), p).data, _softmax(Q @ K.T / 4), atol=1e-12)
        np.testing.assert_allclose(self_attention_matrix(T(Z), p, scale_sqrt=True).data,
                                   _softmax(Q @ K.T / 2), atol=1e-12)


class TestDegreeNormalize:
    def test_scaled_identity(self):
        np.testing.assert_allclose(degree_normalize(T(2 * np.eye(3))).data, np.eye(3))

    def test_ones(self):
        np.testing.assert_allclose(degree_normalize(T(np.ones((2, 2)))).data, 0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2 ** 31 - 1))
    def test_row_stochastic_fixed_point(self, N, seed):
        S = _softmax(np.random.default_rng(seed).normal(size=(N, N)) * 3)
        np.testing.assert_allclose(degree_normalize(T(S)).data, S, atol=1e-12, rtol=0)

    def test_sym_uses_column_sums(self):
        S = np.array([[0.5, 0.5], [1.0, 0.0]])
        out = degree_normalize(T(S), mode="sym").data
        c = S.sum(0)
        np.testing.assert_allclose(out, S / np.sqrt(c)[None, :])

    def test_zero_row(self):
        with pytest.raises(DegenerateRowError):
            degree_normalize(T([[1.0, 0.0], [0.0, 0.0]]))

    def test_padded_rows_ignored(self):
        out = degree_normalize(T([[2.0, 0.0], [0.0, 0.0]]), mask=[True, False]).data
        np.testing.assert_allclose(out, [[1.0, 0.0], [0.0, 0.0]])

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            degree_normalize(T(np.eye(2)), mode="col")


class TestCrossModal:
    def test_gamma_zero_bit_equal(self, rng):
        St, Sm = _softmax(rng.normal(size=(4, 4))), _softmax(rng.normal(size=(4, 4)))
        out = cross_modal_attention(T(rng.random((4, 4))), T(rng.random((4, 4))), T(St), T(Sm), 0.0).data
        np.testing.assert_array_equal(out, St + Sm)

    def test_gamma_one(self, rng):
        A, B = rng.random((3, 3)), rng.random((3, 3))
        out = cross_modal_attention(T(A), T(B), T(rng.random((3, 3))), T(rng.random((3, 3))), 1.0).data
        np.testing.assert_allclose(out, A @ B.T, atol=1e-12)

    def test_half_mix_identity(self):
        I = np.eye(3)
        np.testing.assert_allclose(cross_modal_attention(T(I), T(I), T(I), T(I), 0.5).data, 1.5 * I)

    @pytest.mark.parametrize("gamma", [-0.1, 1.01])
    def test_gamma_range(self, gamma):
        I = T(np.eye(2))
        with pytest.raises(ConfigError):
            cross_modal_attention(I, I, I, I, gamma)


class TestTransfer:
    def test_identity(self, rng):
        V = rng.normal(size=(3, 2))
        np.testing.assert_array_equal(transfer_values(T(np.eye(3)), T(V)).data, V)

    def test_zero(self, rng):
        assert np.all(transfer_values(T(np.zeros((3, 3))), T(rng.normal(size=(3, 2)))).data == 0)

    def test_uniform_rows_average(self, rng):
        V = rng.normal(size=(4, 3))
        out = transfer_values(T(np.full((4, 4), 0.25)), T(V)).data
        np.testing.assert_allclose(out, np.tile(V.mean(0), (4, 1)), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            transfer_values(T(np.eye(3)), T(np.ones((2, 2))))


class TestGatedFuse:
    def test_zero_gate(self, rng):
        Z, Ua, Uv = (rng.normal(size=(3, 4)) for _ in range(3))
        out = gated_fuse(T(Z), T(Ua), T(Uv), T(np.zeros((8, 4)))).data
        np.testing.assert_allclose(out, Z + 0.5 * (Ua + Uv), atol=1e-12)

    def test_equal_candidates(self, rng):
        Z, U = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        out = gated_fuse(T(Z), T(U), T(U), T(rng.normal(size=(8, 4)) * 5)).data
        np.testing.assert_allclose(out, Z + U, atol=1e-12)

    def test_saturated_gate(self, rng):
        Z, Uv = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        out = gated_fuse(T(Z), T(np.zeros((3, 4))), T(Uv), T(np.zeros((8, 4))), bias=30.0).data
        np.testing.assert_allclose(out, Z, atol=1e-12 * 10)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            gated_fuse(T(np.ones((3, 4))), T(np.ones((3, 4))), T(np.ones((2, 4))), T(np.zeros((8, 4))))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_residual_is_convex_combination(self, seed):
        rng = np.random.default_rng(seed)
        Z, Ua, Uv = (rng.normal(size=(4, 5)) * 3 for _ in range(3))
        out, gate = gated_fuse(T(Z), T(Ua), T(Uv), T(rng.normal(size=(10, 5)) * 2), return_gate=True)
        r = out.data - Z
        assert np.all((gate.data >= 0) & (gate.data <= 1))  # saturates to exactly 1.0 in floating point
        tol = 1e-12 * (1 + np.abs(Ua) + np.abs(Uv))
        assert np.all(r >= np.minimum(Ua, Uv) - tol) and np.all(r <= np.maximum(Ua, Uv) + tol)


def _streams(rng, N=4, d=6):
    return {m: nx.tensor(rng.normal(size=(1, N, d))) for m in "tav"}


class TestFuse:
    def test_text_only_passthrough(self, rng):
        Z = _streams(rng)
        p = FusionParams.init(rng, 6, "t")
        np.testing.assert_array_equal(fuse(Z["t"], {}, p).data, Z["t"].data)

    def test_single_modality_adds_transfer(self, rng):
        Z = _streams(rng)
        p = FusionParams.init(rng, 6, "ta")
        out, parts = fuse(Z["t"], {"a": Z["a"]}, p, return_parts=True)
        np.testing.assert_allclose(out.data, Z["t"].data + parts["U_a"].data, atol=1e-12)

    def test_gamma_zero_matches_sum_path(self, rng):
        Z = _streams(rng)
        p = FusionParams.init(rng, 6)
        out, parts = fuse(Z["t"], {"a": Z["a"], "v": Z["v"]}, p, gamma=0.0, return_parts=True)
        for m in "av":
            expected = (parts["S_t"] + parts[f"S_{m}"]).data @ (Z[m].data @ p.qkv[m].W_V.data)
            np.testing.assert_array_equal(parts[f"U_{m}"].data, expected)

    def test_padding_does_not_leak(self, rng):
        Z = _streams(rng, N=5)
        mask = np.array([[True] * 3 + [False] * 2])
        p = FusionParams.init(rng, 6)
        a = fuse(Z["t"], {"a": Z["a"], "v": Z["v"]}, p, mask=mask).data
        for m in "tav":
            Z[m].data[0, 3:] = 50.0
        b = fuse(Z["t"], {"a": Z["a"], "v": Z["v"]}, p, mask=mask).data
        np.testing.assert_array_equal(a, b)
        assert np.all(b[0, 3:] == 0)

    def test_information_flow(self, rng):
        Z = _streams(rng)
        p = FusionParams.init(rng, 6)
        out = fuse(Z["t"], {"a": Z["a"], "v": Z["v"]}, p)
        nx.backward((out * rng.normal(size=out.shape)).sum())
        # text values are never transferred; everything else is on the path
        assert p.qkv["t"].W_V.grad is None or np.all(p.qkv["t"].W_V.grad == 0)
        for m in "tav":
            assert np.any(p.qkv[m].W_Q.grad != 0) and np.any(p.qkv[m].W_K.grad != 0)
        assert np.any(p.qkv["a"].W_V.grad != 0) and np.any(p.qkv["v"].W_V.grad != 0)

    def test_audio_never_reaches_text_keys(self, rng):
        Z = _streams(rng)
        p = FusionParams.init(rng, 6)
        base = fuse(Z["t"], {"a": Z["a"], "v": Z["v"]}, p, return_parts=True)[1]["S_t"].data
        Z["a"].data[...] = rng.normal(size=Z["a"].shape)
        after = fuse(Z["t"], {"a": Z["a"], "v": Z["v"]}, p, return_parts=True)[1]["S_t"].data
        np.testing.assert_array_equal(base, after)

    @pytest.mark.parametrize("gamma,mode", [(1.0, "row"), (0.4, "row"), (0.7, "sym")])
    def test_gradients(self, gamma, mode, rng):
        Z = _streams(rng, N=3, d=4)
        p = FusionParams.init(rng, 4)
        for q in p.qkv.values():
            for t in (q.W_Q, q.W_K):
                t.data *= 4  # sharper maps so the attention gradients are well above roundoff
        w = rng.normal(size=(1, 3, 4))
        params = list(Z.values()) + [t for q in p.qkv.values() for t in (q.W_Q, q.W_K, q.W_V)] + [p.W_g]
        params = [t for t in params if t is not p.qkv["t"].W_V]
        assert_grad_matches(lambda: (fuse(Z["t"], {"a": Z["a"], "v": Z["v"]}, p, gamma, degree_mode=mode)
                                     * w).sum(), params)
