import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convemo import numerics as nx
from convemo.errors import DataError
from convemo.head_loss import (Classifier, HeadParams, class_weights_from_labels, compute_metrics, fuse_logits,
                               fusion_loss, modality_logits, predict, self_supervised_loss, total_loss)
from oracles import metrics_oracle


def T(x):
    return nx.tensor(np.asarray(x, dtype=float))


class TestLogits:
    def test_zero_weights_give_bias(self, rng):
        out = modality_logits(T(rng.normal(size=(3, 4))), Classifier(T(np.zeros((4, 2))), T([1.0, -2.0]))).data
        np.testing.assert_array_equal(out, np.tile([1.0, -2.0], (3, 1)))

    def test_identity(self, rng):
        Z = rng.normal(size=(3, 3))
        np.testing.assert_array_equal(modality_logits(T(Z), Classifier(T(np.eye(3)), T(np.zeros(3)))).data, Z)

    def test_one_feature(self):
        out = modality_logits(T([[2.0]]), Classifier(T([[1.0, -1.0]]), T([0.0, 0.0]))).data
        np.testing.assert_array_equal(out, [[2.0, -2.0]])

    def test_independent_heads(self, rng):
        p = HeadParams.init(rng, 4, 3, {"t": 3.0, "a": 1.0, "v": 0.3})
        assert p.classifiers["t"].W is not p.classifiers["a"].W
        assert p.alpha == {"t": 3.0, "a": 1.0, "v": 0.3}


class TestFuseLogits:
    def test_text_only_signal(self, rng):
        Lt = rng.normal(size=(3, 4))
        _, Y = fuse_logits({"t": T(Lt), "a": T(np.zeros((3, 4))), "v": T(np.zeros((3, 4)))},
                           {"t": 1, "a": 1, "v": 1})
        e = np.exp(Lt - Lt.max(1, keepdims=True))
        np.testing.assert_allclose(Y.data, e / e.sum(1, keepdims=True), atol=1e-12)

    def test_weighted_sum(self, rng):
        L = {m: rng.normal(size=(2, 3)) for m in "tav"}
        Zf, _ = fuse_logits({m: T(v) for m, v in L.items()}, {"t": 3.0, "a": 1.0, "v": 0.3})
        np.testing.assert_allclose(Zf.data, 3 * L["t"] + L["a"] + 0.3 * L["v"], atol=1e-12)

    def test_ties_go_to_lowest_index(self):
        np.testing.assert_array_equal(predict(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])), [0, 1])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 100.0))
    def test_argmax_invariant_to_alpha_scaling(self, seed, c):
        rng = np.random.default_rng(seed)
        L = {m: T(rng.normal(size=(6, 5))) for m in "tav"}
        alpha = {"t": 3.0, "a": 1.0, "v": 0.3}
        _, Y1 = fuse_logits(L, alpha)
        _, Y2 = fuse_logits(L, {m: c * a for m, a in alpha.items()})
        np.testing.assert_array_equal(predict(Y1), predict(Y2))


class TestFusionLoss:
    def test_uniform_is_log_c(self):
        Y = T(np.full((4, 5), 0.2))
        assert fusion_loss(Y, [0, 1, 2, 3], np.ones(5), np.ones(4, bool)).item() == pytest.approx(math.log(5))

    def test_perfect_is_zero(self):
        Y = T(np.eye(3))
        assert fusion_loss(Y, [0, 1, 2], np.ones(3), np.ones(3, bool)).item() == pytest.approx(0.0, abs=1e-12)

    def test_confident_wrong_is_clamped(self):
        loss = fusion_loss(T([[1.0, 0.0]]), [1], np.ones(2), [True]).item()
        assert loss == pytest.approx(-math.log(1e-12))

    def test_doubling_weights(self, rng):
        Y = T(rng.dirichlet(np.ones(3), size=5))
        y, mask = rng.integers(0, 3, 5), np.ones(5, bool)
        w = np.array([0.5, 1.0, 2.0])
        assert fusion_loss(Y, y, 2 * w, mask).item() == pytest.approx(2 * fusion_loss(Y, y, w, mask).item())

    def test_class_weight_applied(self):
        Y = T([[0.5, 0.5], [0.25, 0.75]])
        loss = fusion_loss(Y, [0, 1], np.array([2.0, 1.0]), np.ones(2, bool)).item()
        assert loss == pytest.approx(-(2 * math.log(0.5) + math.log(0.75)) / 2)

    def test_padded_rows_excluded(self, rng):
        Y = rng.dirichlet(np.ones(3), size=(1, 4))
        mask = np.array([[True, True, False, False]])
        a = fusion_loss(T(Y), [[0, 1, 2, 2]], np.ones(3), mask).item()
        Y[0, 2:] = [1e-30, 1e-30, 1.0]
        b = fusion_loss(T(Y), [[0, 1, 0, 0]], np.ones(3), mask).item()
        assert a == b

    def test_empty_batch(self):
        with pytest.raises(DataError):
            fusion_loss(T(np.full((2, 2), 0.5)), [0, 1], np.ones(2), [False, False])

    def test_gradient(self, rng):
        L = T(rng.normal(size=(4, 3)))
        y, mask = rng.integers(0, 3, 4), np.ones(4, bool)
        w = np.array([0.7, 1.0, 1.3])
        assert nx.finite_diff_check(lambda t: fusion_loss(nx.softmax_rows(t), y, w, mask), L) < 1e-6


class TestSelfSupervised:
    def test_zero_ce(self):
        L_u = self_supervised_loss({"t": T(np.eye(2)), "a": T(np.eye(2))}, [0, 1], np.ones(2, bool))
        assert L_u.item() == pytest.approx(0.0, abs=1e-20)

    def test_single_modality_value(self):
        p = math.exp(-2.0)
        Y = T([[p, 1 - p]])
        L_u, lam = self_supervised_loss({"a": Y}, [0], [True], 0.1, return_weights=True)
        assert lam["a"] == pytest.approx(0.2)
        assert L_u.item() == pytest.approx(0.4)

    def test_factor_zero(self, rng):
        Y = {m: T(rng.dirichlet(np.ones(3), size=4)) for m in "tav"}
        assert self_supervised_loss(Y, [0, 1, 2, 0], np.ones(4, bool), 0.0).item() == 0.0

    def test_weights_are_detached(self, rng):
        logits = {m: T(rng.normal(size=(5, 3))) for m in "ta"}
        y, mask = rng.integers(0, 3, 5), np.ones(5, bool)
        for t in logits.values():
            t.requires_grad = True
        L_u, lam = self_supervised_loss({m: nx.softmax_rows(t) for m, t in logits.items()}, y, mask, 0.1,
                                        return_weights=True)
        nx.backward(L_u)
        # manual second pass: gradient of each plain CE, scaled by the recorded weight
        for m, t in logits.items():
            src = T(t.data.copy())
            src.requires_grad = True
            nx.backward(fusion_loss(nx.softmax_rows(src), y, np.ones(3), mask))
            np.testing.assert_allclose(t.grad, lam[m] * src.grad, atol=1e-14)

    def test_frozen_weights_override(self, rng):
        Y = {"t": T(rng.dirichlet(np.ones(3), size=3))}
        _, lam = self_supervised_loss(Y, [0, 1, 2], np.ones(3, bool), 0.1, return_weights=True,
                                      weights={"t": 0.5})
        assert lam == {"t": 0.5}


def test_total_loss():
    assert total_loss(T(1.5), T(0.3)).item() == pytest.approx(1.8)
    assert total_loss(T(1.5), T(0.0)).item() == 1.5


def test_class_weights_inverse_frequency():
    w = class_weights_from_labels([0, 0, 0, 1], 3)
    np.testing.assert_allclose(w[:2], [0.5, 1.5])
    assert w[2] == 1.0


class TestMetrics:
    def test_hand_example(self):
        r = compute_metrics([0, 1, 1, 1], [0, 0, 1, 1])
        assert r.w_acc == pytest.approx(0.75)
        assert r.w_f1 == pytest.approx(0.73333, abs=1e-4)
        np.testing.assert_allclose(r.f1, [2 / 3, 0.8])

    def test_perfect(self):
        r = compute_metrics([2, 0, 1], [2, 0, 1])
        assert r.w_acc == 1.0 and r.w_f1 == 1.0

    def test_all_one_class(self):
        assert compute_metrics([1] * 6, [0, 1] * 3).w_acc == pytest.approx(0.5)

    def test_absent_class_has_no_weight(self):
        r = compute_metrics([0, 2, 1], [0, 1, 1], n_classes=3)
        assert r.support[2] == 0 and r.precision[2] == 0.0

    def test_mask(self):
        r = compute_metrics([[0, 1, 1]], [[0, 1, 0]], mask=[[True, True, False]])
        assert r.w_acc == 1.0

    def test_empty(self):
        with pytest.raises(DataError):
            compute_metrics([0], [0], mask=[False])

    def test_csv_and_table(self):
        r = compute_metrics([0, 1, 1, 1], [0, 0, 1, 1], class_names=["neg", "pos"])
        lines = r.to_csv().strip().splitlines()
        assert lines[0] == "class,support,accuracy,precision,recall,f1"
        assert lines[-1].startswith("weighted,4,0.750000")
        assert "neg" in r.table()

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 40).flatmap(lambda n: st.tuples(st.lists(st.integers(0, 4), min_size=n, max_size=n),
                                                          st.lists(st.integers(0, 4), min_size=n, max_size=n))))
    def test_matches_oracle(self, pair):
        y, p = pair
        r = compute_metrics(p, y, n_classes=5)
        acc, f1 = metrics_oracle(y, p)
        assert r.w_acc == pytest.approx(acc, abs=1e-12)
        assert r.w_f1 == pytest.approx(f1, abs=1e-12)
        assert r.w_acc == pytest.approx(sum(a == b for a, b in zip(y, p)) / len(y), abs=1e-12)
