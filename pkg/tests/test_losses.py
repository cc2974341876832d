import numpy as np
import pytest

from lrcnn import tensor as T
from lrcnn.losses import (
    LossConfig,
    focal_term,
    head_loss,
    rpn_loss,
    smooth_l1,
    smooth_l1_op,
    total_loss,
)
from lrcnn.rpn import RpnTargets
from lrcnn.tensor import Tensor


class TestFocalTerm:
    def test_confident_positive(self):
        assert abs(focal_term(0.9, 1, 2.0) - 0.0010536) < 1e-7

    def test_gamma_zero_is_cross_entropy(self):
        for p in (0.1, 0.35, 0.72, 0.99):
            for p_star in (0, 1):
                p_t = p if p_star == 1 else 1 - p
                assert abs(focal_term(p, p_star, 0.0) - (-np.log(p_t))) < 1e-12

    def test_negative_case_uses_complement(self):
        # p* = 0 -> p_t = 0.7; exact value 0.0321007...
        assert abs(focal_term(0.3, 0, 2.0) - (-(0.3**2) * np.log(0.7))) < 1e-12
        assert abs(focal_term(0.3, 0, 2.0) - 0.0321) < 1e-5

    def test_nonnegative_and_monotone_in_pt(self):
        values = [focal_term(p, 1, 2.0) for p in np.linspace(0.01, 0.99, 50)]
        assert all(v >= 0 for v in values)
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_even_gamma_sign_identity(self):
        # (p_t - 1)^gamma == (1 - p_t)^gamma for gamma = 2
        for p_t in np.linspace(0.01, 0.99, 17):
            assert (p_t - 1.0) ** 2 == (1.0 - p_t) ** 2

    def test_extreme_probabilities_clamped(self):
        assert np.isfinite(focal_term(0.0, 1, 2.0))
        assert np.isfinite(focal_term(1.0, 0, 2.0))


class TestSmoothL1:
    def test_quadratic_branch(self):
        assert smooth_l1(0.5, 0.0) == 0.125

    def test_boundary_continuous_from_both_branches(self):
        assert smooth_l1(1.0, 0.0) == 0.5
        assert abs(smooth_l1(1.0 - 1e-9, 0.0) - 0.5) < 1e-8
        assert abs(smooth_l1(1.0 + 1e-9, 0.0) - 0.5) < 1e-8

    def test_linear_branch(self):
        assert smooth_l1(2.0, 0.0) == 1.5

    def test_derivative_continuous_at_junction(self):
        eps = 1e-7
        inner = (smooth_l1(1.0, 0.0) - smooth_l1(1.0 - eps, 0.0)) / eps
        outer = (smooth_l1(1.0 + eps, 0.0) - smooth_l1(1.0, 0.0)) / eps
        assert abs(inner - 1.0) < 1e-6 and abs(outer - 1.0) < 1e-6


def scalar_loop_rpn_oracle(probs, targets, deltas, cfg):
    sampled = np.flatnonzero(targets.sampled)
    n_pos = int((targets.labels[sampled] == 1).sum())
    cls = sum(focal_term(probs[i], int(targets.labels[i]), cfg.gamma) for i in sampled)
    cls *= cfg.alpha / max(1, len(sampled))
    reg = 0.0
    for i in sampled:
        if targets.labels[i] == 1:
            for k in range(4):
                reg += smooth_l1(deltas[i, k], targets.deltas[i, k])
    reg *= cfg.lam / max(1, n_pos)
    return cls, reg


class TestRpnLoss:
    def test_perfect_predictions_vanish(self):
        labels = np.array([1, 0, 0, 1])
        deltas = np.zeros((4, 4))
        targets = RpnTargets(labels, deltas, labels >= 0)
        probs = Tensor(np.array([1.0, 0.0, 0.0, 1.0]))
        res = rpn_loss(probs, targets, Tensor(deltas), LossConfig())
        assert res.total.item() < 1e-20

    def test_closed_form_composite(self):
        # one positive anchor, p = 0.5, four unit delta errors
        labels = np.array([1])
        targets = RpnTargets(labels, np.zeros((1, 4)), labels >= 0)
        res = rpn_loss(Tensor([0.5]), targets, Tensor(np.ones((1, 4))), LossConfig())
        expect = 0.25 * np.log(2.0) + 4 * 0.5
        assert abs(res.total.item() - expect) < 1e-12
        assert abs(res.total.item() - 2.173287) < 1e-6

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            n = int(rng.integers(4, 64))
            labels = rng.choice([1, 0, 0, -1], n)
            deltas_t = np.where((labels == 1)[:, None], rng.standard_normal((n, 4)), 0.0)
            targets = RpnTargets(labels, deltas_t, labels >= 0)
            probs = rng.uniform(0.01, 0.99, n)
            deltas = rng.standard_normal((n, 4))
            res = rpn_loss(Tensor(probs), targets, Tensor(deltas), LossConfig())
            cls, reg = scalar_loop_rpn_oracle(probs, targets, deltas, LossConfig())
            assert abs(res.cls.item() - cls) < 1e-12
            assert abs(res.reg.item() - reg) < 1e-12

    def test_empty_sample_returns_zero(self):
        labels = np.array([-1, -1])
        targets = RpnTargets(labels, np.zeros((2, 4)), np.zeros(2, dtype=bool))
        res = rpn_loss(Tensor([0.5, 0.5]), targets, Tensor(np.zeros((2, 4))), LossConfig())
        assert res.total.item() == 0.0


class TestHeadLoss:
    def test_background_only_confident_vanishes(self):
        probs = Tensor(np.array([[1.0, 0.0, 0.0]] * 3))
        res = head_loss(probs, np.zeros(3, dtype=int), Tensor(np.zeros((3, 12))), np.zeros((3, 4)), LossConfig())
        assert res.total.item() < 1e-20

    def test_single_foreground_focal_only(self):
        probs = np.array([[0.1, 0.1, 0.8]])
        res = head_loss(Tensor(probs), np.array([2]), Tensor(np.zeros((1, 12))), np.zeros((1, 4)), LossConfig())
        assert abs(res.cls.item() - (-(0.2**2) * np.log(0.8))) < 1e-12
        assert res.reg.item() == 0.0

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(1)
        cfg = LossConfig()
        for _ in range(10):
            n = int(rng.integers(2, 64))
            labels = rng.choice([0, 0, 1, 2], n)
            logits = rng.standard_normal((n, 3))
            probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
            deltas = rng.standard_normal((n, 12))
            gt_deltas = np.where((labels > 0)[:, None], rng.standard_normal((n, 4)), 0.0)
            res = head_loss(Tensor(probs), labels, Tensor(deltas), gt_deltas, cfg)
            n_pos = int((labels > 0).sum())
            cls = sum(
                -((1 - probs[i, labels[i]]) ** cfg.gamma) * np.log(probs[i, labels[i]])
                for i in range(n)
            ) * (cfg.alpha / max(1, n))
            reg = sum(
                smooth_l1(deltas[i, 4 * labels[i] + k], gt_deltas[i, k])
                for i in range(n)
                if labels[i] > 0
                for k in range(4)
            ) * (cfg.lam / max(1, n_pos))
            assert abs(res.cls.item() - cls) < 1e-12
            assert abs(res.reg.item() - reg) < 1e-12

    def test_empty_batch_returns_zero(self):
        res = head_loss(Tensor(np.zeros((0, 3))), np.zeros(0, dtype=int), Tensor(np.zeros((0, 12))), np.zeros((0, 4)), LossConfig())
        assert res.total.item() == 0.0


class TestTotalLoss:
    def test_zero_sum(self):
        assert total_loss(Tensor(np.zeros(())), Tensor(np.zeros(()))).item() == 0.0

    def test_plain_sum(self):
        assert total_loss(Tensor(np.array(1.5)), Tensor(np.array(2.25))).item() == 3.75

    def test_gradients_reach_both_branches(self):
        def fn(ts):
            a = T.sum_all(T.mul(ts[0], ts[0]))
            b = T.sum_all(T.mul_scalar(ts[1], 3.0))
            return total_loss(a, b)

        err = T.grad_check(fn, [np.array([1.0, 2.0]), np.array([0.5])])
        assert err < 1e-4

    def test_rejects_non_scalars(self):
        with pytest.raises(ValueError):
            total_loss(Tensor(np.zeros(2)), Tensor(np.zeros(())))


class TestSmoothL1Op:
    def test_matches_scalar(self):
        d = np.array([-2.3, -1.0, -0.4, 0.0, 0.6, 1.0, 1.7])
        out = smooth_l1_op(Tensor(d))
        for i, v in enumerate(d):
            assert abs(out.data[i] - smooth_l1(v, 0.0)) < 1e-15

    def test_gradcheck(self):
        d = np.array([-2.3, -0.4, 0.61, 1.7, 0.2])
        assert T.grad_check(lambda ts: T.sum_all(smooth_l1_op(ts[0])), [d]) < 1e-4


class TestConfig:
    def test_bad_gamma_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(gamma=-1.0)

    def test_bad_rule_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(n_cls_rule="mean")
