"""Loss-term checks: fixed-point fixtures, scalar-walk oracle comparisons,
the weight ladder, monotonicity, and saturation behavior."""

import math

import numpy as np
import pytest

import oracles
from lesionseq import engine as eng
from lesionseq import losses
from lesionseq.engine import Tensor
from lesionseq.losses import BcrConfig


def logits_for_prob(p: float, shape) -> Tensor:
    """Two-class logits whose foreground softmax equals p everywhere."""
    d = math.log(p / (1.0 - p))
    data = np.zeros((2,) + tuple(shape))
    data[1] = d
    return Tensor(data)


class TestDiceLoss:
    def test_perfect_foreground_prediction(self):
        target = np.ones((3, 3, 3))
        logits = Tensor(np.stack([np.full((3, 3, 3), -20.0), np.full((3, 3, 3), 20.0)]))
        assert float(losses.dice_loss(logits, target)) < 1e-6

    def test_total_miss(self):
        target = np.ones((3, 3, 3))
        logits = Tensor(np.stack([np.full((3, 3, 3), 20.0), np.full((3, 3, 3), -20.0)]))
        assert float(losses.dice_loss(logits, target)) > 1.0 - 1e-4

    def test_matches_scalar_reference(self, rng):
        logits = Tensor(rng.uniform(-2, 2, (2, 2, 3, 2)))
        target = (rng.random((2, 3, 2)) < 0.4).astype(np.float64)
        got = float(losses.dice_loss(logits, target))
        d = logits.data[1] - logits.data[0]
        p = 1.0 / (1.0 + np.exp(-d))
        s = losses.DICE_SMOOTH
        expected = 1.0 - (2.0 * float((p * target).sum()) + s) / \
            (float(p.sum()) + float(target.sum()) + s)
        assert abs(got - expected) < 1e-12

    def test_joint_permutation_invariance(self, rng):
        logits = rng.uniform(-2, 2, (2, 4, 4, 4))
        target = (rng.random((4, 4, 4)) < 0.3).astype(np.float64)
        perm = rng.permutation(64)
        logits_p = logits.reshape(2, -1)[:, perm].reshape(2, 4, 4, 4)
        target_p = target.reshape(-1)[perm].reshape(4, 4, 4)
        a = float(losses.dice_loss(Tensor(logits), target))
        b = float(losses.dice_loss(Tensor(logits_p), target_p))
        assert abs(a - b) < 1e-12

    def test_non_binary_target_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            losses.dice_loss(Tensor(np.zeros((2, 2, 2, 2))), np.full((2, 2, 2), 0.5))


class TestCrossEntropy:
    def test_equal_logits_give_ln2(self, rng):
        target = (rng.random((3, 3, 3)) < 0.5).astype(np.float64)
        ce = float(losses.cross_entropy_loss(Tensor(np.zeros((2, 3, 3, 3))), target))
        assert abs(ce - math.log(2.0)) < 1e-12

    def test_large_correct_margin_vanishes(self):
        target = np.ones((2, 2, 2))
        logits = Tensor(np.stack([np.full((2, 2, 2), -30.0), np.full((2, 2, 2), 30.0)]))
        assert float(losses.cross_entropy_loss(logits, target)) < 1e-12

    def test_matches_64bit_reference(self, rng):
        logits = rng.uniform(-3, 3, (2, 2, 2, 2))
        target = (rng.random((2, 2, 2)) < 0.5).astype(np.float64)
        got = float(losses.cross_entropy_loss(Tensor(logits), target))
        # direct log-softmax evaluation
        z = logits - logits.max(axis=0, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
        picked = np.where(target.astype(bool), logp[1], logp[0])
        assert abs(got + picked.mean()) < 1e-12

    def test_joint_permutation_invariance(self, rng):
        logits = rng.uniform(-2, 2, (2, 4, 4, 4))
        target = (rng.random((4, 4, 4)) < 0.3).astype(np.float64)
        perm = rng.permutation(64)
        logits_p = logits.reshape(2, -1)[:, perm].reshape(2, 4, 4, 4)
        target_p = target.reshape(-1)[perm].reshape(4, 4, 4)
        a = float(losses.cross_entropy_loss(Tensor(logits), target))
        b = float(losses.cross_entropy_loss(Tensor(logits_p), target_p))
        assert abs(a - b) < 1e-12


class TestConsistencyLevelLoss:
    def test_identical_features_zero(self, rng):
        k = Tensor(rng.uniform(-1, 1, (2, 2, 2, 2)))
        cfg = BcrConfig.for_levels(1)
        for delta_pair in ((3, 3), (4, 2), (6, 0)):
            out = losses.birads_level_loss(k, Tensor(k.data.copy()), *delta_pair, cfg)
            assert float(out) == 0.0

    def test_unit_distance_zero_delta_fixture(self):
        # squared distance exactly 1, same scores, eps 0.1
        curr = Tensor(np.array([1.0, 0.0, 0.0, 0.0]).reshape(1, 4, 1, 1))
        prior = Tensor(np.zeros((1, 4, 1, 1)))
        cfg = BcrConfig(eps=0.1, layer_weights=(1.0,))
        got = float(losses.birads_level_loss(curr, prior, 3, 3, cfg))
        assert abs(got - math.tanh(1.0) / 0.1) < 1e-12
        assert abs(got - 7.615941559557649) < 1e-9

    def test_strictly_decreasing_in_score_change(self, rng):
        curr = Tensor(rng.uniform(-1, 1, (2, 2, 2, 2)))
        prior = Tensor(rng.uniform(-1, 1, (2, 2, 2, 2)))
        cfg = BcrConfig(eps=0.1, layer_weights=(1.0,))
        vals = [float(losses.birads_level_loss(curr, prior, b, 0, cfg)) for b in (0, 1, 2, 3)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_upper_bound_one_over_delta_plus_eps(self, rng):
        # strict bound below tanh's float64 saturation point; <= at saturation
        cfg = BcrConfig(eps=0.1, layer_weights=(1.0,))
        for _ in range(10):
            curr = Tensor(rng.uniform(-0.1, 0.1, (2, 4, 4, 4)))
            prior = Tensor(rng.uniform(-0.1, 0.1, (2, 4, 4, 4)))
            delta = int(rng.integers(0, 4))
            v = float(losses.birads_level_loss(curr, prior, 3, 3 + delta, cfg))
            assert 0.0 <= v < 1.0 / (delta + cfg.eps)
        big_c = Tensor(rng.uniform(-3, 3, (2, 4, 4, 4)))
        big_p = Tensor(rng.uniform(-3, 3, (2, 4, 4, 4)))
        assert float(losses.birads_level_loss(big_c, big_p, 3, 3, cfg)) <= 1.0 / cfg.eps

    def test_oracle_self_checks(self, rng):
        k = rng.uniform(-1, 1, 12).tolist()
        assert oracles.loop_consistency_loss(k, list(k), 4, 2, eps=0.1) == 0.0
        g = oracles.finite_diff_grad(lambda x: 0.5 * float((x ** 2).sum()),
                                     np.array([0.5, -1.5, 2.0]))
        np.testing.assert_allclose(g, [0.5, -1.5, 2.0], atol=1e-9)

    def test_matches_scalar_walk_oracle(self, rng):
        cfg_sum = BcrConfig(eps=0.1, layer_weights=(1.0,), reduction="sum")
        cfg_mean = BcrConfig(eps=0.1, layer_weights=(1.0,), reduction="mean")
        for delta, prior_score in ((0, 4), (1, 3), (3, 1)):
            curr = rng.uniform(-0.3, 0.3, 16)
            prior = rng.uniform(-0.3, 0.3, 16)
            tc = Tensor(curr.reshape(1, 4, 2, 2))
            tp = Tensor(prior.reshape(1, 4, 2, 2))
            got = float(losses.birads_level_loss(tc, tp, 4, prior_score, cfg_sum))
            ref = oracles.loop_consistency_loss(curr, prior, 4, prior_score, 0.1, "sum")
            assert abs(got - ref) < 1e-12
            got = float(losses.birads_level_loss(tc, tp, 4, prior_score, cfg_mean))
            ref = oracles.loop_consistency_loss(curr, prior, 4, prior_score, 0.1, "mean")
            assert abs(got - ref) < 1e-12

    def test_gradient_pulls_current_toward_prior(self, rng):
        cfg = BcrConfig(eps=0.1, layer_weights=(1.0,), reduction="mean")
        for _ in range(10):
            c0 = rng.uniform(-1, 1, (1, 4, 1, 1))
            p0 = rng.uniform(-1, 1, (1, 4, 1, 1))
            leaf = Tensor(c0, requires_grad=True)
            losses.birads_level_loss(leaf, Tensor(p0), 3, 3, cfg).backward()
            moved = c0 - 1e-3 * leaf.grad
            assert np.linalg.norm(moved - p0) < np.linalg.norm(c0 - p0)
            # sign check: gradient points away from the prior feature
            nz = np.abs(c0 - p0) > 1e-9
            assert np.all(np.sign(leaf.grad[nz]) == np.sign((c0 - p0)[nz]))

    def test_sum_reduction_saturates_on_large_maps(self, rng):
        # the literal squared norm drives tanh to 1 on big feature maps,
        # killing the gradient; the mean reduction stays responsive
        cfg_sum = BcrConfig(eps=0.1, layer_weights=(1.0,), reduction="sum")
        cfg_mean = BcrConfig(eps=0.1, layer_weights=(1.0,), reduction="mean")
        curr = rng.uniform(-1, 1, (8, 8, 16, 16))
        prior = rng.uniform(-1, 1, (8, 8, 16, 16))
        leaf = Tensor(curr, requires_grad=True)
        out = losses.birads_level_loss(leaf, Tensor(prior), 3, 3, cfg_sum)
        assert abs(float(out) - 1.0 / cfg_sum.eps) < 1e-9  # fully saturated
        out.backward()
        assert np.abs(leaf.grad).max() < 1e-12
        leaf2 = Tensor(curr, requires_grad=True)
        out2 = losses.birads_level_loss(leaf2, Tensor(prior), 3, 3, cfg_mean)
        out2.backward()
        assert float(out2) < 0.9 / cfg_mean.eps
        assert np.abs(leaf2.grad).max() > 1e-6

    def test_birads_range_validation(self):
        k = Tensor(np.zeros((1, 2, 1, 1)))
        cfg = BcrConfig.for_levels(1)
        with pytest.raises(ValueError, match="BI-RADS"):
            losses.birads_level_loss(k, k, 7, 3, cfg)
        with pytest.raises(ValueError, match="BI-RADS"):
            losses.birads_level_loss(k, k, 3, -1, cfg)


class TestWeightSchedule:
    def test_six_levels_match_canonical_ladder(self):
        assert losses.level_weight_schedule(6) == (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6, 7, 8, 10])
    def test_schedule_invariants(self, n):
        w = losses.level_weight_schedule(n)
        assert len(w) == n
        assert w[-1] == 1.0
        if n > 1:
            assert abs(w[0] - 0.1) < 1e-12
        assert all(a <= b + 1e-12 for a, b in zip(w, w[1:]))

    def test_weighted_sum_of_unit_losses(self):
        # six levels of loss exactly 1 under the canonical ladder
        k_zero = Tensor(np.zeros((1, 2, 1, 1)))
        # tanh saturates at ~20, so use a distance large enough to give 1.0
        k_far = Tensor(np.full((1, 2, 1, 1), 10.0))
        cfg = BcrConfig(eps=1.0, layer_weights=losses.level_weight_schedule(6))
        feats = [(k_far, k_zero)] * 6
        total, levels = losses.birads_consistency_loss(feats, 3, 3, cfg)
        assert all(abs(float(lv) - 1.0) < 1e-12 for lv in levels)
        assert abs(float(total) - 3.5) < 1e-12

    def test_weighted_sum_matches_scalar_oracle(self, rng):
        cfg = BcrConfig(eps=0.1, layer_weights=losses.level_weight_schedule(3))
        feats = []
        refs = []
        for _ in range(3):
            c = rng.uniform(-0.4, 0.4, 8)
            p = rng.uniform(-0.4, 0.4, 8)
            feats.append((Tensor(c.reshape(2, 2, 2, 1)), Tensor(p.reshape(2, 2, 2, 1))))
            refs.append(oracles.loop_consistency_loss(c, p, 4, 3, 0.1, "sum"))
        total, _ = losses.birads_consistency_loss(feats, 4, 3, cfg)
        expected = sum(w * r for w, r in zip(cfg.layer_weights, refs))
        assert abs(float(total) - expected) < 1e-12

    def test_single_level_equals_level_loss(self, rng):
        cfg = BcrConfig(eps=0.1, layer_weights=(1.0,))
        c = Tensor(rng.uniform(-1, 1, (2, 2, 2, 2)))
        p = Tensor(rng.uniform(-1, 1, (2, 2, 2, 2)))
        total, _ = losses.birads_consistency_loss([(c, p)], 4, 3, cfg)
        single = losses.birads_level_loss(c, p, 4, 3, cfg)
        assert float(total) == float(single)

    def test_level_count_mismatch_rejected(self, rng):
        cfg = BcrConfig(eps=0.1, layer_weights=(0.5, 1.0))
        k = Tensor(np.zeros((1, 2, 1, 1)))
        with pytest.raises(ValueError, match="levels"):
            losses.birads_consistency_loss([(k, k)], 3, 3, cfg)


class TestTotalLoss:
    def _fixture(self, rng, lambda_bcr):
        logits = Tensor(rng.uniform(-2, 2, (2, 4, 4, 4)))
        target = (rng.random((4, 4, 4)) < 0.3).astype(np.float64)
        feats = [(Tensor(rng.uniform(-0.5, 0.5, (2, 2, 2, 2))),
                  Tensor(rng.uniform(-0.5, 0.5, (2, 2, 2, 2)))) for _ in range(2)]
        cfg = BcrConfig.for_levels(2, lambda_bcr=lambda_bcr)
        return logits, target, feats, cfg

    def test_zero_lambda_reproduces_pure_segmentation(self, rng):
        logits, target, feats, cfg = self._fixture(rng, 0.0)
        br = losses.total_loss(logits, target, feats, 4, 3, cfg)
        seg = float(losses.dice_loss(logits, target)) + float(losses.cross_entropy_loss(logits, target))
        assert abs(float(br.total) - seg) < 1e-12
        assert float(br.bcr) == 0.0
        assert br.bcr_per_level == ()

    def test_default_lambdas_linear_combination(self, rng):
        logits, target, feats, cfg = self._fixture(rng, 0.1)
        br = losses.total_loss(logits, target, feats, 4, 3, cfg)
        expected = float(br.dice) + float(br.ce) + 0.1 * float(br.bcr)
        assert abs(float(br.total) - expected) < 1e-12
        assert all(math.isfinite(v) for v in br.scalars().values())

    def test_negative_lambda_rejected(self, rng):
        logits, target, feats, cfg = self._fixture(rng, 0.1)
        with pytest.raises(ValueError, match=">= 0"):
            losses.total_loss(logits, target, feats, 4, 3, cfg, lambda_dice=-1.0)
        with pytest.raises(ValueError):
            BcrConfig.for_levels(2, lambda_bcr=-0.5)

    def test_gradient_through_total(self, rng):
        logits0 = rng.uniform(-1, 1, (2, 2, 2, 2))
        target = (rng.random((2, 2, 2)) < 0.4).astype(np.float64)
        featc0 = rng.uniform(-0.5, 0.5, (2, 2, 2, 2))
        featp0 = rng.uniform(-0.5, 0.5, (2, 2, 2, 2))
        cfg = BcrConfig.for_levels(1, reduction="mean")

        leaves = {"logits": Tensor(logits0.copy(), requires_grad=True),
                  "featc": Tensor(featc0.copy(), requires_grad=True)}

        def forward():
            return losses.total_loss(leaves["logits"], target,
                                     [(leaves["featc"], Tensor(featp0))], 4, 3, cfg).total

        forward().backward()
        for name, leaf in leaves.items():
            analytic = leaf.grad.copy()

            def scalar(arr, name=name, leaf=leaf):
                with eng.no_grad():
                    old = leaf.data
                    leaf.data = arr
                    try:
                        return float(forward().data)
                    finally:
                        leaf.data = old

            numeric = oracles.finite_diff_grad(scalar, leaf.data.copy())
            gap = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
            assert gap.max() < 1e-6, f"{name}: {gap.max():.3e}"
