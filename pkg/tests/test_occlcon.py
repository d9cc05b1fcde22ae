import numpy as np
import pytest

from occlkit import occlcon
from occlkit.errors import ConfigurationError, TrainingAbort, ValidationError
from occlkit.occlcon import (EmbeddingBatch, MarginConfig, contrastive_loss,
                             contrastive_loss_grad, embed, pair_margin,
                             total_loss)

from oracles import eval_loss_terms

CFG = MarginConfig()


def batch(z, labels):
    return EmbeddingBatch(z=np.asarray(z, dtype=np.float64),
                          labels=np.asarray(labels))


def unit_rows(rng, b, d):
    raw = rng.normal(size=(b, d))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


class TestMarginConfig:
    def test_defaults_from_reported_settings(self):
        assert CFG.tau_lh == 0.4 and CFG.tau_m == 0.6 and CFG.lambda_weight == 1.0

    def test_ordering_enforced(self):
        with pytest.raises(ConfigurationError):
            MarginConfig(tau_lh=0.6, tau_m=0.4)

    @pytest.mark.parametrize("kwargs", [
        {"tau_lh": 0.0}, {"tau_m": 1.0}, {"lambda_weight": -1.0}])
    def test_out_of_range_rejected(self, kwargs):
        with pytest.raises(ConfigurationError):
            MarginConfig(**kwargs)


class TestPairMargin:
    def test_low_high_gets_strict_margin(self):
        assert pair_margin("low", "high", CFG) == 0.4
        assert pair_margin("high", "low", CFG) == 0.4

    def test_mid_pairs_get_soft_margin(self):
        assert pair_margin("mid", "high", CFG) == 0.6
        assert pair_margin("mid", "low", CFG) == 0.6

    def test_positive_pair_rejected(self):
        with pytest.raises(ValidationError):
            pair_margin("low", "low", CFG)


class TestEmbed:
    def test_constant_map_direction(self):
        feats = np.ones((1, 4, 3, 3)) * 2.5
        z, flags = embed(feats)
        assert not flags.any()
        np.testing.assert_allclose(z[0], np.full(4, 0.5), atol=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        feats = rng.uniform(0.1, 1.0, size=(2, 4, 3, 3))
        z1, _ = embed(feats)
        z2, _ = embed(feats * 37.5)
        np.testing.assert_allclose(z1, z2, atol=1e-9)

    def test_unit_norms(self):
        rng = np.random.default_rng(1)
        z, _ = embed(rng.normal(size=(2, 4, 3, 3)))
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)

    def test_zero_vector_flagged(self):
        z, flags = embed(np.zeros((1, 4, 2, 2)))
        assert flags[0]


class TestContrastiveLoss:
    def test_identical_same_label_zero(self):
        z = unit_rows(np.random.default_rng(2), 1, 6)
        assert contrastive_loss(batch(np.vstack([z, z]), ["mid", "mid"]),
                                CFG) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_cross_label_zero(self):
        z = np.eye(2)
        assert contrastive_loss(batch(z, ["low", "mid"]), CFG) == 0.0

    def test_low_high_sim09_quarter(self):
        z = np.array([[1.0, 0.0], [0.9, np.sqrt(1 - 0.81)]])
        got = contrastive_loss(batch(z, ["low", "high"]), CFG)
        assert got == pytest.approx(0.25, abs=1e-9)

    def test_matches_pairwise_scalar_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            b = int(rng.integers(2, 7))
            z = unit_rows(rng, b, 8)
            labels = rng.choice(["low", "mid", "high"], size=b)
            expected = eval_loss_terms(z, labels, CFG.tau_lh, CFG.tau_m)
            assert contrastive_loss(batch(z, labels), CFG) == \
                pytest.approx(expected, abs=1e-12)

    def test_nonnegative_and_permutation_invariant(self):
        rng = np.random.default_rng(4)
        z = unit_rows(rng, 6, 10)
        labels = np.array(["low", "mid", "high", "low", "mid", "high"])
        base = contrastive_loss(batch(z, labels), CFG)
        assert base >= 0.0
        perm = rng.permutation(6)
        assert contrastive_loss(batch(z[perm], labels[perm]), CFG) == \
            pytest.approx(base, abs=1e-12)

    def test_single_row_loss_zero(self):
        z = unit_rows(np.random.default_rng(5), 1, 4)
        assert contrastive_loss(batch(z, ["low"]), CFG) == 0.0

    def test_non_unit_rows_rejected(self):
        with pytest.raises(ValidationError):
            contrastive_loss(batch(np.array([[2.0, 0.0], [0.0, 1.0]]),
                                   ["low", "mid"]), CFG)

    def test_dual_margin_mechanism(self):
        # low-high pair with Sim between the margins: replacing the strict
        # margin by the soft one strictly lowers the loss
        sim = 0.5
        z = np.array([[1.0, 0.0], [sim, np.sqrt(1 - sim**2)]])
        strict = contrastive_loss(batch(z, ["low", "high"]), CFG)
        soft = contrastive_loss(batch(z, ["low", "mid"]), CFG)
        assert strict > soft


def _active_pairs(raw, labels, cfg):
    z = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    sim = z @ z.T
    same = labels[:, None] == labels[None, :]
    tau = np.where(
        (same == False) &  # noqa: E712 - elementwise
        (((labels[:, None] == "low") & (labels[None, :] == "high")) |
         ((labels[:, None] == "high") & (labels[None, :] == "low"))),
        cfg.tau_lh, cfg.tau_m)
    off = ~np.eye(len(labels), dtype=bool)
    near_kink = (~same) & (np.abs(sim - tau) < 1e-3)
    active = (same & off) | ((~same) & (sim > tau))
    return (not near_kink.any()) and active.any()


class TestGradient:
    def test_matches_central_finite_differences(self):
        rng = np.random.default_rng(6)
        cfg = CFG
        checked = 0
        while checked < 100:
            b = int(rng.integers(2, 9))
            d = int(rng.integers(4, 33))
            raw = rng.normal(size=(b, d))
            labels = rng.choice(["low", "mid", "high"], size=b)
            if not _active_pairs(raw, labels, cfg):
                continue
            loss, grad = contrastive_loss_grad(raw, labels, cfg)
            h = 1e-5
            fd = np.zeros_like(raw)
            for i in range(b):
                for j in range(d):
                    up, down = raw.copy(), raw.copy()
                    up[i, j] += h
                    down[i, j] -= h
                    fd[i, j] = (contrastive_loss_grad(up, labels, cfg)[0]
                                - contrastive_loss_grad(down, labels, cfg)[0]) / (2 * h)
            rel = np.abs(grad - fd).max() / max(np.abs(fd).max(), 1e-12)
            assert rel < 1e-4
            checked += 1

    def test_loss_value_matches_normalized_path(self):
        rng = np.random.default_rng(7)
        raw = rng.normal(size=(5, 8))
        labels = rng.choice(["low", "mid", "high"], size=5)
        loss, _ = contrastive_loss_grad(raw, labels, CFG)
        z = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        assert loss == pytest.approx(
            contrastive_loss(batch(z, labels), CFG), abs=1e-9)


class TestTotalLoss:
    def test_weighted_sum(self):
        assert total_loss(2.0, 0.25, MarginConfig()) == pytest.approx(2.25)
        assert total_loss(1.5, 0.2, MarginConfig(lambda_weight=0.5)) == \
            pytest.approx(1.6)

    def test_lambda_zero_is_identity(self):
        assert total_loss(1.234, 9.9, MarginConfig(lambda_weight=0.0)) == 1.234

    def test_non_finite_aborts(self):
        with pytest.raises(TrainingAbort):
            total_loss(float("nan"), 0.0, CFG)
        with pytest.raises(TrainingAbort):
            total_loss(1.0, float("inf"), CFG)
