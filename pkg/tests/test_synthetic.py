import itertools
import math

import numpy as np
import pytest

from invattack.errors import InvalidParams
from invattack.synthetic import (LinearClassifier, SyntheticParams,
                                 aligned_distance, aligned_distance_1nn_demo,
                                 clean_oracle_agreement,
                                 invariance_attack_synthetic, nn_agreement,
                                 oracle, oracle_agreement_under_invariance_attack,
                                 oracle_tracking_classifier,
                                 overly_robust_classifier, robust_oracle_agreement,
                                 run_verification, sample_dstar, sample_labeled,
                                 standard_classifier, worst_case_linear_attack)

N_BIG = 100_000


@pytest.fixture(scope="module")
def wide_batch():
    return sample_dstar(d=100, k=100.0, n=N_BIG, seed=5)


@pytest.fixture(scope="module")
def labeled_batch():
    return sample_labeled(SyntheticParams(), n=N_BIG, seed=6)


class TestSampler:
    def test_x1_is_half_z(self, wide_batch):
        assert set(np.unique(wide_batch.x[:, 0])) == {-0.5, 0.5}
        assert np.array_equal(np.sign(wide_batch.x[:, 0]), wide_batch.z)

    def test_x2_correlation_k100(self, wide_batch):
        p = np.mean(wide_batch.x[:, 1] == wide_batch.z)
        assert abs(p - 0.505) < 0.005  # binomial 3 sigma ~ 0.0047

    def test_noise_mean_given_z(self, wide_batch):
        # mean of N(0.1, 100) over ~n/2 draws: 3 sigma = 3*sqrt(100/n_pos)
        pos = wide_batch.x[wide_batch.z > 0]
        bound = 3.0 * math.sqrt(100.0 / len(pos))
        assert abs(pos[:, 2].mean() - 0.1) <= bound

    def test_noise_variance(self, wide_batch):
        v = wide_batch.x[:, 5].var()
        assert abs(v - 100.0) <= 10.0

    def test_k_must_exceed_one(self):
        with pytest.raises(InvalidParams):
            sample_dstar(d=10, k=1.0, n=10, seed=0)


class TestLabeled:
    def test_delta_zero_matches_oracle(self):
        batch = sample_labeled(SyntheticParams(delta=1e-12), n=2000, seed=1)
        assert np.array_equal(batch.y, oracle(batch.x))

    def test_flip_rate(self, labeled_batch):
        rate = np.mean(labeled_batch.y != oracle(labeled_batch.x))
        assert 0.007 <= rate <= 0.013  # binomial 3 sigma around 0.01

    def test_sanitized_x2_correlation(self, labeled_batch):
        p = np.mean(labeled_batch.x[:, 1] == labeled_batch.z)
        expected = (1 + 1 / 1.05) / 2  # ~0.976
        assert abs(p - expected) < 0.005


class TestOracle:
    def test_signs(self):
        assert oracle(np.array([[0.5, 0, 0]]))[0] == 1
        assert oracle(np.array([[-0.5, 9, 9]]))[0] == -1
        assert oracle(np.array([[0.0, 0, 0]]))[0] == 1  # sign(0) = +1

    def test_robust_below_half(self, labeled_batch):
        rng = np.random.default_rng(0)
        idx = rng.integers(0, N_BIG, size=20_000)
        delta = rng.uniform(-0.499, 0.499, size=(20_000, 102))
        before = oracle(labeled_batch.x[idx])
        after = oracle(labeled_batch.x[idx] + delta)
        assert np.array_equal(before, after)


class TestWorstCaseAttack:
    def test_eps_zero_identity(self, labeled_batch):
        f = standard_classifier(SyntheticParams())
        x = labeled_batch.x[:100]
        out = worst_case_linear_attack(f, x, oracle(x), 0.0)
        assert np.array_equal(out, x)

    def test_margin_identity_exact(self, labeled_batch):
        f = standard_classifier(SyntheticParams())
        x = labeled_batch.x[:500]
        y = oracle(x)
        out = worst_case_linear_attack(f, x, y, 0.3)
        drop = y * ((x @ f.w) - (out @ f.w))
        assert np.allclose(drop, 0.3 * np.abs(f.w).sum(), atol=1e-9)

    def test_matches_sign_pattern_enumeration(self):
        # d+2 = 5: every corner of the max-norm ball, brute force
        rng = np.random.default_rng(3)
        w = rng.normal(size=5)
        f = LinearClassifier(w=w, c=0.1)
        x = rng.normal(size=5)
        eps = 0.7
        best = min(
            float(w @ (x + eps * np.array(signs)) + 0.1)
            for signs in itertools.product((-1.0, 1.0), repeat=5))
        out = worst_case_linear_attack(f, x[None, :], np.array([1]), eps)
        assert float(f.margin(out)[0]) == pytest.approx(best, rel=1e-12)


class TestClassifiers:
    def test_standard_clean_agreement(self, labeled_batch):
        f = standard_classifier(SyntheticParams())
        assert clean_oracle_agreement(f, labeled_batch) >= 0.99

    def test_standard_matches_sign_x1_when_noise_small(self, labeled_batch):
        f = standard_classifier(SyntheticParams())
        x = labeled_batch.x[:5000]
        noise_term = x[:, 1] * f.w[1] + x[:, 2:] @ f.w[2:]
        dominated = np.abs(noise_term) < np.abs(x[:, 0] * f.w[0])
        preds = f.predict(x)
        assert np.array_equal(preds[dominated], oracle(x)[dominated])

    def test_standard_breaks_at_4_over_sqrt_d(self, labeled_batch):
        f = standard_classifier(SyntheticParams())
        eps = 4.0 / math.sqrt(100)
        assert robust_oracle_agreement(f, labeled_batch, eps) <= 0.05

    def test_overly_robust_clean_accuracy(self, labeled_batch):
        f = overly_robust_classifier()
        acc = clean_oracle_agreement(f, labeled_batch)
        expected = (1 + 1 / 1.05) / 2
        assert abs(acc - expected) < 0.005
        assert acc >= 1 - 0.05 / 2 - 0.005

    def test_overly_robust_immovable_below_one(self, labeled_batch):
        f = overly_robust_classifier()
        x = labeled_batch.x[:2000]
        rng = np.random.default_rng(1)
        delta = rng.uniform(-0.99, 0.99, size=x.shape)
        assert np.array_equal(f.predict(x), f.predict(x + delta))

    def test_overly_robust_equality_at_099(self, labeled_batch):
        f = overly_robust_classifier()
        clean = clean_oracle_agreement(f, labeled_batch)
        assert robust_oracle_agreement(f, labeled_batch, 0.99) == clean


class TestInvarianceAttack:
    def test_sign_x2_breaks_completely(self, labeled_batch):
        f = overly_robust_classifier()
        x_adv, found = invariance_attack_synthetic(f, labeled_batch.x, 0.99)
        assert bool(np.all(found))
        assert np.array_equal(oracle(x_adv), -oracle(labeled_batch.x))
        assert np.array_equal(f.predict(x_adv), f.predict(labeled_batch.x))
        agree = oracle_agreement_under_invariance_attack(f, labeled_batch, 0.99)
        assert agree == 0.0

    def test_oracle_tracker_immune(self, labeled_batch):
        f = oracle_tracking_classifier()
        _, found = invariance_attack_synthetic(f, labeled_batch.x[:5000], 0.99)
        assert not bool(np.any(found))

    def test_ball_constraint(self, labeled_batch):
        f = overly_robust_classifier()
        x = labeled_batch.x[:1000]
        x_adv, _ = invariance_attack_synthetic(f, x, 0.7)
        assert np.abs(x_adv - x).max() <= 0.7 + 1e-12

    def test_requires_radius_above_half(self, labeled_batch):
        with pytest.raises(InvalidParams):
            invariance_attack_synthetic(overly_robust_classifier(),
                                        labeled_batch.x[:10], 0.49)


class TestAlignedDistance1NN:
    def test_perfect_agreement(self):
        assert aligned_distance_1nn_demo(10_000, seed=3) == 1.0

    def test_misaligned_linf_counterexample(self):
        # hand-built 3 points in R^3 (d=1): plain max-norm prefers the
        # wrong-class exemplar for the query
        e_pos = np.array([0.5, 1.0, 10.0])
        e_neg = np.array([-0.5, 1.0, 0.0])
        query = np.array([[0.5, 1.0, 1.0]])

        def linf_dist(a, b):
            return float(np.abs(np.asarray(a) - np.asarray(b)).max())

        agree = nn_agreement(linf_dist, [e_pos, e_neg], query, oracle)
        assert agree < 1.0

    def test_single_class_degenerate(self):
        batch = sample_dstar(d=5, k=10.0, n=50, seed=9)
        pos = batch.x[batch.z > 0]
        agree = nn_agreement(aligned_distance, [pos[0]], pos[1:], oracle)
        assert agree == 1.0


@pytest.mark.slow
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_full_verification_passes(seed):
    checks, rows = run_verification(SyntheticParams(), n=N_BIG, seed=seed)
    failures = [c for c in checks if not c.passed]
    assert not failures, failures
    assert any(r["classifier"] == "sign_x2" for r in rows)
