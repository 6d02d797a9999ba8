import json
import math

import mpmath
import numpy as np
import pytest
from scipy.stats import special_ortho_group

from motionrag.metrics import (DIVERSITY_PAIRS, N_RUNS, R_PRECISION_POOL, EvalRun, MetricReport,
                               confidence_interval, diversity, evaluate_runs, fid, frechet_distance,
                               mm_dist, r_precision)
from motionrag.numerics import DomainError, GaussianStats

# frozen from tests/oracles/derive_constants.py
CI_02 = (1.0, 12.706204736174693314)
CI_PI = (0.39, 0.17668012247594597417)
PI_DIGITS = [x / 10 for x in (3, 1, 4, 1, 5, 9, 2, 6, 5, 3)]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestFID:
    def test_identical(self, rng):
        x = rng.normal(size=(200, 5))
        assert abs(fid(x, x)) < 1e-8

    def test_exact_gaussians(self):
        a = GaussianStats(np.zeros(2), np.eye(2))
        b = GaussianStats(np.array([3.0, 4.0]), np.eye(2))
        assert frechet_distance(a, b) == pytest.approx(25.0, abs=1e-12)

    def test_monte_carlo(self, rng):
        x = rng.normal(size=(10_000, 2))
        y = rng.normal(size=(10_000, 2)) + [3.0, 4.0]
        assert fid(x, y) == pytest.approx(25.0, rel=0.05)

    def test_symmetric(self, rng):
        x, y = rng.normal(size=(100, 4)), rng.normal(1.0, 2.0, size=(80, 4))
        assert abs(fid(x, y) - fid(y, x)) < 1e-8

    def test_rotation_invariant(self, rng):
        x, y = rng.normal(size=(100, 4)), rng.normal(0.5, 1.5, size=(100, 4))
        q = special_ortho_group.rvs(4, random_state=3)
        assert abs(fid(x @ q, y @ q) - fid(x, y)) < 1e-6

    def test_covariance_term(self):
        # N(0, I) vs N(0, 4I) in 3 dims: 3 * (1 + 4 - 2 * 2) = 3
        a = GaussianStats(np.zeros(3), np.eye(3))
        b = GaussianStats(np.zeros(3), 4 * np.eye(3))
        assert frechet_distance(a, b) == pytest.approx(3.0, abs=1e-10)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DomainError):
            fid(rng.normal(size=(10, 3)), rng.normal(size=(10, 4)))


class TestRPrecision:
    def test_self_match(self, rng):
        x = rng.normal(size=(64, 6))
        np.testing.assert_array_equal(r_precision(x, x, 32, 3), [1.0, 1.0, 1.0])

    def test_random_features_binomial(self, rng):
        p, pools = 32, 100
        n = p * pools
        rp = r_precision(rng.normal(size=(n, 4)), rng.normal(size=(n, 4)), p, 3, seed=1)
        for k in (1, 2, 3):
            q = k / p
            assert abs(rp[k - 1] - q) < 3 * math.sqrt(q * (1 - q) / n)

    def test_monotone(self, rng):
        for s in range(5):
            t, m = rng.normal(size=(96, 3)), rng.normal(size=(96, 3)) + 0.3 * s
            rp = r_precision(t, m + t, seed=s)
            assert rp[0] <= rp[1] <= rp[2] and 0.0 <= rp[0] and rp[2] <= 1.0

    def test_protocol_default(self):
        assert R_PRECISION_POOL == 32 and DIVERSITY_PAIRS == 300 and N_RUNS == 10

    def test_too_few_pairs(self, rng):
        with pytest.raises(DomainError):
            r_precision(rng.normal(size=(31, 2)), rng.normal(size=(31, 2)), 32)

    def test_k_not_below_pool(self, rng):
        with pytest.raises(DomainError):
            r_precision(rng.normal(size=(8, 2)), rng.normal(size=(8, 2)), 4, 4)

    def test_deterministic(self, rng):
        t, m = rng.normal(size=(100, 3)), rng.normal(size=(100, 3))
        np.testing.assert_array_equal(r_precision(t, m, seed=5), r_precision(t, m, seed=5))


class TestMMDist:
    def test_identical(self, rng):
        x = rng.normal(size=(10, 3))
        assert mm_dist(x, x) == 0.0

    def test_offset(self, rng):
        x = rng.normal(size=(10, 2))
        assert mm_dist(x, x + [3.0, 4.0]) == pytest.approx(5.0, abs=1e-12)

    def test_per_pair_oracle(self, rng):
        t, m = rng.normal(size=(25, 4)), rng.normal(size=(25, 4))
        want = sum(math.sqrt(sum((a - b) ** 2 for a, b in zip(r, s))) for r, s in zip(t, m)) / 25
        assert mm_dist(t, m) == pytest.approx(want, abs=1e-12)

    def test_empty(self):
        with pytest.raises(DomainError):
            mm_dist(np.zeros((0, 3)), np.zeros((0, 3)))


class TestDiversity:
    def test_identical(self):
        assert diversity(np.ones((20, 3)), 10) == 0.0

    def test_two_clusters(self):
        n_pairs, seed, d = 50, 3, 7.0
        perm = np.random.default_rng(seed).permutation(2 * n_pairs)
        x = np.zeros((2 * n_pairs, 2))
        x[perm[n_pairs:], 0] = d  # every drawn pair spans the clusters
        assert diversity(x, n_pairs, seed) == pytest.approx(d, abs=1e-12)

    def test_pair_sampling_oracle(self, rng):
        x = rng.normal(size=(90, 3))
        perm = np.random.default_rng(11).permutation(90).tolist()
        dists = [math.dist(x[perm[i]], x[perm[40 + i]]) for i in range(40)]
        assert diversity(x, 40, 11) == pytest.approx(sum(dists) / 40, abs=1e-12)

    def test_too_few(self, rng):
        with pytest.raises(DomainError):
            diversity(rng.normal(size=(9, 2)), 5)


class TestConfidenceInterval:
    def test_constant(self):
        assert confidence_interval([2.5] * 10) == (2.5, 0.0)

    def test_two_values(self):
        m, h = confidence_interval([0.0, 2.0])
        assert m == pytest.approx(CI_02[0], abs=1e-12) and h == pytest.approx(CI_02[1], abs=1e-9)

    def test_ten_runs(self):
        m, h = confidence_interval(PI_DIGITS)
        assert m == pytest.approx(CI_PI[0], abs=1e-12) and h == pytest.approx(CI_PI[1], abs=1e-9)

    def test_against_live_mpmath(self, rng):
        v = rng.normal(size=10)
        mpmath.mp.dps = 30
        dof = 9

        def cdf(t):
            return 1 - mpmath.betainc(dof / 2, 0.5, 0, dof / (dof + t * t), regularized=True) / 2

        q = float(mpmath.findroot(lambda t: cdf(t) - mpmath.mpf("0.975"), 2))
        assert confidence_interval(v)[1] == pytest.approx(q * v.std(ddof=1) / math.sqrt(10), abs=1e-9)

    def test_one_run(self):
        with pytest.raises(DomainError):
            confidence_interval([1.0])


def runs(rng, n_runs=3, n=64, d=4):
    ref, text = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    return [EvalRun(text + rng.normal(0, 0.5, size=(n, d)), ref, text, seed=i) for i in range(n_runs)]


class TestReport:
    def test_values_and_bounds(self, rng):
        rep = evaluate_runs(runs(rng))
        assert rep.runs == 3
        assert list(rep.values) == ["fid", "r_precision_top1", "r_precision_top2", "r_precision_top3",
                                    "mm_dist", "diversity"]
        assert rep.mean("fid") >= 0
        for k in ("r_precision_top1", "r_precision_top2", "r_precision_top3"):
            assert 0 <= rep.mean(k) <= 1
        assert all(h >= 0 for _, h in rep.values.values())

    def test_single_run_zero_width(self, rng):
        rep = evaluate_runs(runs(rng, 1))
        assert all(h == 0.0 for _, h in rep.values.values())

    def test_text_format_roundtrip(self, rng, tmp_path):
        rep = evaluate_runs(runs(rng))
        lines = rep.to_text().splitlines()
        assert lines[0] == "runs = 3"
        assert lines[1].startswith("fid.mean = ") and lines[2].startswith("fid.ci95 = ")
        rep.write(tmp_path / "report")
        back = MetricReport.read_text(tmp_path / "report.txt")
        assert back.runs == 3
        for k, (m, h) in rep.values.items():
            assert back[k] == pytest.approx((m, h), rel=1e-11)

    def test_jsonl(self, rng):
        rep = evaluate_runs(runs(rng))
        recs = [json.loads(line) for line in rep.to_jsonl().splitlines()]
        assert [r["metric"] for r in recs] == list(rep.values)
        assert set(recs[0]) == {"metric", "mean", "ci95", "runs"}

    def test_unaligned_run(self, rng):
        with pytest.raises(DomainError):
            EvalRun(rng.normal(size=(5, 2)), rng.normal(size=(4, 2)), rng.normal(size=(5, 2)))

    def test_deterministic(self, rng):
        r = runs(rng)
        assert evaluate_runs(r).to_text() == evaluate_runs(r).to_text()

    def test_no_runs(self):
        with pytest.raises(DomainError):
            evaluate_runs([])
