import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from motionrag.fusion import contrastive_loss
from motionrag.numerics import (DomainError, cosine_similarity, finite_diff_grad_check, gaussian_fit,
                                log_sigmoid, log_softmax, psd_sqrt, substream)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


class TestCosine:
    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == 0.0

    def test_colinear(self):
        assert cosine_similarity([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0, abs=1e-15)

    def test_oracle_value(self):
        # tests/oracles/derive_constants.py
        got = cosine_similarity([0.3, -0.7, 0.1], [0.5, 0.2, -0.9])
        assert got == pytest.approx(-0.099304204923872200035, abs=1e-15)

    def test_zero_vector(self):
        with pytest.raises(DomainError):
            cosine_similarity([0, 0], [1, 0])

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            cosine_similarity([1, 0], [1, 0, 0])

    @given(arrays(np.float64, 5, elements=finite))
    def test_self_similarity(self, u):
        if np.linalg.norm(u) < 1e-6:
            return
        assert cosine_similarity(u, u) == pytest.approx(1.0, abs=1e-12)

    @given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite))
    def test_symmetric_and_bounded(self, u, v):
        if np.linalg.norm(u) < 1e-6 or np.linalg.norm(v) < 1e-6:
            return
        c = cosine_similarity(u, v)
        assert -1.0 <= c <= 1.0
        assert c == cosine_similarity(v, u)


class TestGaussianFit:
    def test_two_points(self):
        g = gaussian_fit([[0, 0], [2, 2]])
        np.testing.assert_array_equal(g.mean, [1, 1])
        np.testing.assert_allclose(g.covariance, [[2, 2], [2, 2]] + 1e-8 * np.eye(2), rtol=0, atol=1e-15)

    def test_degenerate_copies(self):
        g = gaussian_fit(np.tile([3.0, -1.0, 2.0], (7, 1)))
        np.testing.assert_array_equal(g.mean, [3, -1, 2])
        np.testing.assert_allclose(g.covariance, 1e-8 * np.eye(3), rtol=0, atol=1e-20)

    def test_monte_carlo(self):
        rng = np.random.default_rng(7)
        mean = np.array([1.0, -2.0, 0.5])
        a = rng.normal(size=(3, 3))
        cov = a @ a.T + np.eye(3)
        g = gaussian_fit(rng.multivariate_normal(mean, cov, size=10_000))
        assert np.all(np.abs(g.mean - mean) <= 0.05 * np.maximum(np.abs(mean), 1.0))
        assert np.linalg.norm(g.covariance - cov) <= 0.05 * np.linalg.norm(cov)

    def test_needs_two(self):
        with pytest.raises(DomainError):
            gaussian_fit([[1.0, 2.0]])

    def test_rejects_nan(self):
        with pytest.raises(DomainError):
            gaussian_fit([[1.0, np.nan], [0.0, 0.0]])

    @settings(max_examples=50)
    @given(arrays(np.float64, (6, 3), elements=finite))
    def test_covariance_psd(self, x):
        g = gaussian_fit(x)
        np.testing.assert_allclose(g.covariance, g.covariance.T, atol=1e-10)
        assert np.linalg.eigvalsh(g.covariance).min() >= -1e-10


class TestPsdSqrt:
    def test_identity(self):
        np.testing.assert_allclose(psd_sqrt(np.eye(4)), np.eye(4), atol=1e-15)

    def test_diagonal(self):
        np.testing.assert_allclose(psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_reconstruction(self, seed):
        b = np.random.default_rng(seed).normal(size=(6, 6))
        a = b.T @ b
        r = psd_sqrt(a)
        assert np.linalg.norm(r @ r - a) / np.linalg.norm(a) < 1e-8

    def test_ill_conditioned(self):
        rng = np.random.default_rng(3)
        q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        a = q @ np.diag(np.logspace(0, -6, 5)) @ q.T
        a = 0.5 * (a + a.T)
        r = psd_sqrt(a)
        assert np.linalg.norm(r @ r - a) / np.linalg.norm(a) < 1e-8

    def test_clamps_tiny_negative(self):
        r = psd_sqrt(np.diag([1.0, -1e-10]))
        np.testing.assert_allclose(r, np.diag([1.0, 0.0]), atol=1e-15)

    def test_rejects_asymmetric(self):
        with pytest.raises(DomainError):
            psd_sqrt([[1.0, 0.5], [0.0, 1.0]])

    def test_rejects_indefinite(self):
        with pytest.raises(DomainError):
            psd_sqrt(np.diag([1.0, -0.1]))


class TestGradCheck:
    def test_quadratic(self):
        w = np.random.default_rng(0).normal(size=7)
        assert finite_diff_grad_check(lambda t: float(t @ t), w, 2 * w) < 1e-8

    def test_contrastive_4x4(self):
        s = np.random.default_rng(1).uniform(-1, 1, size=(4, 4))
        _, g = contrastive_loss(s, "both")
        err = finite_diff_grad_check(lambda t: contrastive_loss(t, "both")[0], s, g)
        assert err < 1e-5

    def test_wrong_gradient_is_one_third(self):
        w = np.random.default_rng(2).normal(size=5)
        err = finite_diff_grad_check(lambda t: float(t @ t), w, 4 * w)
        assert err == pytest.approx(1 / 3, abs=1e-6)

    def test_non_finite(self):
        with pytest.raises(DomainError):
            finite_diff_grad_check(lambda t: float("nan"), np.ones(2), np.zeros(2))

    def test_callable_gradient_and_subset(self):
        w = np.arange(6.0)
        assert finite_diff_grad_check(lambda t: float(np.sum(t ** 3)), w, lambda t: 3 * t ** 2,
                                      indices=[1, 4]) < 1e-8


class TestHelpers:
    def test_substreams_differ_and_repeat(self):
        a = substream(0, "data").random(4)
        np.testing.assert_array_equal(a, substream(0, "data").random(4))
        assert not np.array_equal(a, substream(0, "sampling").random(4))
        assert not np.array_equal(a, substream(1, "data").random(4))

    def test_log_softmax_sums_to_one(self):
        x = np.random.default_rng(0).normal(size=(3, 9)) * 50
        np.testing.assert_allclose(np.exp(log_softmax(x)).sum(-1), 1.0, atol=1e-12)

    def test_log_sigmoid_stable(self):
        assert log_sigmoid(-800.0) == pytest.approx(-800.0)
        assert log_sigmoid(800.0) == 0.0
        assert log_sigmoid(0.0) == pytest.approx(-np.log(2), abs=1e-15)
