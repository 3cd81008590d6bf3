"""Tests for the non-learned covariance estimators."""

import math

import numpy as np
import pytest

from fuseloc.baselines import (
    SCALE_GRID,
    ObjectiveEval,
    WeightedSamples,
    hessian_covariance,
    rescale_search,
    sampling_covariance,
)


def rotation3(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class TestHessianCovariance:
    def test_isotropic_example(self):
        # H = 2I with sensor variance 0.25 gives cov = 0.25 * inv(2I) = 0.125 I.
        evaluation = ObjectiveEval(
            value=1.0, gradient=np.zeros(3), hessian=2.0 * np.eye(3), meas_variance=0.25
        )
        np.testing.assert_allclose(
            hessian_covariance(evaluation), 0.125 * np.eye(3), rtol=1e-14
        )

    def test_sharper_objective_means_smaller_covariance(self):
        weak = ObjectiveEval(0.0, np.zeros(3), np.eye(3), 1.0)
        sharp = ObjectiveEval(0.0, np.zeros(3), 10.0 * np.eye(3), 1.0)
        diff = hessian_covariance(weak) - hessian_covariance(sharp)
        assert np.linalg.eigvalsh(diff)[0] > 0.0

    def test_rotation_similarity(self):
        # Rotating the Hessian rotates the covariance the same way.
        rng = np.random.Generator(np.random.Philox(81))
        mat = rng.normal(size=(3, 3))
        hessian = mat @ mat.T + 0.5 * np.eye(3)
        rot = rotation3(0.8)
        cov_plain = hessian_covariance(ObjectiveEval(0.0, np.zeros(3), hessian, 2.0))
        cov_rot = hessian_covariance(
            ObjectiveEval(0.0, np.zeros(3), rot @ hessian @ rot.T, 2.0)
        )
        np.testing.assert_allclose(cov_rot, rot @ cov_plain @ rot.T, rtol=1e-10)

    def test_not_positive_definite_raises(self):
        flat = ObjectiveEval(0.0, np.zeros(3), np.diag([1.0, 1.0, 0.0]), 1.0)
        with pytest.raises(ValueError):
            hessian_covariance(flat)
        indefinite = ObjectiveEval(0.0, np.zeros(3), np.diag([1.0, -1.0, 1.0]), 1.0)
        with pytest.raises(ValueError):
            hessian_covariance(indefinite)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            ObjectiveEval(0.0, np.zeros(3), np.eye(3), meas_variance=0.0)
        asym = np.eye(3)
        asym[0, 1] = 0.3
        with pytest.raises(ValueError):
            ObjectiveEval(0.0, np.zeros(3), asym, meas_variance=1.0)


class TestSamplingCovariance:
    def test_two_point_example(self):
        # Equal-weight samples at +/- 1 in x: mean 0, variance 1 in x only.
        samples = WeightedSamples(
            poses=np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]),
            weights=np.array([0.5, 0.5]),
        )
        mean, cov = sampling_covariance(samples)
        np.testing.assert_allclose(mean.as_array(), np.zeros(3), atol=1e-15)
        np.testing.assert_allclose(cov, np.diag([1.0, 0.0, 0.0]), atol=1e-15)

    def test_weighted_mean(self):
        samples = WeightedSamples(
            poses=np.array([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0]]),
            weights=np.array([0.75, 0.25]),
        )
        mean, cov = sampling_covariance(samples)
        np.testing.assert_allclose(mean.as_array(), [1.5, 0.5, 0.0], rtol=1e-14)
        # Scatter of a two-point distribution: w1*w2*(d d^T)/..., check PSD + values.
        dev = np.array([[0.5, -0.5, 0.0], [-1.5, 1.5, 0.0]])
        expected = dev.T @ (np.array([0.75, 0.25])[:, None] * dev)
        np.testing.assert_allclose(cov, expected, rtol=1e-14)

    def test_covariance_always_psd_and_symmetric(self):
        rng = np.random.Generator(np.random.Philox(82))
        for _ in range(50):
            count = rng.integers(2, 30)
            poses = rng.normal(size=(count, 3))
            scores = rng.random(count) + 0.01
            samples = WeightedSamples.from_scores(poses, scores)
            _, cov = sampling_covariance(samples)
            np.testing.assert_array_equal(cov, cov.T)
            assert np.linalg.eigvalsh(cov)[0] >= -1e-12

    def test_from_scores_normalizes(self):
        samples = WeightedSamples.from_scores(
            np.zeros((3, 3)), np.array([1.0, 2.0, 1.0])
        )
        np.testing.assert_allclose(samples.weights, [0.25, 0.5, 0.25], rtol=1e-15)

    def test_from_scores_rejects_zero_total(self):
        with pytest.raises(ValueError):
            WeightedSamples.from_scores(np.zeros((2, 3)), np.zeros(2))

    def test_single_sample_raises(self):
        samples = WeightedSamples(np.zeros((1, 3)), np.ones(1))
        with pytest.raises(ValueError):
            sampling_covariance(samples)

    def test_validation(self):
        with pytest.raises(ValueError):
            WeightedSamples(np.zeros((2, 3)), np.array([0.6, 0.6]))
        with pytest.raises(ValueError):
            WeightedSamples(np.zeros((2, 3)), np.array([1.5, -0.5]))
        with pytest.raises(ValueError):
            WeightedSamples(np.zeros((2, 3)), np.array([1.0]))


class TestRescaleSearch:
    def test_grid_contents(self):
        assert len(SCALE_GRID) == 13
        assert SCALE_GRID[0] == pytest.approx(2.0**-6)
        assert SCALE_GRID[-1] == pytest.approx(2.0**6)
        assert 1.0 in SCALE_GRID

    def test_quadratic_minimum(self):
        best = rescale_search(None, lambda s: (s - 4.0) ** 2)
        assert best == 4.0

    def test_constant_error_picks_smallest_scale(self):
        best = rescale_search(None, lambda s: 1.0)
        assert best == min(SCALE_GRID)

    def test_tie_resolves_to_smaller_scale(self):
        # Error identical at scales 2 and 4, strictly larger elsewhere.
        def err(s):
            return 0.0 if s in (2.0, 4.0) else 1.0

        assert rescale_search(None, err) == 2.0

    def test_custom_grid_sorted_internally(self):
        best = rescale_search(None, lambda s: abs(s - 0.5), scales=(4.0, 0.5, 1.0))
        assert best == 0.5

    def test_empty_grid_raises(self):
        with pytest.raises(ValueError):
            rescale_search(None, lambda s: 0.0, scales=())
