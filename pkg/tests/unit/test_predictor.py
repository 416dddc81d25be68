"""
Unit tests for predictor statistics and zero-temperature checks
"""

import math
from fractions import Fraction

import numpy as np
import pytest

from core.errors import InvalidArgumentError
from core.schemas.architecture import TemperatureParams, WidthProfile
from theory.corrections import low_temp_linear
from theory.mathcore import GramMatrix, gram_from_samples
from theory.predictor import (
    EvaluationSet,
    MeanRegime,
    VarianceRegime,
    WidthEffect,
    aitchison_first_order_coefficients,
    aitchison_zero_temp_solve,
    bias_variance,
    li_sompolinsky_limit,
    low_temperature_test_variance,
    omega_regime,
    predictor_covariance,
    predictor_mean,
    predictor_statistics,
    width_benefit_condition,
)


@pytest.fixture
def data():
    rng = np.random.default_rng(40)
    x = rng.standard_normal((4, 6))
    y = rng.standard_normal((4, 2))
    x_test = rng.standard_normal((3, 6))
    y_test = rng.standard_normal((3, 2))
    return x, y, EvaluationSet.from_data(x, y, x_test, y_test)


def _profile(width, variances=(1.0, 1.0, 1.0)):
    return WidthProfile(
        hidden_widths=[width] * (len(variances) - 1), output_width=2, prior_variances=list(variances)
    )


def _gp_mean(x, y, test, profile, temp):
    scale = profile.gp_scale(profile.depth - 1)
    k = scale * x @ x.T / x.shape[1]
    gamma = k + temp.ridge * np.eye(x.shape[0])
    return scale * test.gxx_cross.T @ np.linalg.solve(gamma, y)


class TestEvaluationSet:
    """Test cases for EvaluationSet"""

    def test_blocks(self, data):
        """Cross and test Gram blocks use the input and output widths"""
        x, y, test = data
        np.testing.assert_allclose(test.gxx_cross, x @ test.x.T / 6)
        np.testing.assert_allclose(test.gyy_test, test.y @ test.y.T / 2)
        assert test.size == 3

    def test_width_mismatch(self, data):
        """Train and test must share input widths"""
        x, y, _ = data
        with pytest.raises(InvalidArgumentError):
            EvaluationSet.from_data(x, y, np.zeros((2, 5)), np.zeros((2, 2)))


class TestPredictorStatistics:
    """Test cases for the predictor mean and covariance"""

    def test_prior(self, data):
        """beta = 0 gives zero mean and the prior covariance"""
        x, y, test = data
        profile = _profile(16, (1.0, 1.5, 2.0))
        stats = predictor_statistics(x, y, test, profile, TemperatureParams.for_profile(0.0, profile))
        np.testing.assert_array_equal(stats.mean, np.zeros((3, 2)))
        expected = 2.0 * np.einsum("mn,jk->mjnk", 1.5 * test.gxx_test, np.eye(2))
        np.testing.assert_allclose(stats.covariance, expected)

    def test_wide_limit_is_gp(self, data):
        """Very wide networks recover the GP ridge predictor"""
        x, y, test = data
        profile = _profile(10**9, (1.2, 0.8, 1.0))
        temp = TemperatureParams.for_profile(2.0, profile)
        np.testing.assert_allclose(
            predictor_mean(x, y, test, profile, temp),
            _gp_mean(x, y, test, profile, temp),
            rtol=1e-6,
            atol=1e-9,
        )

    def test_mean_linear_in_inverse_width(self, data):
        """The finite-width shift of the mean halves when widths double"""
        x, y, test = data
        temp = TemperatureParams(beta=1.5)
        gp = _gp_mean(x, y, test, _profile(8), temp)
        narrow = predictor_mean(x, y, test, _profile(8), temp) - gp
        wide = predictor_mean(x, y, test, _profile(16), temp) - gp
        np.testing.assert_allclose(narrow, 2.0 * wide, rtol=1e-8, atol=1e-12)

    def test_covariance_symmetry(self, data):
        """Covariance is symmetric under exchanging (mu, j) and (nu, k)"""
        x, y, test = data
        cov = predictor_covariance(x, y, test, _profile(12), TemperatureParams(beta=3.0))
        np.testing.assert_allclose(cov, cov.transpose(2, 3, 0, 1), atol=1e-12)

    def test_target_width_mismatch(self, data):
        """Targets must have n_d columns"""
        x, y, test = data
        profile = WidthProfile(hidden_widths=[8], output_width=3, prior_variances=[1.0, 1.0])
        with pytest.raises(InvalidArgumentError):
            predictor_mean(x, y, test, profile, TemperatureParams(beta=1.0))

    def test_low_temperature_variance(self, data):
        """Trace of the limit covariance matches the closed-form test variance"""
        x, y, test = data
        profile = _profile(20, (1.0, 1.3, 0.9))
        limit = TemperatureParams.for_profile(math.inf, profile)
        cov = predictor_covariance(x, y, test, profile, limit)
        traced = 0.5 * float(np.einsum("mjmj->", cov))
        expected = low_temperature_test_variance(
            gram_from_samples(x, 6), gram_from_samples(y, 2), test, profile
        )
        assert traced == pytest.approx(expected, rel=1e-8)

    def test_bias_variance(self, data):
        """Errors are half squared residuals plus half the traced covariance"""
        x, y, test = data
        profile = _profile(32)
        temp = TemperatureParams(beta=1.0)
        train_stats = predictor_statistics(x, y, EvaluationSet.training(x, y), profile, temp)
        test_stats = predictor_statistics(x, y, test, profile, temp)
        split = bias_variance(train_stats, y, test_stats, test.y)
        assert split.e_b == pytest.approx(0.5 * np.sum((train_stats.mean - y) ** 2))
        assert split.e_v >= 0.0
        assert split.test_error == pytest.approx(split.e_b_test + split.e_v_test)

    def test_bias_variance_needs_targets(self, data):
        """Test statistics without test targets are rejected"""
        x, y, test = data
        stats = predictor_statistics(x, y, test, _profile(8), TemperatureParams(beta=1.0))
        with pytest.raises(InvalidArgumentError):
            bias_variance(stats, test.y, stats)

    @pytest.mark.parametrize("width", [8, 64])
    def test_low_temperature_interpolates(self, width):
        """At large beta the train mean reproduces Y and the test mean is the least-norm fit"""
        rng = np.random.default_rng(41)
        x = rng.standard_normal((4, 16))
        y = rng.standard_normal((4, 2))
        x_test = rng.standard_normal((3, 16))
        profile = _profile(width, (1.0, 1.3, 0.9))
        temp = TemperatureParams.for_profile(1e6, profile)

        train = predictor_mean(x, y, EvaluationSet.training(x, y), profile, temp)
        assert np.linalg.norm(train - y) <= 1e-4 * np.linalg.norm(y)

        test = EvaluationSet.from_data(x, y, x_test, rng.standard_normal((3, 2)))
        least_norm = x_test @ np.linalg.pinv(x) @ y
        mean = predictor_mean(x, y, test, profile, temp)
        assert np.linalg.norm(mean - least_norm) <= 1e-4 * np.linalg.norm(least_norm)


class TestZeroTemperature:
    """Test cases for width-benefit, weight-decay regimes and other large-width theories"""

    def test_width_benefit(self):
        """Targets larger than the prior scale favour wider networks"""
        gxx = GramMatrix(np.eye(3))
        profile = _profile(8, (1.0, 1.0, 1.5))
        assert width_benefit_condition(gxx, gxx.scaled(2.0), profile) == WidthEffect.IMPROVES
        assert width_benefit_condition(gxx, gxx.scaled(1.0), profile) == WidthEffect.WORSENS
        assert width_benefit_condition(gxx, gxx.scaled(1.5), profile) == WidthEffect.MARGINAL

    @pytest.mark.parametrize(
        "omega,expected",
        [
            (-0.5, (MeanRegime.RIDGE, VarianceRegime.ZERO)),
            (-1.0, (MeanRegime.INTERPOLANT, VarianceRegime.FINITE)),
            (0.0, (MeanRegime.ZERO, VarianceRegime.ZERO)),
            (-2.0, (MeanRegime.INTERPOLANT, VarianceRegime.DIVERGENT)),
        ],
    )
    def test_omega_regime(self, omega, expected):
        """Weight-decay exponents map to mean and variance regimes at depth 2"""
        assert omega_regime(omega, 2) == expected

    def test_first_order_coefficients(self):
        """a_l = 1 + (n_l / n_{l-1}) a_{l-1}"""
        assert aitchison_first_order_coefficients([2, 4, 8]) == [
            Fraction(1),
            Fraction(3),
            Fraction(7),
        ]

    def test_recurrence_trivial(self):
        """G_yy = G_xx keeps every layer at G_xx"""
        gxx = gram_from_samples(np.random.default_rng(1).standard_normal((3, 5)), 5)
        kernels = aitchison_zero_temp_solve(gxx, gxx, [6, 6, 2])
        for kernel in kernels:
            np.testing.assert_allclose(kernel, gxx.entries, rtol=1e-10)

    def test_recurrence_geometric(self):
        """Equal widths interpolate geometrically between G_xx and c G_xx"""
        gxx = gram_from_samples(np.random.default_rng(2).standard_normal((3, 5)), 5)
        kernels = aitchison_zero_temp_solve(gxx, gxx.scaled(2.0), [8, 8, 8])
        np.testing.assert_allclose(kernels[0], 2.0 ** (1 / 3) * gxx.entries, rtol=1e-7)
        np.testing.assert_allclose(kernels[1], 2.0 ** (2 / 3) * gxx.entries, rtol=1e-7)

    def test_small_load_without_targets(self):
        """Zero targets leave the shrunken input kernel"""
        gxx = gram_from_samples(np.random.default_rng(3).standard_normal((3, 5)), 5)
        limit = li_sompolinsky_limit(
            gxx, np.zeros((3, 2)), sigma_sq=1.5, depth=3, alpha=0.1, width=30, layer=2
        )
        np.testing.assert_allclose(limit.roots, [0.9, 0.9])
        expected = 1.5**2 * (1 - 2 / 30) ** 2 * gxx.entries
        np.testing.assert_allclose(limit.kernel.entries, expected, rtol=1e-10)

    def test_small_load_roots(self):
        """Mode roots solve their scalar equations"""
        rng = np.random.default_rng(4)
        gxx = gram_from_samples(rng.standard_normal((4, 6)), 6)
        y = rng.standard_normal((4, 2))
        alpha, sigma_sq, depth = 0.2, 1.2, 3
        limit = li_sompolinsky_limit(gxx, y, sigma_sq, depth, alpha, width=20, layer=1)
        for z, omega in zip(limit.roots, limit.omegas):
            residual = z - alpha * sigma_sq ** (-(depth - 1)) * omega * z ** (-(depth - 1))
            assert residual == pytest.approx(1 - alpha, abs=1e-10)

    @pytest.mark.parametrize("seed", range(20))
    def test_width_benefit_matches_variance_slope(self, seed):
        """The verdict agrees with the sign of the test-variance change under widening"""
        rng = np.random.default_rng(100 + seed)
        x = rng.standard_normal((4, 6))
        y = rng.standard_normal((4, 2))
        variances = tuple(rng.uniform(0.5, 1.5, size=3))
        gxx = gram_from_samples(x, 6)
        threshold = _profile(100, variances).gp_scale(3)
        load = float(np.trace(np.linalg.solve(gxx.entries, gram_from_samples(y, 2).entries))) / 4
        # targets land on either side of the threshold
        y = y * math.sqrt(threshold / load * math.exp(rng.uniform(-1.5, 1.5)))
        gyy = gram_from_samples(y, 2)
        x_test, y_test = rng.standard_normal((3, 6)), rng.standard_normal((3, 2))
        test = EvaluationSet.from_data(x, y, x_test, y_test)

        def test_variance(width: int) -> float:
            return low_temperature_test_variance(gxx, gyy, test, _profile(width, variances))

        slope = test_variance(101) - test_variance(99)
        verdict = width_benefit_condition(gxx, gyy, _profile(100, variances))
        assert verdict == (WidthEffect.IMPROVES if slope < 0 else WidthEffect.WORSENS)

    def test_recurrence_matches_inverse_width_kernel(self):
        """The recurrence solution departs from the 1/n kernel at order 1/n^2"""
        rng = np.random.default_rng(5)
        gxx = gram_from_samples(rng.standard_normal((3, 5)), 5)
        gyy = gram_from_samples(rng.standard_normal((3, 6)), 6)
        gaps = []
        for width in (5000, 10000):
            kernels = aitchison_zero_temp_solve(gxx, gyy, [width, width, 6])
            profile = WidthProfile(
                hidden_widths=[width, width], output_width=6, prior_variances=[1.0, 1.0, 1.0]
            )
            gaps.append(
                [
                    np.linalg.norm(
                        kernels[layer - 1] - low_temp_linear(gxx, gyy, profile, layer).entries
                    )
                    for layer in (1, 2)
                ]
            )
        np.testing.assert_allclose(np.array(gaps[0]) / np.array(gaps[1]), 4.0, rtol=0.05)

    def test_small_load_departs_linearly(self):
        """At fixed width the small-load kernel leaves the 1/n kernel linearly in alpha"""
        rng = np.random.default_rng(6)
        gxx = gram_from_samples(rng.standard_normal((3, 12)), 12)
        y = 0.5 * rng.standard_normal((3, 2))
        profile = _profile(400, (1.2, 1.2, 1.2))
        expected = low_temp_linear(gxx, gram_from_samples(y, 2), profile, 1).entries
        gaps = [
            np.linalg.norm(
                li_sompolinsky_limit(gxx, y, 1.2, 3, alpha, width=400, layer=1).kernel.entries
                - expected
            )
            for alpha in (0.02, 0.01)
        ]
        assert gaps[0] / gaps[1] == pytest.approx(2.0, rel=0.1)
