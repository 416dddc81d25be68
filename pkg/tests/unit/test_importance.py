"""
Unit tests for the importance-sampling oracle
"""

import math

import numpy as np
import pytest

from core.errors import InvalidArgumentError, NeedsFiniteTemperatureError
from core.schemas.architecture import NetworkConfig, TemperatureParams, WidthProfile
from estimators.importance import importance_oracle, log_weights
from theory.corrections import deep_linear_correction
from theory.mathcore import gram_from_samples


def _config(widths, n_d=1):
    profile = WidthProfile(
        hidden_widths=list(widths), output_width=n_d, prior_variances=[1.0] * (len(widths) + 1)
    )
    return NetworkConfig(profile=profile)


@pytest.fixture
def problem():
    rng = np.random.default_rng(21)
    x = rng.standard_normal((4, 3))
    y = rng.standard_normal((2, 1))
    return gram_from_samples(x, 3), gram_from_samples(x[:2], 3), y


class TestLogWeights:
    """Test cases for readout log-evidence weights"""

    def test_direct_formula(self):
        """Cholesky weights equal -(n_d/2)[beta tr(A^-1 G_yy) + log det A]"""
        rng = np.random.default_rng(1)
        roots = rng.standard_normal((5, 3, 3))
        kernels = roots @ roots.transpose(0, 2, 1) / 3
        y = rng.standard_normal((3, 2))
        temp = TemperatureParams(beta=1.7, readout_variance=0.8)
        gyy = y @ y.T / 2
        expected = []
        for k in kernels:
            a = np.eye(3) + 1.7 * 0.8 * k
            _, logdet = np.linalg.slogdet(a)
            expected.append(-(2 / 2) * (1.7 * np.trace(np.linalg.solve(a, gyy)) + logdet))
        np.testing.assert_allclose(log_weights(kernels, y, temp), expected, rtol=1e-10)

    def test_prior_is_flat(self):
        """beta = 0 weights every draw equally"""
        kernels = np.broadcast_to(np.eye(2), (4, 2, 2))
        weights = log_weights(kernels, np.ones((2, 1)), TemperatureParams(beta=0.0))
        np.testing.assert_array_equal(weights, np.zeros(4))

    def test_limit_refused(self):
        """The zero-temperature limit has no finite weights"""
        with pytest.raises(NeedsFiniteTemperatureError):
            log_weights(np.eye(2)[None], np.ones((2, 1)), TemperatureParams(beta=math.inf))


class TestImportanceOracle:
    """Test cases for importance_oracle"""

    def test_prior_recovers_gp(self, problem):
        """At beta = 0 the estimate is the prior mean with full effective sample size"""
        gxx, training, y = problem
        estimate = importance_oracle(
            _config([10]), training, y, TemperatureParams(beta=0.0), n_draws=4000, seed=5
        )
        assert estimate.effective_sample_size == pytest.approx(4000)
        assert not estimate.unreliable
        assert np.all(np.abs(estimate.kernel(1) - training.entries) <= 5 * estimate.kernel_se(1))

    def test_worker_independence(self, problem):
        """Block reduction gives identical results for any number of workers"""
        gxx, training, y = problem
        config = _config([6, 6])
        temp = TemperatureParams(beta=1.0)
        serial = importance_oracle(config, training, y, temp, 3000, seed=3, block_size=1000)
        threaded = importance_oracle(
            config, training, y, temp, 3000, seed=3, block_size=1000, max_workers=3
        )
        np.testing.assert_array_equal(serial.kernel(2), threaded.kernel(2))
        assert serial.effective_sample_size == threaded.effective_sample_size

    def test_predictor_shapes(self, problem):
        """Extra points of the input kernel become test points"""
        gxx, training, y = problem
        estimate = importance_oracle(
            _config([8], n_d=1), gxx, y, TemperatureParams(beta=2.0), n_draws=2000, seed=4
        )
        assert estimate.predictor_mean is not None
        assert estimate.predictor_mean.mean.shape == (2, 1)
        assert estimate.predictor_covariance.shape == (2, 1, 2, 1)
        assert estimate.kernel(1).shape == (4, 4)

    def test_unreliable_flag(self, problem):
        """Estimates below the ESS threshold are flagged with a warning"""
        gxx, training, y = problem
        estimate = importance_oracle(
            _config([8]),
            training,
            y,
            TemperatureParams(beta=1.0),
            n_draws=1000,
            seed=2,
            ess_threshold=1e9,
        )
        assert estimate.unreliable
        assert estimate.warnings

    def test_custom_observable(self, problem):
        """Extra observables are estimated alongside the kernels"""
        gxx, training, y = problem
        estimate = importance_oracle(
            _config([8]),
            training,
            y,
            TemperatureParams(beta=0.0),
            n_draws=1000,
            seed=2,
            observables={"trace": lambda ks: np.trace(ks[0], axis1=1, axis2=2)},
        )
        assert float(estimate.observables["trace"].mean) == pytest.approx(
            np.trace(estimate.kernel(1)), rel=1e-10
        )

    def test_target_width_checked(self, problem):
        """Target columns must equal n_d"""
        gxx, _, _ = problem
        with pytest.raises(InvalidArgumentError):
            importance_oracle(
                _config([8], n_d=2), gxx, np.zeros((2, 3)), TemperatureParams(), 100, seed=0
            )

    @pytest.mark.slow
    def test_agrees_with_leading_correction(self, problem):
        """Posterior kernel matches the O(1/n) theory up to sampling error and O(1/n^2)"""
        gxx, training, y = problem
        config = _config([40])
        temp = TemperatureParams(beta=1.0)
        estimate = importance_oracle(config, training, y, temp, n_draws=200_000, seed=11)
        theory = deep_linear_correction(
            training, gram_from_samples(y, 1), config.profile, temp, 1
        ).entries
        shift = np.max(np.abs(theory - training.entries))
        bound = 5 * estimate.kernel_se(1) + 0.25 * shift
        assert np.all(np.abs(estimate.kernel(1) - theory) <= bound)
