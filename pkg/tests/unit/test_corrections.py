"""
Unit tests for finite-width posterior corrections
"""

import math

import numpy as np
import pytest

from core.errors import (
    InvalidArgumentError,
    NeedsFiniteTemperatureError,
    UnsupportedOrderError,
    UnsupportedReadoutError,
)
from core.schemas.architecture import (
    ActivationKind,
    ActivationSpec,
    FilterSpec,
    NetworkConfig,
    ReadoutStrategy,
    SkipConnectivity,
    TemperatureParams,
    WidthProfile,
)
from theory.corrections import (
    cnn_correction,
    cnn_correction_delta,
    deep_linear_correction,
    deep_linear_delta,
    eigenbasis_correction,
    high_temp_expansion,
    leading_posterior_mean,
    linear_kernel_third_cumulant,
    low_temp_linear_delta,
    phi_operator,
    posterior_covariance_correction,
    single_nonlinear_correction,
    skip_correction_monte_carlo,
)
from theory.gpkernels import FourIndexKernel, mlp_linear_gp
from theory.mathcore import GramMatrix, gram_from_samples
from theory.priorcumulants import mlp_kernel_covariance, prior_third_cumulant_oracle


@pytest.fixture
def task():
    rng = np.random.default_rng(21)
    x = rng.standard_normal((4, 6))
    y = rng.standard_normal((4, 2))
    return gram_from_samples(x, 6), gram_from_samples(y, 2)


def _profile(widths, variances, n_d=2):
    return WidthProfile(hidden_widths=list(widths), output_width=n_d, prior_variances=variances)


class TestPhiOperator:
    """Test cases for the correction operator"""

    def test_zero_at_prior(self, task):
        """beta = 0 gives a vanishing operator"""
        gxx, gyy = task
        phi = phi_operator(gxx, gyy, TemperatureParams(beta=0.0))
        np.testing.assert_array_equal(phi.entries, np.zeros((4, 4)))

    def test_limit_formula(self, task):
        """The limit mode is K^-1 (G_yy / sigma^2 - K) K^-1"""
        gxx, gyy = task
        temp = TemperatureParams(beta=math.inf, readout_variance=2.0)
        k_inv = np.linalg.inv(gxx.entries)
        expected = k_inv @ (gyy.entries / 2.0 - gxx.entries) @ k_inv
        np.testing.assert_allclose(phi_operator(gxx, gyy, temp).entries, expected, rtol=1e-8)

    def test_limit_needs_invertible_kernel(self, task):
        """A singular readout kernel has no zero-temperature limit"""
        _, gyy = task
        singular = gram_from_samples(np.random.default_rng(1).standard_normal((4, 2)), 2)
        with pytest.raises(NeedsFiniteTemperatureError):
            phi_operator(singular, gyy, TemperatureParams(beta=math.inf))

    def test_high_temperature_second_order(self, task):
        """Order 2 is -t I + t^2 (G_yy / sigma^2 + K)"""
        gxx, gyy = task
        temp = TemperatureParams(beta=0.01, readout_variance=1.5)
        t = temp.expansion_parameter
        expected = -t * np.eye(4) + t**2 * (gyy.entries / 1.5 + gxx.entries)
        np.testing.assert_allclose(
            high_temp_expansion(gxx, gyy, temp, order=2).entries, expected, rtol=1e-12
        )

    def test_high_temperature_first_order(self, task):
        """Order 1 is -t I"""
        gxx, gyy = task
        temp = TemperatureParams(beta=0.01, readout_variance=2.0)
        np.testing.assert_array_equal(
            high_temp_expansion(gxx, gyy, temp, order=1).entries,
            -temp.expansion_parameter * np.eye(4),
        )

    def test_high_temperature_residual_scaling(self, task):
        """Halving t shrinks the second-order residual about eightfold"""
        gxx, gyy = task
        errors = []
        for beta in (0.01, 0.005):
            temp = TemperatureParams(beta=beta)
            exact = phi_operator(gxx, gyy, temp).entries
            approx = high_temp_expansion(gxx, gyy, temp, order=2).entries
            errors.append(np.linalg.norm(approx - exact))
        assert 4.0 < errors[0] / errors[1] < 16.0

    def test_high_temperature_order_cap(self, task):
        """Orders beyond two are not available"""
        gxx, gyy = task
        with pytest.raises(UnsupportedOrderError):
            high_temp_expansion(gxx, gyy, TemperatureParams(beta=0.01), order=3)

    def test_shape_mismatch(self, task):
        """Observable and covariance shapes must agree"""
        gxx, gyy = task
        phi = phi_operator(gxx, gyy, TemperatureParams(beta=1.0))
        with pytest.raises(InvalidArgumentError):
            leading_posterior_mean(np.zeros((4, 4)), np.zeros((4, 4, 3, 3)), phi, 2)


class TestDeepLinear:
    """Test cases for deep linear MLP corrections"""

    def test_layer_ratio(self, task):
        """Equal widths and unit variances give a layer-2 to layer-1 ratio of exactly 2"""
        gxx, gyy = task
        profile = _profile([64, 64, 64], [1.0, 1.0, 1.0, 1.0])
        temp = TemperatureParams.for_profile(1.0, profile)
        first = deep_linear_delta(gxx, gyy, profile, temp, 1)
        second = deep_linear_delta(gxx, gyy, profile, temp, 2)
        np.testing.assert_allclose(second, 2.0 * first, rtol=1e-12)

    def test_inverse_width_scaling(self, task):
        """Doubling widths halves the correction"""
        gxx, gyy = task
        temp = TemperatureParams(beta=2.0)
        narrow = deep_linear_delta(gxx, gyy, _profile([32, 32], [1, 1, 1]), temp, 2)
        wide = deep_linear_delta(gxx, gyy, _profile([64, 64], [1, 1, 1]), temp, 2)
        np.testing.assert_allclose(narrow, 2.0 * wide, rtol=1e-12)

    def test_matches_generic_contraction(self, task):
        """Closed form equals (n_d/2) sum Phi cov(K^(l), K^(d-1))"""
        gxx, gyy = task
        profile = _profile([8, 16, 12], [1.3, 0.8, 1.1, 0.7])
        temp = TemperatureParams.for_profile(2.0, profile)
        phi = phi_operator(mlp_linear_gp(gxx, profile, 3), gyy, temp)
        for layer in (1, 2, 3):
            cov = mlp_kernel_covariance(gxx, profile, layer, lag=3 - layer)
            prior = mlp_linear_gp(gxx, profile, layer).entries
            generic = leading_posterior_mean(prior, cov, phi, 2) - prior
            np.testing.assert_allclose(
                deep_linear_delta(gxx, gyy, profile, temp, layer), generic, rtol=1e-8, atol=1e-12
            )

    def test_prior_temperature(self, task):
        """No correction at beta = 0"""
        gxx, gyy = task
        profile = _profile([8, 8], [1, 1, 1])
        corrected = deep_linear_correction(gxx, gyy, profile, TemperatureParams(beta=0.0), 1)
        np.testing.assert_allclose(corrected.entries, gxx.entries)

    def test_limit_interpolates(self, task):
        """The zero-temperature limit matches the interpolation formula"""
        gxx, gyy = task
        profile = _profile([10, 20], [1.2, 0.9, 1.0])
        limit = TemperatureParams.for_profile(math.inf, profile)
        np.testing.assert_allclose(
            deep_linear_delta(gxx, gyy, profile, limit, 2),
            low_temp_linear_delta(gxx, gyy, profile, 2),
            rtol=1e-8,
            atol=1e-10,
        )

    def test_large_beta_approaches_limit(self, task):
        """Finite beta converges to the limit as beta grows"""
        gxx, gyy = task
        profile = _profile([10, 20], [1.0, 1.0, 1.0])
        limit = low_temp_linear_delta(gxx, gyy, profile, 1)
        gaps = [
            np.linalg.norm(
                deep_linear_delta(gxx, gyy, profile, TemperatureParams(beta=beta), 1) - limit
            )
            for beta in (1e2, 1e4)
        ]
        assert gaps[1] < gaps[0] / 10

    def test_eigenbasis_agrees(self, task):
        """Eigenbasis form rotates back to the closed form"""
        gxx, gyy = task
        profile = _profile([8, 24], [1.1, 0.9, 1.4])
        temp = TemperatureParams.for_profile(3.0, profile)
        rotated = eigenbasis_correction(gxx, gyy, profile, temp, 2)
        np.testing.assert_allclose(
            rotated.rotate_back(),
            deep_linear_delta(gxx, gyy, profile, temp, 2),
            rtol=1e-8,
            atol=1e-12,
        )
        assert np.all((rotated.lambda_tilde >= 0) & (rotated.lambda_tilde < 1))


class TestCnnCorrection:
    """Test cases for deep linear CNN corrections"""

    def _single_site(self, gxx: GramMatrix) -> FourIndexKernel:
        return FourIndexKernel(gxx.entries[:, :, None, None], (1,))

    @pytest.mark.parametrize("mode", ["closed-form", "propagated"])
    def test_single_site_matches_mlp(self, task, mode):
        """One site with v = 1 reduces to the MLP correction"""
        gxx, gyy = task
        profile = _profile([8, 16], [1.2, 0.9, 1.0])
        temp = TemperatureParams.for_profile(1.5, profile)
        spec = FilterSpec(weights=[1.0], half_width=0)
        delta = cnn_correction_delta(self._single_site(gxx), gyy, spec, profile, temp, 2, mode=mode)
        np.testing.assert_allclose(
            delta[:, :, 0, 0], deep_linear_delta(gxx, gyy, profile, temp, 2), rtol=1e-8, atol=1e-12
        )

    def test_projection_unsupported(self, task):
        """Projection readouts have no shift-independent correction"""
        gxx, gyy = task
        profile = _profile([8], [1.0, 1.0])
        with pytest.raises(UnsupportedReadoutError):
            cnn_correction(
                self._single_site(gxx),
                gyy,
                FilterSpec(weights=[1.0], half_width=0),
                profile,
                TemperatureParams(beta=1.0),
                1,
                readout=ReadoutStrategy.PROJECTION,
            )

    def test_exchange_symmetry(self, task):
        """Corrected four-index kernels keep exchange symmetry"""
        _, gyy = task
        x = np.random.default_rng(2).standard_normal((4, 2, 5))
        tensor = FourIndexKernel(np.einsum("mca,ncb->mnab", x, x) / 2, (5,))
        profile = _profile([16, 16], [1.0, 1.0, 1.0])
        corrected = cnn_correction(
            tensor, gyy, FilterSpec.uniform(1), profile, TemperatureParams(beta=1.0), 1
        )
        values = corrected.values
        np.testing.assert_allclose(values, values.transpose(1, 0, 3, 2), atol=1e-12)


class TestSingleNonlinear:
    """Test cases for one nonlinear hidden layer"""

    def test_identity_matches_deep_linear(self, task):
        """Identity activation reproduces the depth-2 linear correction"""
        gxx, gyy = task
        profile = _profile([12], [1.4, 0.8])
        temp = TemperatureParams.for_profile(2.0, profile)
        kernel = single_nonlinear_correction(gxx, gyy, 1.4, ActivationSpec(), temp, (12, 2))
        expected = 1.4 * gxx.entries + deep_linear_delta(gxx, gyy, profile, temp, 1)
        np.testing.assert_allclose(kernel.entries, expected, rtol=1e-8, atol=1e-12)

    @pytest.mark.parametrize("beta", [0.5, 3.0])
    def test_sherman_morrison_matches_generic(self, task, beta):
        """The diagonal fast path agrees with the generic contraction"""
        _, gyy = task
        gxx = GramMatrix(np.diag([1.0, 0.6, 1.5, 0.9]))
        act = ActivationSpec.polynomial([0.1, 1.0, 0.3])
        temp = TemperatureParams(beta=beta, readout_variance=1.2)
        fast = single_nonlinear_correction(gxx, gyy, 1.1, act, temp, (20, 2))
        generic = single_nonlinear_correction(
            gxx, gyy, 1.1, act, temp, (20, 2), fast_diagonal=False
        )
        np.testing.assert_allclose(fast.entries, generic.entries, rtol=1e-8, atol=1e-10)

    @pytest.mark.parametrize("fast_diagonal", [True, False])
    def test_odd_activation_locality(self, fast_diagonal):
        """With orthogonal inputs an odd activation ties each entry to its own G_yy entry"""
        gxx = GramMatrix(np.diag([1.0, 0.6, 1.5, 0.9]))
        factor = np.random.default_rng(8).standard_normal((4, 4))
        base = factor @ factor.T / 4 + np.eye(4)
        moved = base.copy()
        moved[0, 2] += 0.3
        moved[2, 0] += 0.3
        act = ActivationSpec(kind=ActivationKind.ERF)
        temp = TemperatureParams(beta=2.0, readout_variance=1.2)

        def corrected(gyy: np.ndarray) -> np.ndarray:
            kernel = single_nonlinear_correction(
                gxx, GramMatrix(gyy), 1.3, act, temp, (16, 2), fast_diagonal=fast_diagonal
            )
            return kernel.entries

        before, after = corrected(base), corrected(moved)
        untouched = np.ones((4, 4), dtype=bool)
        untouched[0, 2] = untouched[2, 0] = False
        np.testing.assert_array_equal(before[untouched], after[untouched])
        assert before[0, 2] != after[0, 2]

    def test_width_validation(self, task):
        """Widths must be positive"""
        gxx, gyy = task
        with pytest.raises(InvalidArgumentError):
            single_nonlinear_correction(
                gxx, gyy, 1.0, ActivationSpec(), TemperatureParams(beta=1.0), (0, 2)
            )


class TestPosteriorCovariance:
    """Test cases for covariance corrections and third cumulants"""

    def test_third_cumulant_scalar(self):
        """A single input gives 8 c^3 / n^2"""
        third = linear_kernel_third_cumulant(GramMatrix(np.array([[2.0]])), 1.5, 4)
        assert third.shape == (1,) * 6
        assert third.item() == pytest.approx(8 * 3.0**3 / 16)

    def test_third_cumulant_symmetry(self, task):
        """Cumulant is symmetric within and across kernel pairs"""
        gxx, _ = task
        third = linear_kernel_third_cumulant(gxx, 1.0, 5)
        np.testing.assert_allclose(third, third.transpose(1, 0, 2, 3, 4, 5), atol=1e-14)
        np.testing.assert_allclose(third, third.transpose(2, 3, 0, 1, 4, 5), atol=1e-14)
        np.testing.assert_allclose(third, third.transpose(4, 5, 2, 3, 0, 1), atol=1e-14)

    def test_missing_cumulant(self, task):
        """Posterior covariances need a third cumulant"""
        gxx, gyy = task
        phi = phi_operator(gxx, gyy, TemperatureParams(beta=1.0))
        with pytest.raises(InvalidArgumentError):
            posterior_covariance_correction(np.zeros((4, 4, 4, 4)), None, phi, 2)

    @pytest.mark.slow
    def test_third_cumulant_oracle(self):
        """Sampled third cumulant agrees with the pairing formula"""
        gxx = gram_from_samples(np.random.default_rng(5).standard_normal((2, 3)), 3)
        profile = _profile([4], [1.0, 1.0], n_d=1)
        sampled, se = prior_third_cumulant_oracle(
            NetworkConfig(profile=profile), gxx, layer=1, n_draws=200_000, seed=3
        )
        exact = linear_kernel_third_cumulant(gxx, 1.0, 4)
        assert np.all(np.abs(sampled - exact) <= 5 * se + 1e-3)


class TestSkipCorrection:
    """Test cases for sampled skip-connection corrections"""

    def test_requires_skip(self, task):
        """Plain networks are rejected"""
        gxx, gyy = task
        config = NetworkConfig(profile=_profile([8], [1.0, 1.0]))
        with pytest.raises(InvalidArgumentError):
            skip_correction_monte_carlo(config, gxx, gyy, TemperatureParams(beta=1.0), 1)

    @pytest.mark.slow
    def test_chain_matches_closed_form(self):
        """A chain-only connectivity reproduces the deep linear correction"""
        rng = np.random.default_rng(30)
        gxx = gram_from_samples(rng.standard_normal((2, 4)), 4)
        gyy = gram_from_samples(rng.standard_normal((2, 2)), 2)
        variances = [1.0, 1.0, 1.0]
        profile = _profile([16, 16], variances)
        config = NetworkConfig(profile=profile, skip=SkipConnectivity.chain(variances))
        temp = TemperatureParams.for_profile(1.0, profile)
        sampled = skip_correction_monte_carlo(config, gxx, gyy, temp, 1, n_draws=50_000, seed=4)
        exact = deep_linear_delta(gxx, gyy, profile, temp, 1)
        assert np.all(np.abs(sampled.delta - exact) <= 5 * sampled.delta_se + 1e-3)
