"""
Unit tests for infinite-width kernels and the architecture schemas they consume
"""

import numpy as np
import pytest
from pydantic import ValidationError

from core.errors import InvalidArgumentError
from core.schemas.architecture import (
    ActivationKind,
    ActivationSpec,
    FilterSpec,
    ReadoutStrategy,
    SkipConnectivity,
    SkipEdge,
    WidthProfile,
)
from theory.gpkernels import (
    FourIndexKernel,
    cnn_linear_gp,
    gaussian_pair_expectation,
    gp_scales,
    mlp_linear_gp,
    mlp_nonlinear_gp,
    readout_kernel,
    shift_index,
    single_layer_gp,
    single_layer_gp_estimate,
    skip_gp_scale,
    skip_linear_gp,
)
from theory.mathcore import GramMatrix, gram_from_samples


def _gram(seed: int, p: int = 4, n: int = 6) -> GramMatrix:
    rows = np.random.default_rng(seed).standard_normal((p, n))
    return gram_from_samples(rows, n)


def _tensor(seed: int, p: int = 3, channels: int = 2, sites: int = 6) -> FourIndexKernel:
    x = np.random.default_rng(seed).standard_normal((p, channels, sites))
    values = np.einsum("mca,ncb->mnab", x, x) / channels
    return FourIndexKernel(values, (sites,))


class TestWidthProfile:
    """Test cases for WidthProfile and FilterSpec validation"""

    def test_gp_scale(self):
        """m_l^2 is the running product of variances"""
        profile = WidthProfile(hidden_widths=[4, 4], output_width=1, prior_variances=[2, 3, 1])
        assert profile.gp_scale(0) == 1.0
        assert profile.gp_scale(2) == pytest.approx(6.0)
        assert profile.depth == 3

    def test_variance_count_mismatch(self):
        """One variance per layer is required"""
        with pytest.raises(ValidationError):
            WidthProfile(hidden_widths=[4], output_width=1, prior_variances=[1.0])

    def test_width_factor_exact(self):
        """Width factors are exact fractions"""
        profile = WidthProfile(hidden_widths=[3, 6], output_width=2, prior_variances=[1, 1, 1])
        assert profile.width_factor(2) == 1
        assert str(profile.width_factor(1)) == "2/3"

    def test_filter_simplex(self):
        """Filter weights must sum to one"""
        with pytest.raises(ValidationError):
            FilterSpec(weights=[0.5, 0.5, 0.5], half_width=1)

    def test_uniform_filter(self):
        """Uniform 2D filters have nine equal weights"""
        spec = FilterSpec.uniform(1, 2)
        assert len(spec.weights) == 9
        assert spec.offsets.shape == (9, 2)


class TestMlpLinearGp:
    """Test cases for deep linear MLP kernels"""

    def test_unit_variances(self):
        """Unit variances leave G_xx unchanged"""
        gxx = _gram(0)
        profile = WidthProfile(hidden_widths=[8, 8], output_width=1, prior_variances=[1, 1, 1])
        np.testing.assert_allclose(mlp_linear_gp(gxx, profile, 2).entries, gxx.entries)

    def test_variance_product(self):
        """sigma_1^2 = 2, sigma_2^2 = 3 gives 6 G_xx at layer 2"""
        gxx = _gram(1)
        profile = WidthProfile(hidden_widths=[8, 8], output_width=1, prior_variances=[2, 3, 1])
        np.testing.assert_allclose(mlp_linear_gp(gxx, profile, 2).entries, 6 * gxx.entries)

    def test_homogeneous(self):
        """Scaling G_xx scales the kernel"""
        gxx = _gram(2)
        profile = WidthProfile(hidden_widths=[8], output_width=1, prior_variances=[1.5, 1])
        scaled = mlp_linear_gp(gxx.scaled(3.0), profile, 1).entries
        np.testing.assert_allclose(scaled, 3.0 * mlp_linear_gp(gxx, profile, 1).entries)

    def test_layer_out_of_range(self):
        """The readout layer is not a hidden layer"""
        profile = WidthProfile(hidden_widths=[8], output_width=1, prior_variances=[1, 1])
        with pytest.raises(InvalidArgumentError):
            mlp_linear_gp(_gram(3), profile, 2)

    def test_prior_mean_monte_carlo(self):
        """Prior mean of the layer-1 kernel matches sigma_1^2 G_xx"""
        rng = np.random.default_rng(11)
        x = rng.standard_normal((3, 5))
        gxx = gram_from_samples(x, 5)
        profile = WidthProfile(hidden_widths=[16], output_width=1, prior_variances=[2.0, 1.0])
        draws = 4000
        samples = np.empty((draws, 3, 3))
        for k in range(draws):
            w = rng.standard_normal((5, 16)) * np.sqrt(2.0 / 5)
            h = x @ w
            samples[k] = h @ h.T / 16
        mean = samples.mean(axis=0)
        se = samples.std(axis=0, ddof=1) / np.sqrt(draws)
        expected = mlp_linear_gp(gxx, profile, 1).entries
        assert np.all(np.abs(mean - expected) <= 4 * se + 1e-12)


class TestCnnLinearGp:
    """Test cases for four-index kernels and readouts"""

    def test_single_site_matches_mlp(self):
        """One spatial site with v = 1 collapses to the MLP kernel"""
        gxx = _gram(4)
        tensor = FourIndexKernel(gxx.entries[:, :, None, None], (1,))
        profile = WidthProfile(hidden_widths=[8, 8], output_width=1, prior_variances=[2, 1.5, 1])
        spec = FilterSpec(weights=[1.0], half_width=0)
        k4 = cnn_linear_gp(tensor, spec, profile, 2)
        np.testing.assert_allclose(
            k4.values[:, :, 0, 0], mlp_linear_gp(gxx, profile, 2).entries, rtol=1e-12
        )

    def test_constant_inputs(self):
        """Spatially constant inputs give identical blocks equal to m_l^2 times the flat Gram"""
        rng = np.random.default_rng(5)
        x = np.repeat(rng.standard_normal((3, 2, 1)), 6, axis=2)
        tensor = FourIndexKernel(np.einsum("mca,ncb->mnab", x, x) / 2, (6,))
        profile = WidthProfile(hidden_widths=[8, 8], output_width=1, prior_variances=[2, 3, 1])
        k4 = cnn_linear_gp(tensor, FilterSpec.uniform(1), profile, 2)
        flat = x[:, :, 0] @ x[:, :, 0].T / 2
        for a in range(6):
            for b in range(6):
                np.testing.assert_allclose(k4.block(a, b), 6 * flat, rtol=1e-12)

    def test_shift_equivariance(self):
        """Circularly shifting inputs shifts both spatial indices"""
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 2, 6))
        profile = WidthProfile(hidden_widths=[8, 8], output_width=1, prior_variances=[1, 1, 1])
        spec = FilterSpec(weights=[0.2, 0.5, 0.3], half_width=1)

        def kernel(inputs: np.ndarray) -> np.ndarray:
            tensor = FourIndexKernel(np.einsum("mca,ncb->mnab", inputs, inputs) / 2, (6,))
            return cnn_linear_gp(tensor, spec, profile, 2).values

        base = kernel(x)
        shifted = kernel(np.roll(x, 2, axis=2))
        np.testing.assert_allclose(shifted, np.roll(base, (2, 2), axis=(2, 3)), atol=1e-12)

    def test_exchange_symmetry_enforced(self):
        """Tensors without exchange symmetry are rejected"""
        values = np.zeros((2, 2, 1, 1))
        values[0, 1, 0, 0] = 1.0
        with pytest.raises(InvalidArgumentError):
            FourIndexKernel(values, (1,))

    def test_shift_index_wraps(self):
        """Offsets wrap around the circular axis"""
        table = shift_index((4,), np.array([[1], [-1]]))
        np.testing.assert_array_equal(table, [[1, 2, 3, 0], [3, 0, 1, 2]])

    def test_single_site_readouts(self):
        """All readouts agree for one site with u = (1)"""
        gxx = _gram(7)
        tensor = FourIndexKernel(gxx.entries[:, :, None, None], (1,))
        vec = readout_kernel(tensor, ReadoutStrategy.VECTORIZATION).entries
        proj = readout_kernel(tensor, ReadoutStrategy.PROJECTION, [1.0]).entries
        np.testing.assert_allclose(vec, gxx.entries)
        np.testing.assert_allclose(proj, gxx.entries)

    def test_vectorization_loop(self):
        """Vectorization averages the spatial diagonal"""
        tensor = _tensor(8)
        expected = sum(tensor.values[:, :, a, a] for a in range(tensor.s)) / tensor.s
        np.testing.assert_allclose(readout_kernel(tensor).entries, expected, rtol=1e-12)

    def test_gap_on_constant_kernel(self):
        """Average pooling equals vectorization on a spatially constant kernel"""
        gxx = _gram(9)
        values = np.broadcast_to(gxx.entries[:, :, None, None], (4, 4, 5, 5)).copy()
        tensor = FourIndexKernel(values, (5,))
        np.testing.assert_allclose(
            readout_kernel(tensor, ReadoutStrategy.GAP).entries,
            readout_kernel(tensor).entries,
            rtol=1e-12,
        )

    def test_projection_length(self):
        """Projection vectors need one entry per site"""
        with pytest.raises(InvalidArgumentError):
            readout_kernel(_tensor(10), ReadoutStrategy.PROJECTION, [1.0, 0.0])

    def test_flat_round_trip(self):
        """from_flat inverts flat"""
        tensor = _tensor(12)
        again = FourIndexKernel.from_flat(tensor.flat(), tensor.p, (tensor.s,))
        np.testing.assert_allclose(again.values, tensor.values)


class TestSingleLayerGp:
    """Test cases for nonlinear single-layer kernels"""

    def test_identity(self):
        """Identity activation gives sigma_1^2 G_xx exactly"""
        gxx = _gram(13)
        kernel = single_layer_gp(gxx, 1.7, ActivationSpec())
        np.testing.assert_allclose(kernel.entries, 1.7 * gxx.entries, rtol=1e-12)

    def test_square_activation(self):
        """x^2 on a unit diagonal G_xx gives 3 sigma^4 and sigma^4"""
        gxx = GramMatrix(np.eye(3))
        kernel = single_layer_gp(gxx, 2.0, ActivationSpec.polynomial([0.0, 0.0, 1.0]))
        expected = np.full((3, 3), 4.0) + 8.0 * np.eye(3)
        np.testing.assert_allclose(kernel.entries, expected, rtol=1e-12)

    def test_erf_matches_crude_monte_carlo(self):
        """Quasi-Monte-Carlo erf kernel agrees with plain Monte Carlo"""
        gxx = _gram(14, p=3, n=4)
        act = ActivationSpec(kind=ActivationKind.ERF)
        kernel, se = single_layer_gp_estimate(gxx, 1.0, act, n_points=2**14, seed=3)
        rng = np.random.default_rng(99)
        h = rng.multivariate_normal(np.zeros(3), gxx.entries, size=200_000)
        f = act(h)
        products = f[:, :, None] * f[:, None, :]
        crude = products.mean(axis=0)
        crude_se = products.std(axis=0, ddof=1) / np.sqrt(h.shape[0])
        assert np.all(np.abs(kernel.entries - crude) <= 4 * np.sqrt(se**2 + crude_se**2) + 1e-6)

    def test_relu_diagonal(self):
        """ReLU diagonal is half the variance"""
        gxx = GramMatrix(np.eye(2))
        mean, _ = gaussian_pair_expectation(
            gxx.entries, ActivationSpec(kind=ActivationKind.RELU), n_points=2**14
        )
        np.testing.assert_allclose(np.diag(mean), [0.5, 0.5], rtol=1e-2)

    def test_deep_identity(self):
        """Iterating identity layers reproduces the linear kernel"""
        gxx = _gram(15)
        profile = WidthProfile(hidden_widths=[8, 8], output_width=1, prior_variances=[2, 0.5, 1])
        kernel = mlp_nonlinear_gp(gxx, profile, ActivationSpec(), 2)
        np.testing.assert_allclose(kernel.entries, gxx.entries, rtol=1e-12)


class TestSkipGp:
    """Test cases for skip-connected GP scales"""

    def test_chain_reduces_to_product(self):
        """Chain-only connectivity gives the plain variance product"""
        conn = SkipConnectivity.chain([2.0, 3.0, 0.5])
        assert skip_gp_scale(conn, 2, 1) == pytest.approx(6.0)
        assert gp_scales(conn)[3] == pytest.approx(3.0)

    def test_input_skip(self):
        """An input-to-layer-2 skip with unit variances gives 2"""
        edges = [
            SkipEdge(target=1, source=0, variance=1.0),
            SkipEdge(target=2, source=1, variance=1.0),
            SkipEdge(target=2, source=0, variance=1.0),
            SkipEdge(target=3, source=2, variance=1.0),
        ]
        conn = SkipConnectivity(depth=3, edges=edges)
        assert skip_gp_scale(conn, 2, 1) == pytest.approx(2.0)
        gxx = _gram(16)
        np.testing.assert_allclose(skip_linear_gp(gxx, conn, 2).entries, 2 * gxx.entries)

    def test_disconnected(self):
        """Layers without an incoming edge are rejected"""
        conn = SkipConnectivity(depth=2, edges=[SkipEdge(target=2, source=0, variance=1.0)])
        with pytest.raises(InvalidArgumentError):
            skip_gp_scale(conn, 2, 1)
