"""
Unit tests for finite networks and their energy gradients
"""

import numpy as np
import pytest

from core.errors import InvalidArgumentError
from core.schemas.architecture import (
    Architecture,
    FilterSpec,
    NetworkConfig,
    ReadoutStrategy,
    SkipConnectivity,
    SkipEdge,
    WidthProfile,
)
from estimators.network import (
    check_gradient,
    energy,
    forward,
    grad_energy,
    init_parameters,
    network_edges,
    zeros_like_parameters,
)


def _profile(widths, n_d=2):
    return WidthProfile(
        hidden_widths=list(widths), output_width=n_d, prior_variances=[1.0] * (len(widths) + 1)
    )


def _cnn(readout=ReadoutStrategy.VECTORIZATION, u=None):
    return NetworkConfig(
        architecture=Architecture.CNN_LINEAR_1D,
        profile=_profile([3, 4]),
        spatial_shape=[5],
        filters=[FilterSpec(weights=[0.2, 0.5, 0.3], half_width=1)],
        readout=readout,
        readout_vector=u,
    )


CONFIGS = {
    "mlp-linear": NetworkConfig(profile=_profile([5, 4])),
    "mlp-relu": NetworkConfig(architecture=Architecture.MLP_RELU, profile=_profile([6, 5])),
    "cnn-vectorization": _cnn(),
    "cnn-gap": _cnn(ReadoutStrategy.GAP),
    "cnn-projection": _cnn(ReadoutStrategy.PROJECTION, [0.1, 0.4, -0.3, 0.2, 0.6]),
    "skip": NetworkConfig(
        profile=_profile([4, 3]),
        skip=SkipConnectivity(
            depth=3,
            edges=[
                SkipEdge(target=1, source=0, variance=1.0),
                SkipEdge(target=2, source=1, variance=0.5),
                SkipEdge(target=2, source=0, variance=0.5),
                SkipEdge(target=3, source=2, variance=1.0),
            ],
        ),
    ),
}


def _inputs(config: NetworkConfig, rng: np.random.Generator, p: int = 3) -> np.ndarray:
    if config.architecture.is_convolutional:
        return rng.standard_normal((p, 2, config.spatial_size))
    return rng.standard_normal((p, 4))


class TestGradients:
    """Test cases for reverse-mode gradients"""

    @pytest.mark.parametrize("name", sorted(CONFIGS))
    def test_matches_finite_differences(self, name):
        """Gradients agree with central differences"""
        config = CONFIGS[name]
        rng = np.random.default_rng(3)
        x = _inputs(config, rng)
        y = rng.standard_normal((3, 2))
        params = init_parameters(config, x.shape[1], rng)
        result = check_gradient(config, params, x, y, n_coords=60, h=1e-5, atol=1e-3)
        assert result.max_relative_error < 1e-5

    def test_readout_gradient(self):
        """Depth-2 linear readout gradient is residual^T features / sqrt(n)"""
        config = NetworkConfig(profile=_profile([6], n_d=1))
        rng = np.random.default_rng(4)
        x = rng.standard_normal((5, 3))
        y = rng.standard_normal((5, 1))
        params = init_parameters(config, 3, rng)
        grad, value, state = grad_energy(config, params, x, y)
        residual = state.output - y
        np.testing.assert_allclose(
            grad.weights[(2, 1)], residual.T @ state.post[1] / np.sqrt(6), rtol=1e-12
        )
        assert value == pytest.approx(energy(config, params, x, y))

    def test_zero_weights(self):
        """Zero weights give zero outputs and kernels"""
        config = CONFIGS["mlp-linear"]
        x = np.random.default_rng(5).standard_normal((3, 4))
        state = forward(config, zeros_like_parameters(config, 4), x)
        np.testing.assert_array_equal(state.output, np.zeros((3, 2)))
        np.testing.assert_array_equal(state.kernels[2], np.zeros((3, 3)))


class TestForward:
    """Test cases for the forward pass"""

    def test_linear_kernel(self):
        """Layer-1 kernel is h h^T / n_1 with h = x W^T / sqrt(n_0)"""
        config = CONFIGS["mlp-linear"]
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 4))
        params = init_parameters(config, 4, rng)
        h = x @ params.weights[(1, 0)].T / 2.0
        state = forward(config, params, x)
        np.testing.assert_allclose(state.kernels[1], h @ h.T / 5, rtol=1e-12)

    def test_cnn_kernel_shape(self):
        """CNN kernels are four-index"""
        config = CONFIGS["cnn-vectorization"]
        rng = np.random.default_rng(7)
        x = _inputs(config, rng)
        state = forward(config, init_parameters(config, 2, rng), x)
        assert state.kernels[1].shape == (3, 3, 5, 5)
        assert state.output.shape == (3, 2)

    def test_skip_edges(self):
        """Skip networks carry one weight matrix per weighted edge"""
        assert network_edges(CONFIGS["skip"]) == [(1, 0), (2, 0), (2, 1), (3, 2)]

    def test_misshapen_parameters(self):
        """Weights of the wrong shape are rejected"""
        config = CONFIGS["mlp-linear"]
        params = zeros_like_parameters(config, 4)
        with pytest.raises(InvalidArgumentError):
            forward(config, params, np.zeros((3, 7)))

    def test_cnn_input_shape(self):
        """CNN inputs need the configured number of sites"""
        config = CONFIGS["cnn-gap"]
        with pytest.raises(InvalidArgumentError):
            forward(config, zeros_like_parameters(config, 2), np.zeros((3, 2, 4)))
