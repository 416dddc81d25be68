"""
Unit tests for the Langevin sampler
"""

import math

import numpy as np
import pytest

from core.errors import DivergenceError, InvalidArgumentError
from core.schemas.architecture import (
    LangevinSchedule,
    NetworkConfig,
    TemperatureParams,
    WidthProfile,
)
from estimators.langevin import (
    ChainState,
    QuadraticPotential,
    chain_generator,
    decay_rate,
    langevin_step,
    run_chains,
)


def _state(theta, seed=0):
    return ChainState(theta=np.asarray(theta, dtype=float), rng=chain_generator(seed, 0))


def _ou_variance(potential, temp, dt, steps=3000, burn_in=1000, dim=1000, seed=0):
    state = _state(np.zeros(dim), seed)
    for _ in range(burn_in):
        langevin_step(state, potential, temp, dt)
    draws = []
    for step in range(steps):
        langevin_step(state, potential, temp, dt)
        if step % 20 == 0:
            draws.append(state.theta.copy())
    return float(np.var(np.stack(draws)))


class TestLangevinStep:
    """Test cases for a single Euler-Maruyama update"""

    def test_zero_temperature_is_gradient_descent(self):
        """beta = inf removes noise and the decay term"""
        precision = np.array([[2.0, 0.5], [0.5, 1.0]])
        theta = np.array([1.0, -2.0])
        state = _state(theta)
        langevin_step(
            state, QuadraticPotential(precision, 1.0), TemperatureParams(beta=math.inf), 0.1
        )
        np.testing.assert_allclose(state.theta, theta - 0.1 * precision @ theta)
        assert state.step == 1

    def test_divergence(self):
        """Leaving the divergence bound raises with the chain and step"""
        state = _state([1e5])
        state.chain_id = 3
        potential = QuadraticPotential(np.array([[-1e6]]))
        with pytest.raises(DivergenceError) as info:
            langevin_step(state, potential, TemperatureParams(beta=math.inf), 1.0)
        assert info.value.chain_id == 3
        assert info.value.step == 1

    def test_prior_needs_default_decay(self):
        """Prior dynamics at beta = 0 only exist for omega = -1"""
        state = _state([0.0])
        with pytest.raises(InvalidArgumentError):
            langevin_step(
                state, QuadraticPotential(np.eye(1), 1.0), TemperatureParams(beta=0.0), 0.1, -0.5
            )

    def test_positive_step(self):
        """dt must be positive"""
        with pytest.raises(InvalidArgumentError):
            langevin_step(_state([0.0]), QuadraticPotential(np.eye(1)), TemperatureParams(), 0.0)

    def test_decay_rate(self):
        """lambda(beta) = beta^omega, undefined at beta = 0"""
        assert decay_rate(2.0, -1.0) == pytest.approx(0.5)
        assert decay_rate(4.0, 0.5) == pytest.approx(2.0)
        with pytest.raises(InvalidArgumentError):
            decay_rate(0.0, -1.0)

    def test_stationary_variance(self):
        """Ornstein-Uhlenbeck chains settle at 1 / (beta (lambda / sigma^2 + a))"""
        potential = QuadraticPotential(np.eye(1000), 1.0)
        variance = _ou_variance(potential, TemperatureParams(beta=2.0), dt=0.01)
        assert variance == pytest.approx(1.0 / 3.0, rel=0.05)

    def test_prior_dynamics(self):
        """beta = 0 samples the weight prior"""
        potential = QuadraticPotential(np.eye(1000), np.full(1000, 0.5))
        variance = _ou_variance(potential, TemperatureParams(beta=0.0), dt=0.01)
        assert variance == pytest.approx(2.0, rel=0.08)


@pytest.fixture
def small_problem():
    rng = np.random.default_rng(12)
    profile = WidthProfile(hidden_widths=[3], output_width=1, prior_variances=[1.0, 1.0])
    return (
        NetworkConfig(profile=profile),
        rng.standard_normal((2, 2)),
        rng.standard_normal((2, 1)),
        rng.standard_normal((1, 2)),
    )


def _schedule(**updates):
    values = dict(dt=1e-3, burn_in=10, sample_steps=20, thinning=5, seed=9, chains=2)
    values.update(updates)
    return LangevinSchedule(**values)


class TestRunChains:
    """Test cases for multi-chain estimates"""

    def test_worker_independence(self, small_problem):
        """Chains are keyed by id so worker lanes do not change results"""
        config, x, y, _ = small_problem
        temp = TemperatureParams(beta=1.0)
        serial = run_chains(config, x, y, temp, _schedule())
        threaded = run_chains(config, x, y, temp, _schedule(), max_workers=2)
        np.testing.assert_array_equal(serial.kernel(1), threaded.kernel(1))
        assert serial.samples == 8

    def test_metadata_and_trace(self, small_problem):
        """Estimates carry the schedule and every recorded frame when asked"""
        config, x, y, x_test = small_problem
        estimate = run_chains(
            config, x, y, TemperatureParams(beta=1.0), _schedule(), x_test=x_test, keep_trace=True
        )
        assert estimate.metadata["omega"] == -1.0
        assert "reporting" in estimate.metadata
        assert len(estimate.trace) == 8
        assert {record.chain for record in estimate.trace} == {0, 1}
        assert estimate.predictor_mean.shape == (1, 1)
        assert estimate.predictor_covariance.shape == (1, 1, 1, 1)
        assert estimate.kernel_se(1).shape == (2, 2)

    def test_target_shape(self, small_problem):
        """Targets must be (p, n_d)"""
        config, x, _, _ = small_problem
        with pytest.raises(InvalidArgumentError):
            run_chains(config, x, np.zeros((2, 2)), TemperatureParams(), _schedule())
