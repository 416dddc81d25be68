"""
Full-batch Langevin posterior sampler
Euler-Maruyama updates with prior-precision weight decay, multi-chain kernel estimates
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Tuple

import numpy as np
import structlog

from core.errors import DivergenceError, InvalidArgumentError
from core.schemas.architecture import LangevinSchedule, NetworkConfig, TemperatureParams

from .network import (
    NetworkParameters,
    edge_prior_variance,
    forward,
    grad_energy,
    init_parameters,
    input_width,
    shift_tables,
    zeros_like_parameters,
)
from .trace_stream import TraceRecord

logger = structlog.get_logger(__name__)

DIVERGENCE_BOUND = 1e10
ESS_BATCHES = 20


class Potential(Protocol):
    """Energy whose gradient drives the chain, plus the prior precision of every coordinate"""

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        ...

    @property
    def prior_precision(self) -> np.ndarray:
        ...


class QuadraticPotential:
    """E = 1/2 theta^T A theta with an optional Gaussian prior"""

    def __init__(self, precision: np.ndarray, prior_precision: Optional[np.ndarray] = None):
        self.precision = np.atleast_2d(np.asarray(precision, dtype=float))
        dim = self.precision.shape[0]
        self._prior = (
            np.zeros(dim) if prior_precision is None else np.broadcast_to(prior_precision, (dim,))
        )

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        return self.precision @ theta

    @property
    def prior_precision(self) -> np.ndarray:
        return np.asarray(self._prior, dtype=float)


class NetworkPotential:
    """Squared-error energy of a network on a training set, weights flattened"""

    def __init__(self, config: NetworkConfig, x: np.ndarray, y: np.ndarray):
        self.config = config
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.n_0 = input_width(config, self.x)
        self.tables = shift_tables(config)
        self.template = zeros_like_parameters(config, self.n_0)
        self._prior = np.concatenate(
            [
                np.broadcast_to(1.0 / edge_prior_variance(config, edge), w.shape).ravel()
                for edge, w in self.template.weights.items()
            ]
        )

    def parameters(self, theta: np.ndarray) -> NetworkParameters:
        return self.template.with_flat(theta)

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        grad, _, _ = grad_energy(self.config, self.parameters(theta), self.x, self.y, self.tables)
        return grad.flat()

    @property
    def prior_precision(self) -> np.ndarray:
        return self._prior


@dataclass
class ChainState:
    """Parameters of one chain, its step counter and its Philox stream"""

    theta: np.ndarray
    rng: np.random.Generator
    chain_id: int = 0
    step: int = 0


def chain_generator(seed: int, chain: int) -> np.random.Generator:
    sequence = np.random.SeedSequence(int(seed), spawn_key=(int(chain),))
    return np.random.Generator(np.random.Philox(sequence))


def decay_rate(beta: float, omega: float) -> float:
    """lambda(beta) = beta^omega"""
    if beta == 0.0:
        raise InvalidArgumentError("the decay power law is undefined at beta = 0")
    return float(beta**omega)


def langevin_step(
    state: ChainState,
    potential: Potential,
    temp: TemperatureParams,
    dt: float,
    omega: float = -1.0,
    use_prior: bool = True,
) -> ChainState:
    """
    One Euler-Maruyama update

    theta' = theta - lambda(beta) (theta / sigma^2) dt - grad E dt + xi sqrt(2 dt / beta).
    At beta = 0 the time-rescaled dynamics theta' = theta - (theta / sigma^2) dt + xi sqrt(2 dt)
    samples the prior; at beta = inf the noise vanishes.

    Args:
        state: chain state, advanced in place and returned
        potential: energy gradient and prior precisions
        temp: inverse temperature
        dt: step size
        omega: exponent of the decay power law
        use_prior: include the weight-decay term

    Raises:
        DivergenceError: when any coordinate leaves [-1e10, 1e10] or turns non-finite
    """
    if not dt > 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt}")
    theta = state.theta
    precision = potential.prior_precision if use_prior else 0.0
    beta = temp.beta
    if temp.is_prior:
        if omega != -1.0:
            raise InvalidArgumentError("prior sampling at beta = 0 needs omega = -1")
        drift = -precision * theta
        noise_scale = math.sqrt(2.0 * dt)
    else:
        decay = 0.0 if not use_prior else decay_rate(beta, omega)
        drift = -decay * precision * theta - potential.gradient(theta)
        noise_scale = 0.0 if temp.is_limit else math.sqrt(2.0 * dt / beta)
    noise = state.rng.standard_normal(theta.shape) if noise_scale > 0 else 0.0
    state.theta = theta + drift * dt + noise_scale * noise
    state.step += 1
    if not np.all(np.abs(state.theta) <= DIVERGENCE_BOUND):
        raise DivergenceError(state.chain_id, dt, state.step)
    return state


@dataclass
class _ChainSums:
    """Batch sums of recorded observables for one chain"""

    batch_sums: Dict[str, np.ndarray]
    batch_counts: np.ndarray
    squares: Dict[str, np.ndarray]
    outer: Dict[str, np.ndarray]
    trace: List[TraceRecord] = field(default_factory=list)

    @property
    def count(self) -> int:
        return int(self.batch_counts.sum())

    def mean(self, name: str) -> np.ndarray:
        return self.batch_sums[name].sum(axis=0) / self.count


@dataclass
class KernelEstimate:
    """Chain-averaged hidden-layer kernels with entrywise standard errors"""

    means: List[np.ndarray]
    standard_errors: List[np.ndarray]
    effective_sample_size: float
    samples: int
    chains: int
    predictor_mean: Optional[np.ndarray] = None
    predictor_mean_se: Optional[np.ndarray] = None
    predictor_covariance: Optional[np.ndarray] = None
    metadata: Dict[str, object] = field(default_factory=dict)
    trace: List[TraceRecord] = field(default_factory=list, repr=False)

    def kernel(self, layer: int) -> np.ndarray:
        return self.means[layer - 1]

    def kernel_se(self, layer: int) -> np.ndarray:
        return self.standard_errors[layer - 1]


def _observe(
    potential: NetworkPotential, theta: np.ndarray, x_test: Optional[np.ndarray]
) -> Dict[str, np.ndarray]:
    params = potential.parameters(theta)
    state = forward(potential.config, params, potential.x, potential.tables)
    values = {f"layer{layer}": k for layer, k in state.kernels.items()}
    if x_test is not None:
        values["predictor"] = forward(potential.config, params, x_test, potential.tables).output
    return values


def _run_chain(
    chain: int,
    potential: NetworkPotential,
    temp: TemperatureParams,
    schedule: LangevinSchedule,
    x_test: Optional[np.ndarray],
    keep_trace: bool,
) -> _ChainSums:
    rng = chain_generator(schedule.seed, chain)
    theta = init_parameters(potential.config, potential.n_0, rng).flat()
    state = ChainState(theta=theta, rng=rng, chain_id=chain)
    for _ in range(schedule.burn_in):
        langevin_step(state, potential, temp, schedule.dt, schedule.omega)

    recorded = schedule.recorded_per_chain
    n_batches = min(ESS_BATCHES, recorded)
    sums: Optional[_ChainSums] = None
    index = 0
    for step in range(1, schedule.sample_steps + 1):
        langevin_step(state, potential, temp, schedule.dt, schedule.omega)
        if step % schedule.thinning or index >= recorded:
            continue
        values = _observe(potential, state.theta, x_test)
        if sums is None:
            sums = _ChainSums(
                batch_sums={k: np.zeros((n_batches,) + v.shape) for k, v in values.items()},
                batch_counts=np.zeros(n_batches, dtype=int),
                squares={k: np.zeros(v.shape) for k, v in values.items()},
                outer={},
            )
            if "predictor" in values:
                size = values["predictor"].size
                sums.outer["predictor"] = np.zeros((size, size))
        batch = index * n_batches // recorded
        sums.batch_counts[batch] += 1
        for name, value in values.items():
            sums.batch_sums[name][batch] += value
            sums.squares[name] += value * value
        if "predictor" in values:
            flat = values["predictor"].ravel()
            sums.outer["predictor"] += np.outer(flat, flat)
        if keep_trace:
            kernels = [values[f"layer{layer}"] for layer in range(1, potential.config.depth)]
            sums.trace.append(TraceRecord(chain, state.step, kernels))
        index += 1
    assert sums is not None
    logger.debug("chain finished", chain=chain, steps=state.step, recorded=index)
    return sums


def _pooled_statistics(
    chains: List[_ChainSums], name: str
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pooled mean, standard error and per-entry effective sample size of one observable"""
    total = sum(c.count for c in chains)
    mean = sum(c.batch_sums[name].sum(axis=0) for c in chains) / total
    second = sum(c.squares[name] for c in chains) / total
    sample_var = np.maximum(second - mean * mean, 0.0) * total / max(total - 1, 1)

    shape = (-1,) + (1,) * mean.ndim
    batch_means = np.concatenate(
        [c.batch_sums[name] / np.maximum(c.batch_counts, 1).reshape(shape) for c in chains]
    )
    weights = np.concatenate([c.batch_counts for c in chains]).astype(float)
    keep = weights > 0
    batch_means, weights = batch_means[keep], weights[keep]
    if len(weights) >= 2:
        spread = np.tensordot(weights, (batch_means - mean) ** 2, axes=(0, 0)) / total
        within = spread / (len(weights) - 1)
    else:
        within = np.full_like(mean, np.inf)

    if len(chains) >= 2:
        chain_means = np.stack([c.mean(name) for c in chains])
        between = chain_means.var(axis=0, ddof=1) / len(chains)
    else:
        between = np.zeros_like(mean)
    variance = np.maximum(within, between)
    se = np.sqrt(variance)
    with np.errstate(divide="ignore", invalid="ignore"):
        ess = np.where(variance > 0, sample_var / variance, float(total))
    return mean, se, np.minimum(ess, float(total))


def run_chains(
    config: NetworkConfig,
    x: np.ndarray,
    y: np.ndarray,
    temp: TemperatureParams,
    schedule: LangevinSchedule,
    x_test: Optional[np.ndarray] = None,
    max_workers: int = 1,
    keep_trace: bool = False,
) -> KernelEstimate:
    """
    Run independent Langevin chains and average their recorded kernels

    Args:
        config: network architecture
        x: training inputs, (p, n_0) or (p, channels, s)
        y: (p, n_d) training targets
        temp: inverse temperature and readout variance
        schedule: step size, burn-in, sampling window, thinning, seed and chain count
        x_test: optional test inputs for predictor statistics
        max_workers: worker lanes over chains
        keep_trace: keep every recorded sample for a trace stream

    Returns:
        KernelEstimate pooled over chains in chain-id order
    """
    potential = NetworkPotential(config, x, y)
    if potential.y.shape != (potential.x.shape[0], config.profile.output_width):
        raise InvalidArgumentError(f"targets must be (p, {config.profile.output_width})")
    if schedule.recorded_per_chain < 1:
        raise InvalidArgumentError("the sampling window records no samples")
    test = None if x_test is None else np.asarray(x_test, dtype=float)

    def run(chain: int) -> _ChainSums:
        return _run_chain(chain, potential, temp, schedule, test, keep_trace)

    chain_ids = list(range(schedule.chains))
    if max_workers <= 1 or schedule.chains == 1:
        results = [run(chain) for chain in chain_ids]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            results = list(executor.map(run, chain_ids))

    means, ses, ess_values = [], [], []
    for layer in range(1, config.depth):
        mean, se, ess = _pooled_statistics(results, f"layer{layer}")
        means.append(mean)
        ses.append(se)
        ess_values.append(ess)
    effective = float(np.median(np.concatenate([e.ravel() for e in ess_values])))

    estimate = KernelEstimate(
        means=means,
        standard_errors=ses,
        effective_sample_size=effective,
        samples=sum(r.count for r in results),
        chains=schedule.chains,
        metadata={
            "omega": schedule.omega,
            "dt": schedule.dt,
            "reporting": "multi-chain standard errors rather than a single trained instance",
        },
        trace=[record for r in results for record in r.trace],
    )
    if test is not None:
        mean, se, _ = _pooled_statistics(results, "predictor")
        total = estimate.samples
        outer = sum(r.outer["predictor"] for r in results) / total
        flat = mean.ravel()
        cov = (outer - np.outer(flat, flat)) * total / max(total - 1, 1)
        n_test, n_d = mean.shape
        estimate.predictor_mean = mean
        estimate.predictor_mean_se = se
        estimate.predictor_covariance = cov.reshape(n_test, n_d, n_test, n_d)
    logger.info(
        "langevin chains reduced",
        chains=schedule.chains,
        samples=estimate.samples,
        ess=round(effective, 1),
    )
    return estimate
