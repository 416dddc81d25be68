"""
Importance-sampling oracle with the readout integrated out exactly
Prior draws of the hidden-layer kernels are reweighted by the Gaussian readout evidence
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import structlog
from scipy.special import logsumexp

from core.errors import InvalidArgumentError, NeedsFiniteTemperatureError
from core.schemas.architecture import NetworkConfig, TemperatureParams
from theory.gpkernels import FourIndexKernel
from theory.mathcore import GramMatrix, symmetrize

from .prior_draws import InputKernel, block_generator, draw_prior_kernels, map_blocks

logger = structlog.get_logger(__name__)

IMPORTANCE_STREAM = 2
ESS_THRESHOLD = 100.0

Observable = Callable[[List[np.ndarray]], np.ndarray]
Reduced = Tuple[float, float, Dict[str, "WeightedMoments"]]


def readout_kernels(config: NetworkConfig, inputs: InputKernel, last: np.ndarray) -> np.ndarray:
    """Contract a batch of last-hidden-layer kernels (size, D, D) to (size, p, p)"""
    if not config.architecture.is_convolutional:
        return last
    k4 = inputs.four_index(last)
    u = config.readout_weights()
    if u is None:
        return np.einsum("xmnaa->xmn", k4) / inputs.s
    return np.einsum("xmnab,a,b->xmn", k4, u, u, optimize=True)


def log_weights(kernels: np.ndarray, y: np.ndarray, temp: TemperatureParams) -> np.ndarray:
    """
    Log evidence of the readout layer for every kernel in a batch

    -(n_d/2) [beta tr(A^-1 G_yy) + log det A] with A = I + beta sigma_d^2 K, through a
    Cholesky factor of A.
    """
    if temp.is_limit:
        raise NeedsFiniteTemperatureError("importance weights need a finite beta")
    p, n_d = y.shape
    kernels = np.asarray(kernels, dtype=float)
    if temp.is_prior:
        return np.zeros(kernels.shape[0])
    a = np.eye(p) + temp.expansion_parameter * symmetrize(kernels)
    chol = np.linalg.cholesky(a)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    whitened = np.linalg.solve(chol, np.broadcast_to(y, kernels.shape[:-2] + y.shape))
    trace = np.einsum("xij,xij->x", whitened, whitened) / n_d
    return -0.5 * n_d * (temp.beta * trace + logdet)


def _conditional_predictor(
    readout: np.ndarray, y: np.ndarray, p: int, temp: TemperatureParams
) -> Tuple[np.ndarray, np.ndarray]:
    """Gaussian readout posterior given one hidden-layer draw, batched"""
    k = readout[:, :p, :p]
    r_hat = readout[:, :p, p:]
    k_hat = readout[:, p:, p:]
    n_d = y.shape[1]
    if temp.is_prior:
        zeros = np.zeros((k.shape[0], k_hat.shape[1], n_d))
        return zeros, temp.readout_variance * symmetrize(k_hat)
    rhs = np.concatenate([np.broadcast_to(y, (k.shape[0],) + y.shape), r_hat], axis=2)
    solved = np.linalg.solve(k + temp.ridge * np.eye(p), rhs)
    mean = np.einsum("xim,xij->xmj", r_hat, solved[:, :, :n_d])
    cov = temp.readout_variance * (k_hat - np.einsum("xim,xin->xmn", r_hat, solved[:, :, n_d:]))
    return mean, symmetrize(cov)


@dataclass
class WeightedMoments:
    """Weighted sums of one observable, kept relative to a log-scale reference"""

    log_scale: float
    weight: float
    weight_sq: float
    first: np.ndarray
    weighted_sq_first: np.ndarray
    weighted_sq_second: np.ndarray
    outer: Optional[np.ndarray] = None

    @classmethod
    def from_block(
        cls, logw: np.ndarray, values: np.ndarray, shift: np.ndarray, covariance: bool
    ) -> "WeightedMoments":
        scale = float(np.max(logw))
        w = np.exp(logw - scale)
        centred = values.reshape(values.shape[0], -1) - shift.ravel()
        w2 = w * w
        outer = np.einsum("x,xi,xj->ij", w, centred, centred) if covariance else None
        return cls(
            log_scale=scale,
            weight=float(w.sum()),
            weight_sq=float(w2.sum()),
            first=w @ centred,
            weighted_sq_first=w2 @ centred,
            weighted_sq_second=w2 @ (centred * centred),
            outer=outer,
        )

    def rescaled(self, log_scale: float) -> "WeightedMoments":
        factor = float(np.exp(self.log_scale - log_scale))
        sq = factor * factor
        return WeightedMoments(
            log_scale,
            self.weight * factor,
            self.weight_sq * sq,
            self.first * factor,
            self.weighted_sq_first * sq,
            self.weighted_sq_second * sq,
            None if self.outer is None else self.outer * factor,
        )

    def combine(self, other: "WeightedMoments") -> "WeightedMoments":
        scale = max(self.log_scale, other.log_scale)
        a, b = self.rescaled(scale), other.rescaled(scale)
        outer = None if a.outer is None or b.outer is None else a.outer + b.outer
        return WeightedMoments(
            scale,
            a.weight + b.weight,
            a.weight_sq + b.weight_sq,
            a.first + b.first,
            a.weighted_sq_first + b.weighted_sq_first,
            a.weighted_sq_second + b.weighted_sq_second,
            outer,
        )


@dataclass
class ObservableEstimate:
    """Self-normalized posterior mean of one observable with its delta-method standard error"""

    mean: np.ndarray
    standard_error: np.ndarray
    covariance: Optional[np.ndarray] = None


def _finalize(moments: WeightedMoments, shift: np.ndarray, covariance: bool) -> ObservableEstimate:
    norm = moments.weight
    centred_mean = moments.first / norm
    # sum w^2 (O - <O>)^2 / (sum w)^2 around the running shift
    spread = (
        moments.weighted_sq_second
        - 2.0 * centred_mean * moments.weighted_sq_first
        + centred_mean**2 * moments.weight_sq
    )
    se = np.sqrt(np.maximum(spread, 0.0)) / norm
    cov = None
    if covariance and moments.outer is not None:
        cov = moments.outer / norm - np.outer(centred_mean, centred_mean)
        cov = symmetrize(cov)
    return ObservableEstimate(
        mean=(centred_mean + shift.ravel()).reshape(shift.shape),
        standard_error=se.reshape(shift.shape),
        covariance=cov,
    )


@dataclass
class ImportanceEstimate:
    """Posterior means of hidden-layer observables from reweighted prior draws"""

    kernels: List[ObservableEstimate]
    observables: Dict[str, ObservableEstimate]
    effective_sample_size: float
    n_draws: int
    log_evidence: float
    unreliable: bool = False
    predictor_mean: Optional[ObservableEstimate] = None
    predictor_covariance: Optional[np.ndarray] = None
    warnings: List[str] = field(default_factory=list)

    def kernel(self, layer: int) -> np.ndarray:
        return self.kernels[layer - 1].mean

    def kernel_se(self, layer: int) -> np.ndarray:
        return self.kernels[layer - 1].standard_error


def importance_oracle(
    config: NetworkConfig,
    gxx: Union[GramMatrix, FourIndexKernel],
    y: np.ndarray,
    temp: TemperatureParams,
    n_draws: int,
    seed: int,
    block_size: int = 4096,
    max_workers: int = 1,
    observables: Optional[Mapping[str, Observable]] = None,
    covariance: bool = False,
    ess_threshold: float = ESS_THRESHOLD,
) -> ImportanceEstimate:
    """
    Self-normalized importance estimate of posterior hidden-layer observables

    Args:
        config: network architecture
        gxx: input kernel over training points followed by any test points
        y: (p, n_d) training targets; points of gxx beyond the first p are test points
            and enable predictor statistics
        temp: finite beta and readout variance
        n_draws: prior draws
        seed: base seed
        block_size: draws per Philox block
        max_workers: worker lanes over blocks
        observables: extra functions of the per-layer kernel batches, each returning
            (size, ...) values
        covariance: also estimate the posterior covariance of the kernel entries
        ess_threshold: Kish effective sample size below which the estimate is flagged

    Returns:
        ImportanceEstimate with per-layer mean kernels, standard errors and the effective
        sample size
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 2:
        raise InvalidArgumentError("targets must be a (p, n_d) array")
    if y.shape[1] != config.profile.output_width:
        raise InvalidArgumentError(
            f"targets have {y.shape[1]} columns, profile expects n_d = {config.profile.output_width}"
        )
    if temp.is_limit:
        raise NeedsFiniteTemperatureError("importance sampling needs a finite beta")
    inputs = InputKernel.from_gram(gxx)
    p = y.shape[0]
    if inputs.p < p:
        raise InvalidArgumentError(f"input kernel covers {inputs.p} points, targets {p}")
    predict = inputs.p > p
    extra = dict(observables or {})
    n_layers = config.depth - 1

    def observe(kernels: List[np.ndarray]) -> Dict[str, np.ndarray]:
        values = {f"layer{index + 1}": k for index, k in enumerate(kernels)}
        for name, fn in extra.items():
            values[name] = np.asarray(fn(kernels), dtype=float)
        if predict:
            readout = readout_kernels(config, inputs, kernels[-1])
            mean, cov = _conditional_predictor(readout, y, p, temp)
            values["predictor_mean"] = mean
            values["predictor_conditional_cov"] = cov
        return values

    def run_block(index: int, size: int) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        rng = block_generator(seed, IMPORTANCE_STREAM, index)
        kernels = draw_prior_kernels(config, inputs, size, seed, rng=rng)
        readout = readout_kernels(config, inputs, kernels[-1])[:, :p, :p]
        return log_weights(readout, y, temp), observe(kernels)

    # the first block fixes the centring shift of every observable
    first_logw, first_values = run_block(0, min(block_size, n_draws))
    w0 = np.exp(first_logw - first_logw.max())
    shifts = {
        name: np.tensordot(w0 / w0.sum(), values, axes=(0, 0)) for name, values in first_values.items()
    }
    wants_cov = {
        name: (covariance and name.startswith("layer")) or name == "predictor_mean"
        for name in first_values
    }

    def reduce(logw: np.ndarray, values: Dict[str, np.ndarray]) -> Reduced:
        moments = {
            name: WeightedMoments.from_block(logw, v, shifts[name], wants_cov[name])
            for name, v in values.items()
        }
        return float(logsumexp(logw)), float(logsumexp(2.0 * logw)), moments

    reduced = [reduce(first_logw, first_values)]
    remaining = n_draws - len(first_logw)
    if remaining > 0:

        def later_block(index: int, size: int) -> Reduced:
            return reduce(*run_block(index + 1, size))

        reduced.extend(map_blocks(later_block, remaining, block_size, max_workers))

    totals = reduced[0][2]
    for _, _, moments in reduced[1:]:
        totals = {name: totals[name].combine(moments[name]) for name in totals}
    log_sum = float(logsumexp([r[0] for r in reduced]))
    log_sum_sq = float(logsumexp([r[1] for r in reduced]))
    ess = float(np.exp(2.0 * log_sum - log_sum_sq))
    estimates = {
        name: _finalize(totals[name], shifts[name], wants_cov[name]) for name in totals
    }
    kernels = [estimates.pop(f"layer{layer}") for layer in range(1, n_layers + 1)]
    for est in kernels:
        est.mean = symmetrize(est.mean)
        if inputs.spatial_shape:
            est.mean = inputs.four_index(est.mean)
            est.standard_error = inputs.four_index(est.standard_error)

    warnings: List[str] = []
    unreliable = ess < ess_threshold
    if unreliable:
        message = f"effective sample size {ess:.1f} below {ess_threshold:g}"
        warnings.append(message)
        logger.warning("unreliable importance estimate", ess=ess, n_draws=n_draws)

    predictor_mean = None
    predictor_cov = None
    if predict:
        predictor_mean = estimates.pop("predictor_mean")
        conditional = estimates.pop("predictor_conditional_cov").mean
        n_test, n_d = predictor_mean.mean.shape
        between = predictor_mean.covariance
        assert between is not None
        predictor_cov = between.reshape(n_test, n_d, n_test, n_d) + np.einsum(
            "mn,jk->mjnk", conditional, np.eye(n_d)
        )

    logger.info(
        "importance oracle reduced",
        n_draws=n_draws,
        blocks=len(reduced),
        ess=round(ess, 2),
        layers=n_layers,
    )
    return ImportanceEstimate(
        kernels=kernels,
        observables=estimates,
        effective_sample_size=ess,
        n_draws=n_draws,
        log_evidence=log_sum - np.log(n_draws),
        unreliable=unreliable,
        predictor_mean=predictor_mean,
        predictor_covariance=predictor_cov,
        warnings=warnings,
    )
