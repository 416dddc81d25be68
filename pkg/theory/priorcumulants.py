"""
Prior covariances of hidden-layer kernels
Leading and exact second cumulants for linear MLPs and CNNs, four-point functions of a
single nonlinear layer, and a Monte-Carlo oracle over the prior
"""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from scipy import integrate
from scipy.special import ndtri
from scipy.stats import qmc

from core.errors import InvalidArgumentError, ResourceLimitError, UnsupportedOrderError
from core.schemas.architecture import ActivationSpec, FilterSpec, NetworkConfig, WidthProfile

from .gpkernels import (
    QMC_POINTS,
    QMC_REPLICATES,
    FourIndexKernel,
    _layer_filters,
    cnn_linear_gp,
    mlp_linear_gp,
    shift_operator,
)
from .mathcore import MAX_MOMENT_ORDER, GramMatrix, isserlis_moment, psd_sqrt

logger = structlog.get_logger(__name__)

DEFAULT_CNN_CAP = 256
CNN_MODES = ("closed-form", "propagated")


def pair_product(k: np.ndarray) -> np.ndarray:
    """K_{mu rho} K_{nu lam} + K_{mu lam} K_{nu rho}, indexed [mu, nu, rho, lam]"""
    return np.einsum("mr,nl->mnrl", k, k) + np.einsum("ml,nr->mnrl", k, k)


def _check_lag(profile: WidthProfile, layer: int, lag: int) -> None:
    profile.check_hidden_layer(layer)
    if lag < 0 or layer + lag > profile.depth - 1:
        raise InvalidArgumentError(
            f"layer {layer} + lag {lag} must stay within hidden layers 1..{profile.depth - 1}"
        )


def mlp_kernel_covariance(gxx: GramMatrix, profile: WidthProfile, layer: int, lag: int = 0) -> np.ndarray:
    """
    Leading prior covariance cov_W(K^(l)_{mu nu}, K^(l+lag)_{rho lam}) of a deep linear MLP

    Args:
        gxx: input Gram matrix
        profile: widths and prior variances
        layer: first hidden layer l
        lag: layer offset of the second kernel

    Returns:
        (p, p, p, p) tensor; exactly linear in sum_{l' <= l} 1/n_{l'}
    """
    _check_lag(profile, layer, lag)
    k_inf = mlp_linear_gp(gxx, profile, layer).entries
    shape = profile.variance_prefactor(layer, lag) * pair_product(k_inf)
    return float(profile.inverse_width_sum(layer)) * shape


def mlp_kernel_covariance_exact(
    gxx: GramMatrix, profile: WidthProfile, layer: int, lag: int = 0
) -> np.ndarray:
    """Finite-width prior covariance from the exact second-moment recursion"""
    _check_lag(profile, layer, lag)
    g = gxx.entries
    moment = np.einsum("mn,rl->mnrl", g, g)
    for index in range(1, layer + 1):
        sigma4 = profile.variance(index) ** 2
        inv_n = 1.0 / profile.width(index)
        crossed = np.einsum("mrnl->mnrl", moment) + np.einsum("mlnr->mnrl", moment)
        moment = sigma4 * (moment + inv_n * crossed)
    k_inf = profile.gp_scale(layer) * g
    covariance = moment - np.einsum("mn,rl->mnrl", k_inf, k_inf)
    return profile.variance_prefactor(layer, lag) * covariance


def _shift_slot(block: np.ndarray, spec: FilterSpec, spatial_shape: Sequence[int], slot: int) -> np.ndarray:
    """Apply the shift operator to spatial axes (a, b) (slot 0) or (c, d) (slot 1) of [a, b, c, d]"""
    if slot == 1:
        return shift_operator(block, spec, spatial_shape)
    moved = np.transpose(block, (2, 3, 0, 1))
    return np.transpose(shift_operator(moved, spec, spatial_shape), (2, 3, 0, 1))


class CnnKernelCovariance:
    """
    Lazily evaluated eight-index covariance cov_W(K^(l)_{mu nu, a b}, K^(l+lag)_{rho lam, c d})

    Blocks are requested per sample quadruple and returned as (s, s, s, s) arrays indexed
    [a, b, c, d]. ``closed-form`` uses the leading pair product of K_inf^(l) scaled by
    sum 1/n; ``propagated`` carries every lower layer through the shift operator.
    """

    def __init__(
        self,
        gxx_tensor: FourIndexKernel,
        filters: Union[FilterSpec, Sequence[FilterSpec]],
        profile: WidthProfile,
        layer: int,
        lag: int = 0,
        mode: str = "closed-form",
        max_ps: int = DEFAULT_CNN_CAP,
    ):
        _check_lag(profile, layer, lag)
        if mode not in CNN_MODES:
            raise InvalidArgumentError(f"unknown CNN covariance mode {mode!r}")
        if gxx_tensor.p * gxx_tensor.s > max_ps:
            raise ResourceLimitError(
                f"p*s = {gxx_tensor.p * gxx_tensor.s} exceeds the configured cap {max_ps}"
            )
        self.logger = structlog.get_logger(__name__)
        self.profile = profile
        self.layer = layer
        self.lag = lag
        self.mode = mode
        self.spatial_shape = gxx_tensor.spatial_shape
        self.filters = _layer_filters(filters, profile.depth - 1)
        self.kernels = [
            cnn_linear_gp(gxx_tensor, self.filters, profile, index).values
            for index in range(1, layer + 1)
        ]
        self._cache: Dict[Tuple[int, int, int, int], np.ndarray] = {}

    @property
    def p(self) -> int:
        return int(self.kernels[0].shape[0])

    @property
    def s(self) -> int:
        return int(self.kernels[0].shape[2])

    def _pair_block(self, k: np.ndarray, mu: int, nu: int, rho: int, lam: int) -> np.ndarray:
        return np.einsum("ac,bd->abcd", k[mu, rho], k[nu, lam]) + np.einsum(
            "ad,bc->abcd", k[mu, lam], k[nu, rho]
        )

    def _same_layer_block(self, mu: int, nu: int, rho: int, lam: int) -> np.ndarray:
        if self.mode == "closed-form":
            weight = float(self.profile.inverse_width_sum(self.layer))
            return weight * self._pair_block(self.kernels[-1], mu, nu, rho, lam)
        block = np.zeros((self.s,) * 4)
        for index in range(1, self.layer + 1):
            if index > 1:
                spec = self.filters[index - 1]
                sigma4 = self.profile.variance(index) ** 2
                block = _shift_slot(block, spec, self.spatial_shape, 0)
                block = sigma4 * _shift_slot(block, spec, self.spatial_shape, 1)
            pair = self._pair_block(self.kernels[index - 1], mu, nu, rho, lam)
            block = block + pair / self.profile.width(index)
        return block

    def block(self, mu: int, nu: int, rho: int, lam: int) -> np.ndarray:
        key = (mu, nu, rho, lam)
        for index in key:
            if not 0 <= index < self.p:
                raise InvalidArgumentError(f"sample index {index} outside 0..{self.p - 1}")
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        block = self._same_layer_block(mu, nu, rho, lam)
        for step in range(1, self.lag + 1):
            index = self.layer + step
            block = self.profile.variance(index) * _shift_slot(
                block, self.filters[index - 1], self.spatial_shape, 1
            )
        self._cache[key] = block
        return block

    def dense(self) -> np.ndarray:
        """Full (p, p, s, s, p, p, s, s) tensor; only sensible for small p*s"""
        p, s = self.p, self.s
        out = np.empty((p, p, s, s, p, p, s, s))
        for mu, nu, rho, lam in itertools.product(range(p), repeat=4):
            out[mu, nu, :, :, rho, lam, :, :] = self.block(mu, nu, rho, lam)
        return out


def cnn_kernel_covariance(
    gxx_tensor: FourIndexKernel,
    filters: Union[FilterSpec, Sequence[FilterSpec]],
    profile: WidthProfile,
    layer: int,
    lag: int = 0,
    mode: str = "closed-form",
    max_ps: int = DEFAULT_CNN_CAP,
) -> CnnKernelCovariance:
    return CnnKernelCovariance(gxx_tensor, filters, profile, layer, lag, mode, max_ps)


def _is_diagonal(matrix: np.ndarray) -> bool:
    return bool(np.all(matrix[~np.eye(matrix.shape[0], dtype=bool)] == 0.0))


def _symmetric_fill(p: int, value_of) -> np.ndarray:
    out = np.empty((p, p, p, p))
    for combo in itertools.combinations_with_replacement(range(p), 4):
        value = value_of(combo)
        for perm in set(itertools.permutations(combo)):
            out[perm] = value
    return out


def _polynomial_fourpoint(cov: np.ndarray, coeffs: List[float]) -> np.ndarray:
    terms = [(k, c) for k, c in enumerate(coeffs) if c != 0.0]

    def value_of(combo: Tuple[int, ...]) -> float:
        distinct = sorted(set(combo))
        sub = cov[np.ix_(distinct, distinct)]
        slots = [distinct.index(i) for i in combo]
        total = 0.0
        for choice in itertools.product(terms, repeat=4):
            coefficient = 1.0
            indices: List[int] = []
            for (power, c), slot in zip(choice, slots):
                coefficient *= c
                indices.extend([slot] * power)
            total += coefficient * isserlis_moment(sub, indices)
        return total

    return _symmetric_fill(cov.shape[0], value_of)


def activation_moments(variance: float, act: ActivationSpec, max_power: int = 4) -> np.ndarray:
    """E[phi(h)^k] for k = 0..max_power with h ~ N(0, variance)"""
    std = float(np.sqrt(max(variance, 0.0)))
    moments = np.empty(max_power + 1)
    if act.is_polynomial:
        nodes, weights = np.polynomial.hermite_e.hermegauss(2 * act.degree * max_power + 2)
        weights = weights / np.sqrt(2.0 * np.pi)
        values = act(std * nodes)
        for k in range(max_power + 1):
            moments[k] = float(np.dot(weights, values**k))
    else:
        density = lambda x: np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)  # noqa: E731
        for k in range(max_power + 1):
            integrand = lambda x, k=k: float(act(np.asarray(std * x))) ** k * density(x)  # noqa
            lower = integrate.quad(integrand, -np.inf, 0.0, epsabs=1e-14, epsrel=1e-12)[0]
            upper = integrate.quad(integrand, 0.0, np.inf, epsabs=1e-14, epsrel=1e-12)[0]
            moments[k] = lower + upper
    # odd powers of an odd activation vanish exactly
    if act.is_odd:
        moments[1::2] = 0.0
    return moments


def _diagonal_fourpoint(diag: np.ndarray, act: ActivationSpec) -> Tuple[np.ndarray, np.ndarray]:
    moments = np.array([activation_moments(v, act) for v in diag])

    def expectation(combo: Tuple[int, ...]) -> float:
        value = 1.0
        for index, count in Counter(combo).items():
            value *= moments[index, count]
        return value

    p = len(diag)
    k_inf = np.outer(moments[:, 1], moments[:, 1])
    np.fill_diagonal(k_inf, moments[:, 2])
    fourth = _symmetric_fill(p, expectation)
    return fourth - np.einsum("mn,rl->mnrl", k_inf, k_inf), k_inf


def _qmc_fourpoint(
    cov: np.ndarray, act: ActivationSpec, n_points: int, seed: int
) -> Tuple[np.ndarray, np.ndarray]:
    p = cov.shape[0]
    root = psd_sqrt(cov)
    per_rep = max(n_points // QMC_REPLICATES, 2)
    m = int(np.ceil(np.log2(per_rep)))
    estimates = np.empty((QMC_REPLICATES, p, p, p, p))
    for rep in range(QMC_REPLICATES):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep,)))
        z = ndtri(np.clip(qmc.Sobol(d=p, scramble=True, seed=rng).random_base2(m), 1e-16, 1 - 1e-16))
        features = act(z @ root.T)
        second = features.T @ features / len(features)
        fourth = np.einsum("im,in,ir,il->mnrl", features, features, features, features) / len(features)
        estimates[rep] = fourth - np.einsum("mn,rl->mnrl", second, second)
    mean = estimates.mean(axis=0)
    se = estimates.std(axis=0, ddof=1) / np.sqrt(QMC_REPLICATES)
    return mean, se


def nonlinear_fourpoint_cov_estimate(
    gxx: GramMatrix,
    sigma1_sq: float,
    act: ActivationSpec,
    method: str = "auto",
    n_points: int = QMC_POINTS,
    seed: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    n_1 cov(K_{mu nu}, K_{rho lam}) = E[phi phi phi phi] - K_inf K_inf for one hidden layer

    Args:
        gxx: input Gram matrix
        sigma1_sq: first-layer prior variance
        act: activation
        method: auto, polynomial, diagonal or qmc
        n_points: quadrature points for the qmc path
        seed: quadrature seed

    Returns:
        (tensor, standard error); the error is zero on exact paths
    """
    if sigma1_sq <= 0:
        raise InvalidArgumentError(f"sigma_1^2 must be positive, got {sigma1_sq}")
    cov = sigma1_sq * gxx.entries
    if method == "auto":
        if act.is_polynomial and 4 * act.degree <= MAX_MOMENT_ORDER:
            method = "polynomial"
        elif _is_diagonal(cov):
            method = "diagonal"
        elif act.is_polynomial:
            raise UnsupportedOrderError(
                f"degree-{act.degree} activation needs moments of order {4 * act.degree}"
            )
        else:
            method = "qmc"
    if method == "polynomial":
        if not act.is_polynomial:
            raise InvalidArgumentError("polynomial path needs a polynomial activation")
        if 4 * act.degree > MAX_MOMENT_ORDER:
            raise UnsupportedOrderError(
                f"degree-{act.degree} activation needs moments of order {4 * act.degree}"
            )
        tensor = _polynomial_fourpoint(cov, act.polynomial_coefficients())
        second = np.array(
            [[tensor_pair(cov, act, m, n) for n in range(cov.shape[0])] for m in range(cov.shape[0])]
        )
        tensor = tensor - np.einsum("mn,rl->mnrl", second, second)
        return tensor, np.zeros_like(tensor)
    if method == "diagonal":
        if not _is_diagonal(cov):
            raise InvalidArgumentError("diagonal path needs a diagonal Gram matrix")
        tensor, _ = _diagonal_fourpoint(np.diag(cov), act)
        return tensor, np.zeros_like(tensor)
    if method == "qmc":
        return _qmc_fourpoint(cov, act, n_points, seed)
    raise InvalidArgumentError(f"unknown four-point method {method!r}")


def tensor_pair(cov: np.ndarray, act: ActivationSpec, mu: int, nu: int) -> float:
    """Exact E[phi(h_mu) phi(h_nu)] for a polynomial activation"""
    index = [mu] if mu == nu else [mu, nu]
    sub = cov[np.ix_(index, index)]
    a, b = (0, 0) if mu == nu else (0, 1)
    total = 0.0
    terms = [(k, c) for k, c in enumerate(act.polynomial_coefficients()) if c != 0.0]
    for j, cj in terms:
        for k, ck in terms:
            total += cj * ck * isserlis_moment(sub, [a] * j + [b] * k)
    return total


def nonlinear_fourpoint_cov(
    gxx: GramMatrix, sigma1_sq: float, act: ActivationSpec, method: str = "auto", seed: int = 0
) -> np.ndarray:
    return nonlinear_fourpoint_cov_estimate(gxx, sigma1_sq, act, method=method, seed=seed)[0]


@dataclass
class PriorCumulantEstimate:
    """Oracle mean and covariance of every hidden-layer kernel over the prior"""

    layers: List[int]
    p: int
    s: int
    n_draws: int
    mean: Dict[int, np.ndarray]
    mean_se: Dict[int, np.ndarray]
    covariance: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)
    covariance_se: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)

    def four_index_mean(self, layer: int) -> np.ndarray:
        """Mean kernel as [mu, nu, a, b] (s = 1 gives [mu, nu, 0, 0])"""
        flat = self.mean[layer]
        return flat.reshape(self.p, self.s, self.p, self.s).transpose(0, 2, 1, 3)


def prior_cumulant_oracle(
    config: NetworkConfig,
    gxx: Union[GramMatrix, FourIndexKernel],
    n_draws: int,
    seed: int,
    block_size: Optional[int] = None,
    max_workers: int = 1,
    covariance: bool = True,
) -> PriorCumulantEstimate:
    """
    Empirical prior mean and covariance of all hidden-layer kernels

    Args:
        config: network architecture
        gxx: input Gram matrix (MLP) or four-index input tensor (CNN)
        n_draws: number of prior draws (at least 1000)
        seed: base seed
        block_size: draws per RNG block (default: n_draws split into 32 blocks)
        max_workers: worker lanes; results do not depend on it
        covariance: also estimate cross-layer covariances

    Returns:
        PriorCumulantEstimate with per-entry standard errors
    """
    from estimators.prior_draws import InputKernel, KernelMoments, draw_prior_kernels, map_blocks

    if n_draws < 1000:
        raise InvalidArgumentError(f"n_draws must be at least 1000, got {n_draws}")
    inputs = InputKernel.from_gram(gxx)
    layers = list(range(1, config.depth))
    block = block_size or max(1, -(-n_draws // 32))
    dim = inputs.dimension

    def run_block(index: int, size: int) -> KernelMoments:
        kernels = draw_prior_kernels(config, inputs, size, seed, stream=0, block=index)
        stacked = np.concatenate([k.reshape(size, -1) for k in kernels], axis=1)
        return KernelMoments.from_samples(stacked, covariance=covariance)

    blocks = map_blocks(run_block, n_draws, block, max_workers)
    total = KernelMoments.combine_all(blocks)
    logger.info("prior oracle reduced", draws=total.count, blocks=len(blocks))

    width = dim * dim
    se = total.standard_error()
    mean = {}
    mean_se = {}
    for i, layer in enumerate(layers):
        part = slice(i * width, (i + 1) * width)
        mean[layer] = total.mean[part].reshape(dim, dim)
        mean_se[layer] = se[part].reshape(dim, dim)
    estimate = PriorCumulantEstimate(
        layers=layers, p=inputs.p, s=inputs.s, n_draws=total.count, mean=mean, mean_se=mean_se
    )
    if covariance:
        cov = total.covariance()
        cov_se = KernelMoments.batch_covariance_se(blocks)
        for i, first in enumerate(layers):
            for j, second in enumerate(layers):
                if second < first:
                    continue
                rows = slice(i * width, (i + 1) * width)
                cols = slice(j * width, (j + 1) * width)
                estimate.covariance[(first, second)] = cov[rows, cols].reshape(dim, dim, dim, dim)
                estimate.covariance_se[(first, second)] = cov_se[rows, cols].reshape(
                    dim, dim, dim, dim
                )
    return estimate


def _third_cumulant(count: int, sums: Dict[str, np.ndarray]) -> np.ndarray:
    mean_x = sums["x"] / count
    mean_y = sums["y"] / count
    xx = sums["xx"] / count
    xy = sums["xy"] / count
    xxy = sums["xxy"] / count
    return (
        xxy
        - np.einsum("ij,k->ijk", xx, mean_y)
        - np.einsum("ik,j->ijk", xy, mean_x)
        - np.einsum("jk,i->ijk", xy, mean_x)
        + 2.0 * np.einsum("i,j,k->ijk", mean_x, mean_x, mean_y)
    )


def prior_third_cumulant_oracle(
    config: NetworkConfig,
    gxx: GramMatrix,
    layer: int,
    n_draws: int,
    seed: int,
    block_size: Optional[int] = None,
    max_workers: int = 1,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sampled third joint cumulant K_W(K^(l), K^(l), K^(d-1)) of a linear MLP

    Moments are accumulated around the GP kernels, which leaves the cumulant unchanged and
    keeps the raw sums well conditioned.

    Returns:
        (cumulant, standard error), both shaped (p,) * 6
    """
    from estimators.prior_draws import InputKernel, draw_prior_kernels, map_blocks

    if config.architecture.is_convolutional or not config.architecture.is_linear:
        raise InvalidArgumentError("the third-cumulant oracle supports linear MLPs only")
    config.profile.check_hidden_layer(layer)
    if n_draws < 1000:
        raise InvalidArgumentError(f"n_draws must be at least 1000, got {n_draws}")
    inputs = InputKernel.from_gram(gxx)
    profile = config.profile
    readout = profile.depth - 1
    shift_x = (profile.gp_scale(layer) * gxx.entries).ravel()
    shift_y = (profile.gp_scale(readout) * gxx.entries).ravel()
    block = block_size or max(1, -(-n_draws // 32))

    def run_block(index: int, size: int) -> Tuple[int, Dict[str, np.ndarray]]:
        kernels = draw_prior_kernels(config, inputs, size, seed, stream=1, block=index)
        x = kernels[layer - 1].reshape(size, -1) - shift_x
        y = kernels[readout - 1].reshape(size, -1) - shift_y
        sums = {
            "x": x.sum(axis=0),
            "y": y.sum(axis=0),
            "xx": x.T @ x,
            "xy": x.T @ y,
            "xxy": np.einsum("ni,nj,nk->ijk", x, x, y, optimize=True),
        }
        return size, sums

    blocks = map_blocks(run_block, n_draws, block, max_workers)
    count = sum(size for size, _ in blocks)
    totals = {key: sum(part[key] for _, part in blocks) for key in blocks[0][1]}
    cumulant = _third_cumulant(count, totals)
    if len(blocks) > 1:
        per_block = np.stack([_third_cumulant(size, part) for size, part in blocks])
        se = per_block.std(axis=0, ddof=1) / np.sqrt(len(blocks))
    else:
        se = np.full_like(cumulant, np.inf)
    p = gxx.size
    return cumulant.reshape((p,) * 6), se.reshape((p,) * 6)
