"""
Leading finite-width posterior corrections
Correction operator, deep linear MLP/CNN and single nonlinear layer specializations,
temperature expansions and posterior covariance corrections
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from core.errors import (
    InvalidArgumentError,
    NeedsFiniteTemperatureError,
    UnsupportedOrderError,
    UnsupportedReadoutError,
)
from core.schemas.architecture import (
    ActivationSpec,
    FilterSpec,
    NetworkConfig,
    ReadoutStrategy,
    TemperatureParams,
    WidthProfile,
)

from .gpkernels import (
    FourIndexKernel,
    _layer_filters,
    cnn_linear_gp,
    mlp_linear_gp,
    readout_kernel,
    shift_operator,
    single_layer_gp,
    skip_linear_gp,
)
from .mathcore import (
    GramMatrix,
    Spectrum,
    eigendecompose,
    is_invertible,
    neumann_inverse,
    spd_inverse,
    symmetrize,
)
from .priorcumulants import (
    CNN_MODES,
    _is_diagonal,
    activation_moments,
    nonlinear_fourpoint_cov,
    prior_cumulant_oracle,
)

logger = structlog.get_logger(__name__)

PHI_SYMMETRY_RTOL = 1e-10
MAX_EXPANSION_ORDER = 2


@dataclass(frozen=True, eq=False)
class PhiMatrix:
    """Correction operator Phi with the regularized readout kernel Gamma it was built from"""

    entries: np.ndarray
    gamma: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries, dtype=float)
        scale = max(float(np.abs(entries).max(initial=0.0)), 1e-300)
        if np.abs(entries - entries.T).max(initial=0.0) > PHI_SYMMETRY_RTOL * scale:
            raise InvalidArgumentError("Phi must be symmetric")
        object.__setattr__(self, "entries", symmetrize(entries))

    @property
    def size(self) -> int:
        return int(self.entries.shape[0])


def _check_square(name: str, matrix: np.ndarray, size: int) -> None:
    if matrix.shape != (size, size):
        raise InvalidArgumentError(f"{name} must be {size}x{size}, got {matrix.shape}")


def phi_operator(k_inf_readout: GramMatrix, gyy: GramMatrix, temp: TemperatureParams) -> PhiMatrix:
    """
    Phi = sigma_d^-2 Gamma^-1 G_yy Gamma^-1 - Gamma^-1 with Gamma = K_inf + I/(beta sigma_d^2)

    Args:
        k_inf_readout: GP kernel seen by the readout, K_inf^(d-1)
        gyy: output Gram matrix
        temp: inverse temperature and readout variance

    Returns:
        PhiMatrix; zero at beta = 0, K_inf^-1 (sigma_d^-2 G_yy - K_inf) K_inf^-1 in the limit mode
    """
    k = k_inf_readout.entries
    p = k.shape[0]
    _check_square("G_yy", gyy.entries, p)
    inv_var = 1.0 / temp.readout_variance
    if temp.is_prior:
        return PhiMatrix(np.zeros((p, p)), None)
    if temp.is_limit:
        if not is_invertible(k):
            raise NeedsFiniteTemperatureError(
                "zero-temperature limit needs an invertible readout kernel; use a large finite beta"
            )
        inverse = spd_inverse(k, name="K_inf")
        return PhiMatrix(inverse @ (inv_var * gyy.entries - k) @ inverse, k.copy())
    gamma = k + temp.ridge * np.eye(p)
    inverse = spd_inverse(gamma, name="Gamma")
    return PhiMatrix(inv_var * inverse @ gyy.entries @ inverse - inverse, gamma)


def leading_posterior_mean(
    prior_mean: np.ndarray, cov_o_k: np.ndarray, phi: PhiMatrix, n_d: int
) -> np.ndarray:
    """
    Posterior mean of a hidden-layer observable to leading order in 1/n

    <O> = <O>_prior + (n_d/2) sum_{rho lam} Phi_{rho lam} cov(O, K^(d-1)_{rho lam})

    Args:
        prior_mean: prior mean of the observable, any shape A
        cov_o_k: prior covariance with the readout kernel, shape A + (p, p)
        phi: correction operator
        n_d: output width

    Returns:
        array of shape A
    """
    prior_mean = np.asarray(prior_mean, dtype=float)
    cov_o_k = np.asarray(cov_o_k, dtype=float)
    if cov_o_k.shape != prior_mean.shape + (phi.size, phi.size):
        raise InvalidArgumentError(
            f"covariance shape {cov_o_k.shape} does not match observable {prior_mean.shape} "
            f"and Phi {phi.entries.shape}"
        )
    contraction = np.tensordot(cov_o_k, phi.entries, axes=([-2, -1], [0, 1]))
    return prior_mean + 0.5 * n_d * contraction


def _readout_scale(profile: WidthProfile, temp: TemperatureParams) -> float:
    """m_d^2 with the temperature's readout variance"""
    return profile.gp_scale(profile.depth - 1) * temp.readout_variance


def deep_linear_delta(
    gxx: GramMatrix, gyy: GramMatrix, profile: WidthProfile, temp: TemperatureParams, layer: int
) -> np.ndarray:
    """O(1/n) shift of <K^(l)> in a deep linear MLP, exactly linear in the width factor"""
    profile.check_hidden_layer(layer)
    g = gxx.entries
    _check_square("G_yy", gyy.entries, g.shape[0])
    if temp.is_prior:
        return np.zeros_like(g)
    if temp.is_limit:
        if not is_invertible(g):
            raise NeedsFiniteTemperatureError("zero-temperature limit needs an invertible G_xx")
        gamma = g
    else:
        ridge = temp.ridge / profile.gp_scale(profile.depth - 1)
        gamma = g + ridge * np.eye(g.shape[0])
    inverse = spd_inverse(gamma, name="Gamma")
    bracket = gyy.entries / _readout_scale(profile, temp) - gamma
    shape = profile.gp_scale(layer) * symmetrize(g @ inverse @ bracket @ inverse @ g)
    return float(profile.width_factor(layer)) * shape


def deep_linear_correction(
    gxx: GramMatrix, gyy: GramMatrix, profile: WidthProfile, temp: TemperatureParams, layer: int
) -> GramMatrix:
    """
    Posterior mean kernel <K^(l)> of a deep linear MLP to O(1/n)

    m_l^2 [G_xx + (sum_{l' <= l} n_d/n_l') G_xx Gamma^-1 (m_d^-2 G_yy - Gamma) Gamma^-1 G_xx]
    with Gamma = G_xx + I/(beta m_d^2).
    """
    k_inf = mlp_linear_gp(gxx, profile, layer).entries
    delta = deep_linear_delta(gxx, gyy, profile, temp, layer)
    return GramMatrix.unchecked(k_inf + delta, gxx.normalizer)


def low_temp_linear_delta(
    gxx: GramMatrix, gyy: GramMatrix, profile: WidthProfile, layer: int
) -> np.ndarray:
    profile.check_hidden_layer(layer)
    g = gxx.entries
    _check_square("G_yy", gyy.entries, g.shape[0])
    if not is_invertible(g):
        raise NeedsFiniteTemperatureError("zero-temperature limit needs an invertible G_xx")
    m_d_sq = profile.gp_scale(profile.depth)
    shape = profile.gp_scale(layer) * symmetrize(gyy.entries / m_d_sq - g)
    return float(profile.width_factor(layer)) * shape


def low_temp_linear(gxx: GramMatrix, gyy: GramMatrix, profile: WidthProfile, layer: int) -> GramMatrix:
    """Zero-temperature kernel: interpolates linearly between G_xx and G_yy/m_d^2"""
    delta = low_temp_linear_delta(gxx, gyy, profile, layer)
    return GramMatrix.unchecked(profile.gp_scale(layer) * gxx.entries + delta, gxx.normalizer)


@dataclass(frozen=True, eq=False)
class EigenbasisCorrection:
    """Correction in the eigenbasis of G_xx"""

    spectrum: Spectrum
    lambda_tilde: np.ndarray
    rotated: np.ndarray

    def rotate_back(self) -> np.ndarray:
        u = self.spectrum.eigenvectors
        return symmetrize(u @ self.rotated @ u.T)


def eigenbasis_correction(
    gxx: GramMatrix, gyy: GramMatrix, profile: WidthProfile, temp: TemperatureParams, layer: int
) -> EigenbasisCorrection:
    """
    Deep linear correction written as U^T Delta U

    In the eigenbasis of G_xx the correction reads
    m_l^2 W_l [L~ (m_d^-2 U^T G_yy U) L~ - L~ Lambda] with L~ = b Lambda / (1 + b Lambda),
    b = beta m_d^2.
    """
    profile.check_hidden_layer(layer)
    _check_square("G_yy", gyy.entries, gxx.size)
    spectrum = eigendecompose(gxx.entries)
    values = np.clip(spectrum.eigenvalues, 0.0, None)
    m_d_sq = _readout_scale(profile, temp)
    if temp.is_prior:
        tilde = np.zeros_like(values)
    elif temp.is_limit:
        if not is_invertible(gxx.entries):
            raise NeedsFiniteTemperatureError("zero-temperature limit needs an invertible G_xx")
        tilde = np.ones_like(values)
    else:
        scaled = temp.beta * m_d_sq * values
        tilde = scaled / (1.0 + scaled)
    u = spectrum.eigenvectors
    rotated_targets = u.T @ gyy.entries @ u / m_d_sq
    shape = tilde[:, None] * rotated_targets * tilde[None, :] - np.diag(tilde * values)
    rotated = float(profile.width_factor(layer)) * (profile.gp_scale(layer) * symmetrize(shape))
    return EigenbasisCorrection(spectrum, tilde, rotated)


def high_temp_expansion(
    k_inf_readout: GramMatrix, gyy: GramMatrix, temp: TemperatureParams, order: int = 2
) -> PhiMatrix:
    """
    Phi expanded in powers of t = beta sigma_d^2

    Gamma^-1 = t (I + t K)^-1 is truncated by a Neumann series, and the product entering
    sigma_d^-2 Gamma^-1 G_yy Gamma^-1 is truncated at the same power of t. Order 2 gives
    -t I + t^2 (sigma_d^-2 G_yy + K_inf).
    """
    if order < 1:
        raise InvalidArgumentError(f"order must be >= 1, got {order}")
    if order > MAX_EXPANSION_ORDER:
        raise UnsupportedOrderError(
            f"high-temperature expansion stops at order {MAX_EXPANSION_ORDER}, got {order}"
        )
    if temp.is_limit:
        raise InvalidArgumentError("the high-temperature expansion needs a finite beta")
    k = k_inf_readout.entries
    p = k.shape[0]
    _check_square("G_yy", gyy.entries, p)
    t = temp.expansion_parameter
    if t == 0.0:
        return PhiMatrix(np.zeros((p, p)), None)
    # raises DivergentSeriesError when t * ||K|| >= 1
    neumann_inverse(np.eye(p), k, t, order - 1)
    terms = [np.eye(p)]
    for _ in range(order - 1):
        terms.append(-k @ terms[-1])
    coefficients = {power + 1: (t ** (power + 1)) * term for power, term in enumerate(terms)}
    inv_var = 1.0 / temp.readout_variance
    phi = np.zeros((p, p))
    for term in coefficients.values():
        phi -= term
    for (i, left), (j, right) in itertools.product(coefficients.items(), repeat=2):
        if i + j <= order:
            phi += inv_var * left @ gyy.entries @ right
    gamma = k + temp.ridge * np.eye(p)
    return PhiMatrix(phi, gamma)


def _vectorization_contraction(k: np.ndarray, phi: np.ndarray) -> np.ndarray:
    s = k.shape[2]
    return np.einsum("mrac,rl,lncb->mnab", k, phi, k, optimize=True) / s


def _gap_contraction(k: np.ndarray, phi: np.ndarray) -> np.ndarray:
    s = k.shape[2]
    summed = k.sum(axis=3)
    return np.einsum("mra,rl,nlb->mnab", summed, phi, summed, optimize=True) / s**2


def cnn_correction(
    gxx_tensor: FourIndexKernel,
    gyy: GramMatrix,
    filters: Union[FilterSpec, Sequence[FilterSpec]],
    profile: WidthProfile,
    temp: TemperatureParams,
    layer: int,
    readout: ReadoutStrategy = ReadoutStrategy.VECTORIZATION,
    mode: str = "closed-form",
) -> FourIndexKernel:
    """
    Posterior mean four-index kernel of a deep linear CNN to O(1/n)

    Args:
        gxx_tensor: four-index input tensor
        gyy: output Gram matrix
        filters: one filter or one per hidden layer
        profile: widths and prior variances
        temp: temperature parameters
        layer: hidden layer
        readout: vectorization or global average pooling
        mode: closed-form uses the pair product of K_inf^(l) weighted by the width factor;
            propagated carries every lower layer's covariance through the shift operator

    Returns:
        FourIndexKernel K_inf^(l) + Delta (PSD not enforced)
    """
    if readout not in (ReadoutStrategy.VECTORIZATION, ReadoutStrategy.GAP):
        raise UnsupportedReadoutError(
            f"{readout.value} readout makes the correction depend on the readout vector"
        )
    if mode not in CNN_MODES:
        raise InvalidArgumentError(f"unknown CNN correction mode {mode!r}")
    delta = cnn_correction_delta(gxx_tensor, gyy, filters, profile, temp, layer, readout, mode)
    k_inf = cnn_linear_gp(gxx_tensor, filters, profile, layer).values
    return FourIndexKernel.unchecked(k_inf + delta, gxx_tensor.spatial_shape)


def cnn_correction_delta(
    gxx_tensor: FourIndexKernel,
    gyy: GramMatrix,
    filters: Union[FilterSpec, Sequence[FilterSpec]],
    profile: WidthProfile,
    temp: TemperatureParams,
    layer: int,
    readout: ReadoutStrategy = ReadoutStrategy.VECTORIZATION,
    mode: str = "closed-form",
) -> np.ndarray:
    profile.check_hidden_layer(layer)
    if readout not in (ReadoutStrategy.VECTORIZATION, ReadoutStrategy.GAP):
        raise UnsupportedReadoutError(
            f"{readout.value} readout makes the correction depend on the readout vector"
        )
    depth = profile.depth
    specs = _layer_filters(filters, depth - 1)
    k_last = cnn_linear_gp(gxx_tensor, specs, profile, depth - 1)
    phi = phi_operator(readout_kernel(k_last, readout), gyy, temp).entries
    contract = _vectorization_contraction if readout == ReadoutStrategy.VECTORIZATION else _gap_contraction
    prefactor = profile.variance_prefactor(layer, depth - 1 - layer)
    if mode == "closed-form":
        k_layer = cnn_linear_gp(gxx_tensor, specs, profile, layer).values
        shape = prefactor * contract(k_layer, phi)
        return float(profile.width_factor(layer)) * shape
    carried = np.zeros_like(gxx_tensor.values, dtype=float)
    for index in range(1, layer + 1):
        k_index = cnn_linear_gp(gxx_tensor, specs, profile, index).values
        if index > 1:
            sigma4 = profile.variance(index) ** 2
            carried = sigma4 * shift_operator(carried, specs[index - 1], gxx_tensor.spatial_shape)
        carried = carried + (2.0 / profile.width(index)) * contract(k_index, phi)
    return 0.5 * profile.output_width * prefactor * carried


def _central_moments(raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    m1, m2, m3, m4 = raw[:, 1], raw[:, 2], raw[:, 3], raw[:, 4]
    var = m2 - m1**2
    third = m3 - 3.0 * m1 * m2 + 2.0 * m1**3
    fourth = m4 - 4.0 * m1 * m3 + 6.0 * m1**2 * m2 - 3.0 * m1**4
    return m1, var, third, fourth


def _diagonal_single_layer(
    diag: np.ndarray, act: ActivationSpec, gyy: np.ndarray, temp: TemperatureParams
) -> Tuple[np.ndarray, np.ndarray]:
    """
    K_inf and sum Phi cov(K, K) for independent pre-activations

    K_inf = diag(v) + m m^T. Gamma^-1 follows from Sherman-Morrison with
    gamma_mu = 1 + beta sigma_2^2 v_mu, and the contraction needs only the central moments
    of phi(h_mu).
    """
    raw = np.array([activation_moments(v, act) for v in diag])
    mean, var, third, fourth = _central_moments(raw)
    p = len(diag)
    k_inf = np.diag(var) + np.outer(mean, mean)
    if temp.is_prior:
        return k_inf, np.zeros((p, p))
    if temp.is_limit:
        phi = phi_operator(GramMatrix.unchecked(k_inf), GramMatrix.unchecked(gyy), temp).entries
    else:
        t = temp.expansion_parameter
        gamma = 1.0 + t * var
        d_inv = t / gamma
        scaled_mean = d_inv * mean
        inverse = np.diag(d_inv) - np.outer(scaled_mean, scaled_mean) / (1.0 + mean @ scaled_mean)
        phi = inverse @ gyy @ inverse / temp.readout_variance - inverse
    phi_mean = phi @ mean
    contraction = (
        2.0 * np.outer(mean, phi_mean * var)
        + 2.0 * np.outer(phi_mean * var, mean)
        + np.outer(mean, np.diag(phi) * third)
        + np.outer(np.diag(phi) * third, mean)
        + 2.0 * phi * np.outer(var, var)
    )
    on_diagonal = (
        4.0 * mean * phi_mean * var
        + 2.0 * mean * np.diag(phi) * third
        + 2.0 * phi_mean * third
        + np.diag(phi) * (fourth - var**2)
    )
    np.fill_diagonal(contraction, on_diagonal)
    return k_inf, symmetrize(contraction)


def single_nonlinear_correction(
    gxx: GramMatrix,
    gyy: GramMatrix,
    sigma1_sq: float,
    act: ActivationSpec,
    temp: TemperatureParams,
    widths: Tuple[int, int],
    method: str = "auto",
    fast_diagonal: bool = True,
    seed: int = 0,
) -> GramMatrix:
    """
    Posterior mean post-activation kernel of a network with one nonlinear hidden layer

    Args:
        gxx: input Gram matrix
        gyy: output Gram matrix
        sigma1_sq: first-layer prior variance
        act: activation
        temp: temperature (readout variance sigma_2^2)
        widths: (n_1, n_d)
        method: four-point method handed to nonlinear_fourpoint_cov
        fast_diagonal: use the Sherman-Morrison form when G_xx is diagonal
        seed: quadrature seed for the qmc paths

    Returns:
        K_inf + (n_d / 2n_1) sum Phi (E[phi phi phi phi] - K_inf K_inf)
    """
    n_1, n_d = widths
    if n_1 < 1 or n_d < 1:
        raise InvalidArgumentError(f"widths must be positive, got {widths}")
    if sigma1_sq <= 0:
        raise InvalidArgumentError(f"sigma_1^2 must be positive, got {sigma1_sq}")
    _check_square("G_yy", gyy.entries, gxx.size)
    cov = sigma1_sq * gxx.entries
    if fast_diagonal and _is_diagonal(cov):
        k_inf, contraction = _diagonal_single_layer(np.diag(cov), act, gyy.entries, temp)
        return GramMatrix.unchecked(k_inf + (0.5 * n_d / n_1) * contraction, gxx.normalizer)
    k_inf = single_layer_gp(gxx, sigma1_sq, act, seed=seed)
    phi = phi_operator(k_inf, gyy, temp)
    fourpoint = nonlinear_fourpoint_cov(gxx, sigma1_sq, act, method=method, seed=seed) / n_1
    return GramMatrix.unchecked(leading_posterior_mean(k_inf.entries, fourpoint, phi, n_d), gxx.normalizer)


def linear_kernel_third_cumulant(gxx: GramMatrix, sigma1_sq: float, n_1: int) -> np.ndarray:
    """
    Third joint cumulant of the first-layer kernel of a linear network

    K_W(K_ab, K_cd, K_ef) = n_1^-2 sum over the eight cyclic pairings of products of
    C = sigma_1^2 G_xx.
    """
    if n_1 < 1:
        raise InvalidArgumentError(f"n_1 must be positive, got {n_1}")
    c = sigma1_sq * gxx.entries
    labels = [("a", "b"), ("c", "d"), ("e", "f")]
    total = np.zeros((gxx.size,) * 6)
    for (x, x2), (y, y2), (z, z2) in itertools.product(
        *[[pair, pair[::-1]] for pair in labels]
    ):
        spec = f"{x2}{y},{y2}{z},{z2}{x}->abcdef"
        total += np.einsum(spec, c, c, c)
    return total / n_1**2


def posterior_covariance_correction(
    cov_oo: np.ndarray,
    third_cumulant: Optional[np.ndarray],
    phi: PhiMatrix,
    n_d: int,
) -> np.ndarray:
    """
    Posterior covariance of observables to O(1/n)

    Args:
        cov_oo: prior covariance, shape A + A
        third_cumulant: K_W(O, O, K^(d-1)), shape A + A + (p, p)
        phi: correction operator
        n_d: output width

    Returns:
        cov_oo + (n_d/2) sum Phi_{mu nu} K_W(O, O, K_{mu nu})
    """
    if third_cumulant is None:
        raise InvalidArgumentError("posterior covariance needs the third joint cumulant")
    return leading_posterior_mean(cov_oo, third_cumulant, phi, n_d)


@dataclass(frozen=True, eq=False)
class SkipCorrection:
    """Monte-Carlo correction of a skip-connected linear network"""

    kernel: GramMatrix
    delta: np.ndarray
    delta_se: np.ndarray
    n_draws: int


def skip_correction_monte_carlo(
    config: NetworkConfig,
    gxx: GramMatrix,
    gyy: GramMatrix,
    temp: TemperatureParams,
    layer: int,
    n_draws: int = 100_000,
    seed: int = 0,
    block_size: Optional[int] = None,
    max_workers: int = 1,
) -> SkipCorrection:
    """
    Leading correction of a skip-connected linear MLP from sampled prior covariances

    The GP kernels come from the skip scale recurrence; cov(K^(l), K^(d-1)) is estimated by
    the prior oracle and contracted with Phi.
    """
    if config.skip is None:
        raise InvalidArgumentError("network has no skip connections")
    depth = config.depth
    config.profile.check_hidden_layer(layer)
    k_inf = skip_linear_gp(gxx, config.skip, layer).entries
    k_readout = skip_linear_gp(gxx, config.skip, depth - 1)
    phi = phi_operator(k_readout, gyy, temp)
    estimate = prior_cumulant_oracle(
        config, gxx, n_draws, seed, block_size=block_size, max_workers=max_workers
    )
    cov = estimate.covariance[(layer, depth - 1)]
    cov_se = estimate.covariance_se[(layer, depth - 1)]
    n_d = config.profile.output_width
    delta = 0.5 * n_d * np.tensordot(cov, phi.entries, axes=([-2, -1], [0, 1]))
    delta_se = 0.5 * n_d * np.sqrt(np.tensordot(cov_se**2, phi.entries**2, axes=([-2, -1], [0, 1])))
    logger.info("skip correction sampled", layer=layer, draws=estimate.n_draws)
    return SkipCorrection(
        GramMatrix.unchecked(k_inf + symmetrize(delta), gxx.normalizer),
        symmetrize(delta),
        delta_se,
        estimate.n_draws,
    )
