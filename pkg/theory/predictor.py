"""
Predictor statistics of deep linear networks
Mean and covariance of test predictions to O(1/n), bias-variance decompositions,
zero-temperature consistency checks against other large-width theories
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy import optimize

from core.errors import ConvergenceFailureError, InvalidArgumentError
from core.schemas.architecture import TemperatureParams, WidthProfile

from .mathcore import GramMatrix, is_invertible, pseudoinverse, spd_inverse, symmetrize

logger = structlog.get_logger(__name__)

MARGINAL_RTOL = 1e-12
AITCHISON_DAMPING = 0.5
AITCHISON_MAX_ITERATIONS = 10_000
AITCHISON_TOLERANCE = 1e-10
ROOT_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class EvaluationSet:
    """Held-out inputs and targets with their Gram blocks against the training set"""

    x: np.ndarray
    y: np.ndarray
    gxx_cross: np.ndarray
    gxx_test: np.ndarray
    gyy_cross: np.ndarray
    gyy_test: np.ndarray

    @classmethod
    def from_data(
        cls, x_train: np.ndarray, y_train: np.ndarray, x_test: np.ndarray, y_test: np.ndarray
    ) -> "EvaluationSet":
        x_train, y_train = np.asarray(x_train, float), np.asarray(y_train, float)
        x_test, y_test = np.asarray(x_test, float), np.asarray(y_test, float)
        if x_train.shape[1] != x_test.shape[1] or y_train.shape[1] != y_test.shape[1]:
            raise InvalidArgumentError("train and test data disagree on input or output width")
        if x_test.shape[0] != y_test.shape[0]:
            raise InvalidArgumentError("test inputs and targets have different sample counts")
        n_0, n_d = x_train.shape[1], y_train.shape[1]
        return cls(
            x=x_test,
            y=y_test,
            gxx_cross=x_train @ x_test.T / n_0,
            gxx_test=symmetrize(x_test @ x_test.T / n_0),
            gyy_cross=y_train @ y_test.T / n_d,
            gyy_test=symmetrize(y_test @ y_test.T / n_d),
        )

    @classmethod
    def training(cls, x_train: np.ndarray, y_train: np.ndarray) -> "EvaluationSet":
        """The training set seen as a test set"""
        return cls.from_data(x_train, y_train, x_train, y_train)

    @property
    def size(self) -> int:
        return int(self.x.shape[0])


@dataclass(frozen=True)
class BiasVariance:
    """Thermal bias-variance split of the mean squared error on train and test sets"""

    e_b: float
    e_v: float
    e_b_test: Optional[float] = None
    e_v_test: Optional[float] = None

    @property
    def error(self) -> float:
        return self.e_b + self.e_v

    @property
    def test_error(self) -> Optional[float]:
        if self.e_b_test is None or self.e_v_test is None:
            return None
        return self.e_b_test + self.e_v_test


@dataclass(frozen=True, eq=False)
class PredictorStatistics:
    """Mean (p, n_d) and covariance (p, n_d, p, n_d) of network outputs"""

    mean: np.ndarray
    covariance: np.ndarray


class _LinearBlocks:
    """GP blocks K, R^, K^ of the last hidden layer and the powers of Gamma^-1"""

    def __init__(
        self,
        x_train: np.ndarray,
        y_train: np.ndarray,
        test: EvaluationSet,
        profile: WidthProfile,
        temp: TemperatureParams,
    ):
        x_train = np.asarray(x_train, dtype=float)
        self.y = np.asarray(y_train, dtype=float)
        if x_train.shape[0] != self.y.shape[0]:
            raise InvalidArgumentError("training inputs and targets have different sample counts")
        if test.gxx_cross.shape != (x_train.shape[0], test.size):
            raise InvalidArgumentError("test set was built against a different training set")
        if self.y.shape[1] != profile.output_width:
            raise InvalidArgumentError(
                f"targets have {self.y.shape[1]} columns, profile expects n_d = {profile.output_width}"
            )
        scale = profile.gp_scale(profile.depth - 1)
        n_0 = x_train.shape[1]
        self.p = x_train.shape[0]
        self.n_d = profile.output_width
        self.sigma_d_sq = temp.readout_variance
        self.k = scale * symmetrize(x_train @ x_train.T / n_0)
        self.r_hat = scale * test.gxx_cross
        self.k_hat = scale * test.gxx_test
        self.gyy = symmetrize(self.y @ self.y.T / self.n_d)
        self.inverse_width_sum = float(
            sum((Fraction(1, n) for n in profile.hidden_widths), Fraction(0))
        )
        self.prior = temp.is_prior
        self.ridge = 0.0 if temp.is_prior else temp.ridge
        if self.prior:
            return
        if temp.is_limit and not is_invertible(self.k):
            raise InvalidArgumentError("zero-temperature predictor needs an invertible kernel")
        self.gamma_inv = spd_inverse(self.k + self.ridge * np.eye(self.p), name="Gamma")
        self.phi = self.gamma_inv @ self.gyy @ self.gamma_inv / self.sigma_d_sq - self.gamma_inv
        self.trace = float(np.trace(self.gamma_inv @ self.k))
        self.posterior_gap = symmetrize(self.k_hat - self.r_hat.T @ self.gamma_inv @ self.r_hat)


def predictor_mean(
    x_train: np.ndarray,
    y_train: np.ndarray,
    test: EvaluationSet,
    profile: WidthProfile,
    temp: TemperatureParams,
) -> np.ndarray:
    """
    Mean test predictor of a deep linear network to O(1/n)

    <F^> = R^^T [Gamma^-1 - eps S Gamma^-1 M Gamma^-1] Y with eps = 1/(beta sigma_d^2),
    S = sum_l 1/n_l and M = Gamma^-1 K + tr(Gamma^-1 K) I - n_d Phi K.

    Returns:
        (p^, n_d) matrix
    """
    blocks = _LinearBlocks(x_train, y_train, test, profile, temp)
    if blocks.prior:
        return np.zeros((test.size, blocks.n_d))
    g_inv = blocks.gamma_inv
    m = g_inv @ blocks.k + blocks.trace * np.eye(blocks.p) - blocks.n_d * blocks.phi @ blocks.k
    correction = blocks.ridge * blocks.inverse_width_sum * g_inv @ m @ g_inv
    return blocks.r_hat.T @ (g_inv - correction) @ blocks.y


def predictor_covariance(
    x_train: np.ndarray,
    y_train: np.ndarray,
    test: EvaluationSet,
    profile: WidthProfile,
    temp: TemperatureParams,
) -> np.ndarray:
    """
    Covariance cov(F^_{mu j}, F^_{nu k}) of a deep linear network to O(1/n)

    Returns:
        (p^, n_d, p^, n_d) tensor indexed [mu, j, nu, k]
    """
    blocks = _LinearBlocks(x_train, y_train, test, profile, temp)
    n_d, sigma_sq = blocks.n_d, blocks.sigma_d_sq
    eye = np.eye(n_d)
    if blocks.prior:
        return sigma_sq * np.einsum("mn,jk->mjnk", blocks.k_hat, eye)
    g_inv, eps, y = blocks.gamma_inv, blocks.ridge, blocks.y
    g_inv2 = g_inv @ g_inv
    gap = blocks.posterior_gap
    r_g2_r = blocks.r_hat.T @ g_inv2 @ blocks.r_hat
    m_hat = (
        -blocks.trace * gap
        + eps * blocks.trace * r_g2_r
        - eps**2 * blocks.r_hat.T @ g_inv2 @ g_inv @ blocks.r_hat
        + n_d * eps**2 * blocks.r_hat.T @ g_inv @ blocks.phi @ g_inv @ blocks.r_hat
    )
    outputs = y.T @ g_inv @ blocks.k @ g_inv @ y
    cross = y.T @ g_inv2 @ blocks.r_hat
    correction = (
        np.einsum("mn,jk->mjnk", m_hat, eye)
        + np.einsum("jk,mn->mjnk", outputs, gap) / sigma_sq
        - eps * np.einsum("jk,mn->mjnk", outputs, r_g2_r) / sigma_sq
        + eps**2 * np.einsum("jn,km->mjnk", cross, cross) / sigma_sq
    )
    leading = np.einsum("mn,jk->mjnk", gap, eye)
    return sigma_sq * (leading + blocks.inverse_width_sum * correction)


def predictor_statistics(
    x_train: np.ndarray,
    y_train: np.ndarray,
    test: EvaluationSet,
    profile: WidthProfile,
    temp: TemperatureParams,
) -> PredictorStatistics:
    return PredictorStatistics(
        mean=predictor_mean(x_train, y_train, test, profile, temp),
        covariance=predictor_covariance(x_train, y_train, test, profile, temp),
    )


def _split_error(stats: PredictorStatistics, targets: np.ndarray) -> Tuple[float, float]:
    targets = np.asarray(targets, dtype=float)
    if stats.mean.shape != targets.shape:
        raise InvalidArgumentError(f"mean {stats.mean.shape} and targets {targets.shape} differ")
    e_b = 0.5 * float(np.sum((stats.mean - targets) ** 2))
    e_v = 0.5 * float(np.einsum("mjmj->", stats.covariance))
    if e_v < 0.0:
        logger.warning("truncated covariance has negative trace", e_v=e_v)
        e_v = 0.0
    return e_b, e_v


def bias_variance(
    train: PredictorStatistics,
    targets: np.ndarray,
    test: Optional[PredictorStatistics] = None,
    test_targets: Optional[np.ndarray] = None,
) -> BiasVariance:
    """E_b = 1/2 sum ||<f> - y||^2 and E_v = 1/2 sum_mu sum_k cov(f_k, f_k)"""
    e_b, e_v = _split_error(train, targets)
    if test is None:
        return BiasVariance(e_b, e_v)
    if test_targets is None:
        raise InvalidArgumentError("test statistics need test targets")
    e_b_test, e_v_test = _split_error(test, test_targets)
    return BiasVariance(e_b, e_v, e_b_test, e_v_test)


class WidthEffect(str, Enum):
    IMPROVES = "improves"
    WORSENS = "worsens"
    MARGINAL = "marginal"


def width_benefit_condition(
    gxx: GramMatrix, gyy: GramMatrix, profile: WidthProfile, p: Optional[int] = None
) -> WidthEffect:
    """
    Whether the zero-temperature test error falls with width

    Wider networks help when tr(G_xx^-1 G_yy)/p > sigma_1^2 ... sigma_d^2.
    """
    p = gxx.size if p is None else p
    if p != gxx.size or gyy.size != p:
        raise InvalidArgumentError(f"Gram matrices must be {p}x{p}")
    if not is_invertible(gxx.entries):
        raise InvalidArgumentError("width-benefit condition needs an invertible G_xx")
    lhs = float(np.trace(np.linalg.solve(gxx.entries, gyy.entries))) / p
    rhs = profile.gp_scale(profile.depth)
    if abs(lhs - rhs) <= MARGINAL_RTOL * max(abs(lhs), abs(rhs)):
        return WidthEffect.MARGINAL
    return WidthEffect.IMPROVES if lhs > rhs else WidthEffect.WORSENS


def low_temperature_test_variance(
    gxx: GramMatrix, gyy: GramMatrix, test: EvaluationSet, profile: WidthProfile
) -> float:
    """
    Zero-temperature test variance to O(1/n)

    1/2 n_d sigma_d^2 tr(D) [1 + (sum 1/n_l)(sigma_d^-2 tr(K^-1 G_yy) - p)],
    D = K^ - R^^T K^-1 R^.
    """
    if not is_invertible(gxx.entries):
        raise InvalidArgumentError("low-temperature variance needs an invertible G_xx")
    scale = profile.gp_scale(profile.depth - 1)
    k = scale * gxx.entries
    r_hat = scale * test.gxx_cross
    k_hat = scale * test.gxx_test
    k_inv = spd_inverse(k, name="K_inf")
    gap = float(np.trace(k_hat - r_hat.T @ k_inv @ r_hat))
    sigma_sq = profile.readout_variance
    inverse_widths = float(sum((Fraction(1, n) for n in profile.hidden_widths), Fraction(0)))
    bracket = float(np.trace(k_inv @ gyy.entries)) / sigma_sq - gxx.size
    return 0.5 * profile.output_width * sigma_sq * gap * (1.0 + inverse_widths * bracket)


class MeanRegime(str, Enum):
    ZERO = "zero"
    RIDGE = "ridge"
    INTERPOLANT = "interpolant"


class VarianceRegime(str, Enum):
    ZERO = "zero"
    FINITE = "finite"
    DIVERGENT = "divergent"


def omega_regime(omega: float, depth: int) -> Tuple[MeanRegime, VarianceRegime]:
    """Zero-temperature behaviour of a GP predictor when the weight decay scales as beta^omega"""
    if depth < 1:
        raise InvalidArgumentError(f"depth must be >= 1, got {depth}")
    threshold = 1.0 / depth - 1.0
    if math.isclose(omega, threshold, rel_tol=0.0, abs_tol=1e-12):
        mean = MeanRegime.RIDGE
    else:
        mean = MeanRegime.ZERO if omega > threshold else MeanRegime.INTERPOLANT
    if math.isclose(omega, -1.0, rel_tol=0.0, abs_tol=1e-12):
        variance = VarianceRegime.FINITE
    else:
        variance = VarianceRegime.ZERO if omega > -1.0 else VarianceRegime.DIVERGENT
    return mean, variance


def aitchison_first_order_coefficients(widths: Sequence[int]) -> List[Fraction]:
    """a_1 = 1, a_l = 1 + (n_l / n_{l-1}) a_{l-1} over the hidden widths"""
    coefficients: List[Fraction] = []
    for index, width in enumerate(widths):
        if width < 1:
            raise InvalidArgumentError(f"widths must be positive, got {width}")
        if index == 0:
            coefficients.append(Fraction(1))
        else:
            coefficients.append(1 + Fraction(width, widths[index - 1]) * coefficients[-1])
    return coefficients


def _recurrence_residual(kernels: List[np.ndarray], widths: Sequence[int]) -> float:
    worst = 0.0
    for layer in range(1, len(kernels) - 1):
        n_l, n_next = widths[layer - 1], widths[layer]
        inverse = np.linalg.inv(kernels[layer])
        previous = np.linalg.inv(kernels[layer - 1])
        pulled = inverse @ kernels[layer + 1] @ inverse
        residual = -(n_next - n_l) * inverse + n_next * pulled - n_l * previous
        scale = n_l * np.linalg.norm(previous) + n_next * np.linalg.norm(pulled)
        worst = max(worst, float(np.linalg.norm(residual)) / scale)
    return worst


def _layer_update(previous: np.ndarray, following: np.ndarray, n_l: int, n_next: int) -> np.ndarray:
    """Positive root K of n_l K previous^-1 K + (n_next - n_l) K = n_next following"""
    values, vectors = np.linalg.eigh(symmetrize(previous))
    root_inv = (vectors / np.sqrt(values)) @ vectors.T
    root = (vectors * np.sqrt(values)) @ vectors.T
    middle = symmetrize(root_inv @ following @ root_inv)
    mu, basis = np.linalg.eigh(middle)
    c = n_next - n_l
    z = (-c + np.sqrt(c * c + 4.0 * n_l * n_next * np.clip(mu, 0.0, None))) / (2.0 * n_l)
    return symmetrize(root @ ((basis * z) @ basis.T) @ root)


def aitchison_zero_temp_solve(
    gxx: GramMatrix,
    gyy: GramMatrix,
    widths: Sequence[int],
    damping: float = AITCHISON_DAMPING,
    max_iterations: int = AITCHISON_MAX_ITERATIONS,
    tolerance: float = AITCHISON_TOLERANCE,
) -> List[np.ndarray]:
    """
    Solve the implicit zero-temperature kernel recurrence between G_xx and G_yy

    Args:
        gxx: input Gram matrix, boundary K^(0)
        gyy: output Gram matrix, boundary K^(d)
        widths: n_1, ..., n_{d-1}, n_d
        damping: relaxation weight of each Gauss-Seidel update
        max_iterations: sweeps before giving up
        tolerance: relative residual of the recurrence

    Returns:
        kernels K^(1..d-1)
    """
    widths = [int(n) for n in widths]
    if len(widths) < 2:
        raise InvalidArgumentError("need at least one hidden width and the output width")
    if not is_invertible(gxx.entries) or not is_invertible(gyy.entries):
        raise InvalidArgumentError("the zero-temperature recurrence needs invertible G_xx and G_yy")
    g, target = gxx.entries, gyy.entries
    n_d = widths[-1]
    coefficients = aitchison_first_order_coefficients(widths[:-1])
    kernels = [g.copy()]
    for a, n in zip(coefficients, widths[:-1]):
        kernels.append(symmetrize(g + float(n_d * a / n) * (target - g)))
    kernels.append(target.copy())
    residual = _recurrence_residual(kernels, widths)
    for iteration in range(1, max_iterations + 1):
        if residual <= tolerance:
            logger.debug("zero-temperature recurrence converged", iterations=iteration - 1)
            return kernels[1:-1]
        for layer in range(1, len(kernels) - 1):
            update = _layer_update(kernels[layer - 1], kernels[layer + 1], widths[layer - 1], widths[layer])
            kernels[layer] = (1.0 - damping) * kernels[layer] + damping * update
        residual = _recurrence_residual(kernels, widths)
    if residual <= tolerance:
        return kernels[1:-1]
    raise ConvergenceFailureError(
        f"zero-temperature recurrence stalled at residual {residual:.3g}", residual, max_iterations
    )


@dataclass(frozen=True, eq=False)
class LiSompolinskyKernel:
    """Small-load kernel prediction with its per-mode roots"""

    kernel: GramMatrix
    roots: np.ndarray
    omegas: np.ndarray
    modes: np.ndarray
    m_diagonal: np.ndarray


def _solve_root(omega: float, alpha: float, sigma_sq: float, depth: int) -> float:
    coupling = alpha * sigma_sq ** (-(depth - 1)) * omega

    def residual(z: float) -> float:
        return z - coupling * z ** (-(depth - 1)) - (1.0 - alpha)

    def slope(z: float) -> float:
        return 1.0 + (depth - 1) * coupling * z ** (-depth)

    low, high = 1e-6, 1.0 + alpha * sigma_sq ** (-(depth - 1)) * max(omega, 0.0) + 1.0
    if residual(low) * residual(high) > 0:
        raise ConvergenceFailureError(
            f"no bracketed root for omega={omega:.4g}, alpha={alpha:.4g}", abs(residual(low)), 0
        )
    z = optimize.bisect(residual, low, high, xtol=1e-14, maxiter=200)
    try:
        z = optimize.newton(residual, z, fprime=slope, tol=1e-15, maxiter=50)
    except RuntimeError:
        logger.debug("newton polish did not converge", omega=omega)
    if abs(residual(z)) > ROOT_TOLERANCE:
        raise ConvergenceFailureError("root polish missed the tolerance", abs(residual(z)), 50)
    return float(z)


def li_sompolinsky_limit(
    gxx: GramMatrix,
    y: np.ndarray,
    sigma_sq: float,
    depth: int,
    alpha: float,
    width: int,
    layer: int,
) -> LiSompolinskyKernel:
    """
    Zero-temperature kernel of an equal-width deep linear network at small load alpha = p/n

    sigma^{2l} [(1 - n_d/n)^l G_xx + n^-1 sigma^{-2d} Y V M_l V^T Y^T] where V, omega_k
    diagonalize R = Y^T G_xx^+ Y / (sigma^2 p) and z_k solves
    1 - alpha = z - alpha sigma^{-2(d-1)} z^{-(d-1)} omega_k.
    """
    y = np.asarray(y, dtype=float)
    p, n_d = y.shape
    if gxx.size != p:
        raise InvalidArgumentError("targets and G_xx disagree on the number of samples")
    if alpha <= 0 or sigma_sq <= 0 or width < 1 or depth < 2:
        raise InvalidArgumentError("need alpha > 0, sigma^2 > 0, width >= 1, depth >= 2")
    if not 1 <= layer <= depth - 1:
        raise InvalidArgumentError(f"layer {layer} outside 1..{depth - 1}")
    load = symmetrize(y.T @ pseudoinverse(gxx.entries) @ y / (sigma_sq * p))
    omegas, modes = np.linalg.eigh(load)
    roots = np.array([_solve_root(float(w), alpha, sigma_sq, depth) for w in omegas])
    m_diag = np.empty_like(roots)
    for k, z in enumerate(roots):
        series = float(layer) if z == 1.0 else (z**layer - 1.0) / (z - 1.0)
        m_diag[k] = z ** (-(depth - 1)) * series
    projected = y @ modes
    feature = (projected * m_diag) @ projected.T
    kernel = sigma_sq**layer * (
        (1.0 - n_d / width) ** layer * gxx.entries + feature / (width * sigma_sq**depth)
    )
    return LiSompolinskyKernel(GramMatrix.unchecked(kernel, gxx.normalizer), roots, omegas, modes, m_diag)
