"""
Linear-algebra and Gaussian-moment primitives
Shared by the kernel, cumulant, correction and predictor modules
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Sequence, Tuple, Union

import numpy as np
import structlog
from scipy import linalg

from core.errors import (
    DivergentSeriesError,
    InvalidArgumentError,
    SingularMatrixError,
    UnsupportedOrderError,
)

logger = structlog.get_logger(__name__)

SYMMETRY_RTOL = 1e-12
PSD_RTOL = 1e-10
SPECTRUM_TOL = 1e-10
MAX_MOMENT_ORDER = 12
PSEUDOINVERSE_RTOL = 1e-10
CONDITION_WARNING_THRESHOLD = 1e12


def _scale(matrix: np.ndarray) -> float:
    return float(np.abs(matrix).max(initial=0.0))


def is_symmetric(matrix: np.ndarray, rtol: float = SYMMETRY_RTOL) -> bool:
    """Entrywise symmetry relative to the largest entry"""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        return False
    return bool(np.all(np.abs(matrix - matrix.T) <= rtol * max(_scale(matrix), 1e-300)))


def min_eigenvalue_ok(matrix: np.ndarray, rtol: float = PSD_RTOL) -> bool:
    """Smallest eigenvalue is at least -rtol times the Frobenius norm"""
    sym = symmetrize(matrix)
    if sym.size == 0:
        return True
    smallest = float(np.linalg.eigvalsh(sym)[0])
    return smallest >= -rtol * float(np.linalg.norm(sym))


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    return 0.5 * (matrix + matrix.T)


@dataclass(frozen=True, eq=False)
class GramMatrix:
    """Symmetric PSD p x p similarity matrix with its 1/normalizer convention"""

    entries: np.ndarray
    normalizer: int = 1
    check_psd: bool = field(default=True, repr=False)

    def __post_init__(self) -> None:
        entries = np.array(self.entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise InvalidArgumentError(f"Gram matrix must be square, got shape {entries.shape}")
        if int(self.normalizer) < 1:
            raise InvalidArgumentError(f"normalizer must be >= 1, got {self.normalizer}")
        if not is_symmetric(entries):
            raise InvalidArgumentError("Gram matrix is not symmetric within 1e-12 relative")
        if self.check_psd and not min_eigenvalue_ok(entries):
            raise InvalidArgumentError("Gram matrix is not positive semidefinite")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def size(self) -> int:
        return int(self.entries.shape[0])

    def scaled(self, factor: float) -> "GramMatrix":
        return GramMatrix(factor * self.entries, self.normalizer, self.check_psd)

    @classmethod
    def unchecked(cls, entries: np.ndarray, normalizer: int = 1) -> "GramMatrix":
        """Symmetrized matrix whose PSD property is not enforced (perturbative kernels)"""
        return cls(symmetrize(entries), normalizer, check_psd=False)


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Eigendecomposition U diag(eigenvalues) U^T with nonincreasing eigenvalues"""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T


@dataclass(frozen=True, eq=False)
class CovSpec:
    """Covariance of a zero-mean Gaussian vector"""

    covariance: np.ndarray

    def __post_init__(self) -> None:
        cov = np.array(self.covariance, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise InvalidArgumentError(f"covariance must be square, got shape {cov.shape}")
        if not is_symmetric(cov) or not min_eigenvalue_ok(cov):
            raise InvalidArgumentError("covariance must be symmetric positive semidefinite")
        object.__setattr__(self, "covariance", cov)

    @property
    def dimension(self) -> int:
        return int(self.covariance.shape[0])


def gram_from_samples(samples: np.ndarray, normalizer: int) -> GramMatrix:
    """
    Normalized inner products of sample rows

    Args:
        samples: p x n matrix, one sample per row
        normalizer: feature-count normalization (n0 for inputs, n_d for outputs)

    Returns:
        GramMatrix with entries[mu, nu] = row_mu . row_nu / normalizer
    """
    if int(normalizer) < 1:
        raise InvalidArgumentError(f"normalizer must be >= 1, got {normalizer}")
    rows = np.atleast_2d(np.asarray(samples, dtype=float))
    if rows.shape[0] < 1:
        raise InvalidArgumentError("at least one sample row is required")
    return GramMatrix(symmetrize(rows @ rows.T) / float(normalizer), int(normalizer))


def perfect_pairings(items: Sequence[int]) -> Iterator[List[Tuple[int, int]]]:
    """Yield every perfect matching of an even-length sequence of positions"""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for k, partner in enumerate(rest):
        remaining = rest[:k] + rest[k + 1:]
        for tail in perfect_pairings(remaining):
            yield [(first, partner)] + tail


def isserlis_moment(cov: Union[CovSpec, np.ndarray], indices: Sequence[int]) -> float:
    """
    Gaussian moment E[x_i1 ... x_ik] as the sum over pairings of covariance products

    Args:
        cov: covariance of the zero-mean Gaussian vector
        indices: multiset of variable indices (size at most 12)

    Returns:
        The moment; exactly 0.0 for odd multisets
    """
    matrix = cov.covariance if isinstance(cov, CovSpec) else np.asarray(cov, dtype=float)
    order = len(indices)
    if order > MAX_MOMENT_ORDER:
        raise UnsupportedOrderError(
            f"moment of order {order} exceeds the pairing cap of {MAX_MOMENT_ORDER}"
        )
    p = matrix.shape[0]
    key = tuple(sorted(int(i) for i in indices))
    if any(i < 0 or i >= p for i in key):
        raise InvalidArgumentError(f"indices must lie in 0..{p - 1}")
    if order % 2:
        return 0.0

    memo: Dict[Tuple[int, ...], float] = {}

    def expand(rest: Tuple[int, ...]) -> float:
        if not rest:
            return 1.0
        cached = memo.get(rest)
        if cached is not None:
            return cached
        first, tail = rest[0], rest[1:]
        total = 0.0
        for k, partner in enumerate(tail):
            weight = matrix[first, partner]
            if weight != 0.0:
                total += weight * expand(tail[:k] + tail[k + 1:])
        memo[rest] = total
        return total

    return float(expand(key))


def _checked_inverse(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise InvalidArgumentError(f"expected a square matrix, got shape {matrix.shape}")
    if np.linalg.cond(matrix) * np.finfo(float).eps >= 1.0:
        raise SingularMatrixError("matrix is singular to working precision")
    try:
        return linalg.inv(matrix)
    except linalg.LinAlgError as exc:
        raise SingularMatrixError(str(exc)) from exc


def neumann_inverse(base: np.ndarray, perturbation: np.ndarray, t: float, order: int) -> np.ndarray:
    """
    Truncated Neumann series for (G + tB)^-1

    Args:
        base: invertible matrix G
        perturbation: matrix B
        t: expansion parameter
        order: highest retained power of t

    Returns:
        sum_{k=0..order} (-t G^-1 B)^k G^-1
    """
    if order < 0:
        raise InvalidArgumentError(f"order must be >= 0, got {order}")
    g_inv = _checked_inverse(base)
    step = -t * (g_inv @ np.asarray(perturbation, dtype=float))
    radius = float(np.max(np.abs(np.linalg.eigvals(step)), initial=0.0))
    if radius >= 1.0:
        raise DivergentSeriesError(
            f"Neumann series diverges: spectral radius {radius:.4g} >= 1", radius
        )
    result = g_inv.copy()
    term = g_inv
    for _ in range(order):
        term = step @ term
        result = result + term
    return result


def logdet_series(a: np.ndarray, t: float, order: int) -> float:
    """Truncated series sum_{k=1..order} (-1)^(k+1) tr(A^k) t^k / k for log det(I + tA)"""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidArgumentError(f"expected a square matrix, got shape {a.shape}")
    total = 0.0
    power = np.eye(a.shape[0])
    for k in range(1, order + 1):
        power = power @ a
        total += (-1.0) ** (k + 1) * float(np.trace(power)) * t**k / k
    return total


def eigendecompose(matrix: np.ndarray) -> Spectrum:
    """Eigendecomposition of a symmetric matrix, eigenvalues in nonincreasing order"""
    matrix = np.asarray(matrix, dtype=float)
    if not np.all(np.isfinite(matrix)):
        raise InvalidArgumentError("matrix has non-finite entries")
    if not is_symmetric(matrix):
        raise InvalidArgumentError("eigendecompose requires a symmetric matrix")
    values, vectors = np.linalg.eigh(symmetrize(matrix))
    order = np.argsort(values, kind="stable")[::-1]
    return Spectrum(eigenvalues=values[order], eigenvectors=vectors[:, order])


def pseudoinverse(matrix: np.ndarray, tol: float = PSEUDOINVERSE_RTOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse dropping singular values below tol * largest"""
    if tol <= 0:
        raise InvalidArgumentError(f"tol must be positive, got {tol}")
    matrix = np.asarray(matrix, dtype=float)
    if not np.all(np.isfinite(matrix)):
        raise InvalidArgumentError("matrix has non-finite entries")
    u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(matrix.T.shape)
    keep = s > tol * s[0]
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return (vt.T * inv_s) @ u.T


def condition_number(matrix: np.ndarray) -> float:
    values = np.linalg.eigvalsh(symmetrize(matrix))
    if values[0] <= 0.0:
        return float("inf")
    return float(values[-1] / values[0])


def spd_inverse(matrix: np.ndarray, name: str = "matrix") -> np.ndarray:
    """
    Inverse of a symmetric positive definite matrix through its Cholesky factor

    Logs a warning above a condition number of 1e12 and raises SingularMatrixError
    when the factorization fails.
    """
    sym = symmetrize(matrix)
    cond = condition_number(sym)
    if cond > CONDITION_WARNING_THRESHOLD:
        logger.warning("ill-conditioned factorization", matrix=name, condition=cond)
    try:
        factor = linalg.cho_factor(sym, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularMatrixError(f"{name} is not positive definite") from exc
    return symmetrize(linalg.cho_solve(factor, np.eye(sym.shape[0])))


def is_invertible(matrix: np.ndarray, rcond: float = 1.0 / CONDITION_WARNING_THRESHOLD) -> bool:
    values = np.linalg.eigvalsh(symmetrize(matrix))
    if values.size == 0:
        return False
    return bool(values[0] > rcond * max(abs(values[-1]), 1e-300))


def psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Square root factor L with L L^T = cov for PSD input (negative eigenvalues clipped)"""
    values, vectors = np.linalg.eigh(symmetrize(cov))
    return vectors * np.sqrt(np.clip(values, 0.0, None))


def batched_psd_sqrt(covs: np.ndarray) -> np.ndarray:
    """psd_sqrt over a leading batch axis"""
    covs = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    values, vectors = np.linalg.eigh(covs)
    return vectors * np.sqrt(np.clip(values, 0.0, None))[..., None, :]
