"""
Infinite-width (GP) kernels
Deep linear MLPs and CNNs, single nonlinear layers and skip-connected linear networks
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from scipy.special import ndtri
from scipy.stats import qmc

from core.errors import InvalidArgumentError
from core.schemas.architecture import (
    ActivationSpec,
    FilterSpec,
    ReadoutStrategy,
    SkipConnectivity,
    WidthProfile,
)

from .mathcore import GramMatrix, isserlis_moment, symmetrize

logger = structlog.get_logger(__name__)

FOUR_INDEX_PSD_RTOL = 1e-8
QMC_POINTS = 2**18
QMC_REPLICATES = 16


@dataclass(frozen=True, eq=False)
class FourIndexKernel:
    """CNN kernel K[mu, nu, a, b] over p samples and s circular spatial sites"""

    values: np.ndarray
    spatial_shape: Tuple[int, ...]
    check_psd: bool = field(default=True, repr=False)

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        shape = tuple(int(e) for e in self.spatial_shape)
        s = int(np.prod(shape)) if shape else 1
        if values.ndim != 4 or values.shape[0] != values.shape[1] or values.shape[2:] != (s, s):
            raise InvalidArgumentError(
                f"four-index kernel must have shape (p, p, {s}, {s}), got {values.shape}"
            )
        scale = max(float(np.abs(values).max(initial=0.0)), 1e-300)
        if np.abs(values - values.transpose(1, 0, 3, 2)).max(initial=0.0) > 1e-12 * scale:
            raise InvalidArgumentError("four-index kernel violates exchange symmetry")
        if self.check_psd:
            flat = _flatten(values)
            smallest = float(np.linalg.eigvalsh(symmetrize(flat))[0]) if flat.size else 0.0
            if smallest < -FOUR_INDEX_PSD_RTOL * float(np.linalg.norm(flat)):
                raise InvalidArgumentError("four-index kernel flattening is not PSD")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spatial_shape", shape)

    @property
    def p(self) -> int:
        return int(self.values.shape[0])

    @property
    def s(self) -> int:
        return int(self.values.shape[2])

    def flat(self) -> np.ndarray:
        """(p*s) x (p*s) matrix indexed by (mu, a), (nu, b)"""
        return _flatten(self.values)

    def block(self, a: int, b: int) -> np.ndarray:
        return self.values[:, :, a, b]

    @classmethod
    def from_flat(cls, flat: np.ndarray, p: int, spatial_shape: Sequence[int]) -> "FourIndexKernel":
        s = int(np.prod(spatial_shape))
        values = np.asarray(flat, dtype=float).reshape(p, s, p, s).transpose(0, 2, 1, 3)
        return cls(values, tuple(spatial_shape))

    @classmethod
    def unchecked(cls, values: np.ndarray, spatial_shape: Sequence[int]) -> "FourIndexKernel":
        sym = 0.5 * (values + np.asarray(values).transpose(1, 0, 3, 2))
        return cls(sym, tuple(spatial_shape), check_psd=False)


def _flatten(values: np.ndarray) -> np.ndarray:
    p, _, s, _ = values.shape
    return values.transpose(0, 2, 1, 3).reshape(p * s, p * s)


def shift_index(spatial_shape: Sequence[int], offsets: np.ndarray) -> np.ndarray:
    """
    Circular shift table over row-major spatial sites

    Args:
        spatial_shape: per-axis extents
        offsets: (B, ndim) receptive-field offsets

    Returns:
        (B, s) integer array with entry [b, a] = flat index of site a + offset_b (mod per axis)
    """
    shape = tuple(int(e) for e in spatial_shape)
    offsets = np.atleast_2d(np.asarray(offsets, dtype=int))
    if offsets.shape[1] != len(shape):
        raise InvalidArgumentError(
            f"offsets have {offsets.shape[1]} axes, spatial shape has {len(shape)}"
        )
    coords = np.stack(np.unravel_index(np.arange(int(np.prod(shape))), shape), axis=1)
    table = []
    for offset in offsets:
        moved = np.mod(coords + offset, shape)
        table.append(np.ravel_multi_index(tuple(moved.T), shape))
    return np.asarray(table, dtype=np.intp)


def shift_operator(values: np.ndarray, spec: FilterSpec, spatial_shape: Sequence[int]) -> np.ndarray:
    """T(X)[..., a, b] = sum_c v_c X[..., a+c, b+c] over the last two (spatial) axes"""
    if not spec.fits(list(spatial_shape)):
        raise InvalidArgumentError("filter receptive field does not fit the spatial shape")
    table = shift_index(spatial_shape, spec.offsets)
    out = np.zeros_like(values, dtype=float)
    for weight, index in zip(spec.weight_array, table):
        out += weight * values[..., index[:, None], index[None, :]]
    return out


def _layer_filters(filters: Union[FilterSpec, Sequence[FilterSpec]], layers: int) -> List[FilterSpec]:
    if isinstance(filters, FilterSpec):
        return [filters] * layers
    filters = list(filters)
    if len(filters) == 1:
        return filters * layers
    if len(filters) < layers:
        raise InvalidArgumentError(f"need a filter for each of {layers} layers, got {len(filters)}")
    return filters[:layers]


def mlp_linear_gp(gxx: GramMatrix, profile: WidthProfile, layer: int) -> GramMatrix:
    """K_inf at hidden layer `layer` of a deep linear MLP: m_layer^2 G_xx"""
    profile.check_hidden_layer(layer)
    return GramMatrix(profile.gp_scale(layer) * gxx.entries, gxx.normalizer)


def cnn_linear_gp(
    gxx_tensor: FourIndexKernel,
    filters: Union[FilterSpec, Sequence[FilterSpec]],
    profile: WidthProfile,
    layer: int,
) -> FourIndexKernel:
    """
    Four-index GP kernel of a deep linear CNN with circular padding

    Args:
        gxx_tensor: layer-0 input tensor [G_xx]_{mu nu, a b}
        filters: one filter for every layer or one per layer
        profile: widths and prior variances
        layer: hidden layer (1..d-1)

    Returns:
        K_inf^(layer) obtained by applying sigma_l^2 T_v layer by layer
    """
    profile.check_hidden_layer(layer)
    values = np.asarray(gxx_tensor.values, dtype=float)
    for index, spec in enumerate(_layer_filters(filters, layer), start=1):
        values = profile.variance(index) * shift_operator(values, spec, gxx_tensor.spatial_shape)
    return FourIndexKernel(values, gxx_tensor.spatial_shape)


def readout_kernel(
    k4: FourIndexKernel,
    strategy: ReadoutStrategy = ReadoutStrategy.VECTORIZATION,
    u: Optional[Sequence[float]] = None,
) -> GramMatrix:
    """Two-index kernel seen by the linear readout after contracting space"""
    if strategy == ReadoutStrategy.VECTORIZATION:
        entries = np.einsum("mnaa->mn", k4.values) / k4.s
    else:
        if strategy == ReadoutStrategy.GAP:
            weights = np.full(k4.s, 1.0 / k4.s)
        else:
            if u is None:
                raise InvalidArgumentError("projection readout requires a vector u")
            weights = np.asarray(u, dtype=float)
        if weights.shape != (k4.s,):
            raise InvalidArgumentError(f"projection vector must have {k4.s} entries")
        entries = np.einsum("a,mnab,b->mn", weights, k4.values, weights)
    return GramMatrix(symmetrize(entries), check_psd=k4.check_psd)


def _polynomial_kernel(cov: np.ndarray, coeffs: List[float]) -> np.ndarray:
    p = cov.shape[0]
    terms = [(k, c) for k, c in enumerate(coeffs) if c != 0.0]
    out = np.zeros((p, p))
    for mu in range(p):
        for nu in range(mu, p):
            sub = cov[np.ix_([mu, nu], [mu, nu])]
            total = 0.0
            for j, a in terms:
                for k, b in terms:
                    total += a * b * isserlis_moment(sub, [0] * j + [1] * k)
            out[mu, nu] = out[nu, mu] = total
    return out


def _sobol_normals(seed: int, replicate: int, m: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replicate,)))
    points = qmc.Sobol(d=dim, scramble=True, seed=rng).random_base2(m)
    return ndtri(np.clip(points, 1e-16, 1.0 - 1e-16))


def gaussian_pair_expectation(
    cov: np.ndarray,
    act: ActivationSpec,
    n_points: int = QMC_POINTS,
    replicates: int = QMC_REPLICATES,
    seed: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    E[phi(h_mu) phi(h_nu)] for h ~ N(0, cov) by scrambled Sobol quadrature

    Returns:
        (mean, standard error) p x p arrays; the error is the spread of independent
        scramblings
    """
    cov = symmetrize(cov)
    p = cov.shape[0]
    per_rep = max(int(n_points) // int(replicates), 2)
    m = int(np.ceil(np.log2(per_rep)))
    diag = np.clip(np.diag(cov), 0.0, None)
    root = np.sqrt(diag)
    safe = np.where(root > 0, root, 1.0)
    estimates = np.empty((replicates, p, p))
    for rep in range(replicates):
        z = _sobol_normals(seed, rep, m, 2)
        z1, z2 = z[:, 0], z[:, 1]
        for mu in range(p):
            h_mu = root[mu] * z1
            slope = np.where(root[mu] > 0, cov[mu] / safe[mu], 0.0)
            resid = np.sqrt(np.clip(diag - slope**2, 0.0, None))
            h_nu = z1[:, None] * slope[None, :] + z2[:, None] * resid[None, :]
            h_nu[:, mu] = h_mu
            estimates[rep, mu] = np.mean(act(h_mu)[:, None] * act(h_nu), axis=0)
    estimates = 0.5 * (estimates + estimates.transpose(0, 2, 1))
    mean = estimates.mean(axis=0)
    se = estimates.std(axis=0, ddof=1) / np.sqrt(replicates)
    if act.is_odd:
        # uncorrelated centred pre-activations are independent, and odd features have zero mean
        independent = cov == 0.0
        mean[independent] = 0.0
        se[independent] = 0.0
    return mean, se


def single_layer_gp_estimate(
    gxx: GramMatrix,
    sigma1_sq: float,
    act: ActivationSpec,
    n_points: int = QMC_POINTS,
    seed: int = 0,
) -> Tuple[GramMatrix, np.ndarray]:
    """K_inf = E[phi(h) phi(h)^T], h ~ N(0, sigma_1^2 G_xx), with its standard error"""
    if sigma1_sq <= 0:
        raise InvalidArgumentError(f"sigma_1^2 must be positive, got {sigma1_sq}")
    cov = sigma1_sq * gxx.entries
    if act.is_polynomial:
        coeffs = act.polynomial_coefficients()
        if coeffs == [0.0, 1.0]:
            entries = cov.copy()
        else:
            entries = _polynomial_kernel(cov, coeffs)
        return GramMatrix(entries, gxx.normalizer), np.zeros_like(entries)
    mean, se = gaussian_pair_expectation(cov, act, n_points=n_points, seed=seed)
    logger.debug("qmc kernel evaluated", activation=act.kind.value, max_se=float(se.max()))
    return GramMatrix.unchecked(mean, gxx.normalizer), se


def single_layer_gp(
    gxx: GramMatrix,
    sigma1_sq: float,
    act: ActivationSpec,
    n_points: int = QMC_POINTS,
    seed: int = 0,
) -> GramMatrix:
    return single_layer_gp_estimate(gxx, sigma1_sq, act, n_points, seed)[0]


def mlp_nonlinear_gp(
    gxx: GramMatrix,
    profile: WidthProfile,
    act: ActivationSpec,
    layer: int,
    n_points: int = QMC_POINTS,
    seed: int = 0,
) -> GramMatrix:
    """Deep nonlinear GP kernel, iterating single_layer_gp through the hidden layers"""
    profile.check_hidden_layer(layer)
    kernel = gxx
    for index in range(1, layer + 1):
        kernel = single_layer_gp(kernel, profile.variance(index), act, n_points, seed + index)
    return kernel


def skip_gp_scale(conn: SkipConnectivity, layer: int, tau: int) -> float:
    """
    GP scale m_{layer,tau}^2 of a skip-connected linear network

    m_{l,0}^2 = sigma_{l,0}^2 and m_{l,t}^2 = m_{l,t-1}^2 + m_{t,t-1}^2 sigma_{l,t}^2; the GP
    kernel of layer l is m_{l,l-1}^2 G_xx.
    """
    if not 0 <= tau < layer <= conn.depth:
        raise InvalidArgumentError(f"need 0 <= tau < layer <= {conn.depth}, got {tau}, {layer}")
    conn.check_connected()

    @lru_cache(maxsize=None)
    def scale(target: int, through: int) -> float:
        if through == 0:
            return conn.variance(target, 0)
        return scale(target, through - 1) + scale(through, through - 1) * conn.variance(
            target, through
        )

    return float(scale(layer, tau))


def skip_linear_gp(gxx: GramMatrix, conn: SkipConnectivity, layer: int) -> GramMatrix:
    return GramMatrix(skip_gp_scale(conn, layer, layer - 1) * gxx.entries, gxx.normalizer)


def gp_scales(conn: SkipConnectivity) -> Dict[int, float]:
    """m_{l,l-1}^2 for every layer 1..d"""
    return {layer: skip_gp_scale(conn, layer, layer - 1) for layer in range(1, conn.depth + 1)}
