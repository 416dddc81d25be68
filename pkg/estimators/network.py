"""
Finite networks with a linear readout
Forward pass with per-layer kernels, the squared-error energy and its exact gradient
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import structlog

from core.errors import InvalidArgumentError
from core.schemas.architecture import NetworkConfig, ReadoutStrategy
from theory.gpkernels import shift_index

logger = structlog.get_logger(__name__)

Edge = Tuple[int, int]


def network_edges(config: NetworkConfig) -> List[Edge]:
    """(target, source) pairs carrying weights, readout last"""
    if config.skip is not None:
        return sorted(
            ((e.target, e.source) for e in config.skip.edges if e.variance > 0),
            key=lambda edge: (edge[0], edge[1]),
        )
    return [(layer, layer - 1) for layer in range(1, config.depth + 1)]


def input_width(config: NetworkConfig, x: np.ndarray) -> int:
    x = np.asarray(x)
    if config.architecture.is_convolutional:
        if x.ndim != 3 or x.shape[2] != config.spatial_size:
            raise InvalidArgumentError(
                f"CNN inputs must be (p, channels, {config.spatial_size}), got {x.shape}"
            )
    elif x.ndim != 2:
        raise InvalidArgumentError(f"MLP inputs must be (p, n_0), got {x.shape}")
    return int(x.shape[1])


def _layer_width(config: NetworkConfig, layer: int, n_0: int) -> int:
    return n_0 if layer == 0 else config.profile.width(layer)


def edge_shape(config: NetworkConfig, edge: Edge, n_0: int) -> Tuple[int, ...]:
    target, source = edge
    rows, cols = _layer_width(config, target, n_0), _layer_width(config, source, n_0)
    if not config.architecture.is_convolutional:
        return (rows, cols)
    if target == config.depth:
        if config.readout == ReadoutStrategy.VECTORIZATION:
            return (rows, cols, config.spatial_size)
        return (rows, cols)
    return (rows, cols, len(config.filter_for(target).weights))


def edge_prior_variance(config: NetworkConfig, edge: Edge) -> np.ndarray:
    """Prior variance of every weight on an edge, broadcastable to its shape"""
    target, source = edge
    if config.skip is not None:
        return np.asarray(config.skip.variance(target, source))
    variance = config.profile.variance(target)
    if config.architecture.is_convolutional and target < config.depth:
        return variance * config.filter_for(target).weight_array[None, None, :]
    return np.asarray(variance)


@dataclass
class NetworkParameters:
    """Weights keyed by (target, source) edge"""

    weights: Dict[Edge, np.ndarray]

    def __iter__(self) -> Iterator[Edge]:
        return iter(self.weights)

    def copy(self) -> "NetworkParameters":
        return NetworkParameters({edge: w.copy() for edge, w in self.weights.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights.values()])

    def with_flat(self, vector: np.ndarray) -> "NetworkParameters":
        out: Dict[Edge, np.ndarray] = {}
        offset = 0
        for edge, w in self.weights.items():
            out[edge] = np.asarray(vector[offset : offset + w.size], dtype=float).reshape(w.shape)
            offset += w.size
        if offset != vector.size:
            raise InvalidArgumentError(f"expected {offset} parameters, got {vector.size}")
        return NetworkParameters(out)

    @property
    def size(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    def max_abs(self) -> float:
        return float(max(np.abs(w).max(initial=0.0) for w in self.weights.values()))


def init_parameters(
    config: NetworkConfig, n_0: int, rng: np.random.Generator, scale: float = 1.0
) -> NetworkParameters:
    """Draw every weight from the prior (scale multiplies the standard deviation)"""
    weights: Dict[Edge, np.ndarray] = {}
    for edge in network_edges(config):
        shape = edge_shape(config, edge, n_0)
        std = np.sqrt(edge_prior_variance(config, edge))
        weights[edge] = scale * std * rng.standard_normal(shape)
    return NetworkParameters(weights)


def zeros_like_parameters(config: NetworkConfig, n_0: int) -> NetworkParameters:
    return NetworkParameters(
        {edge: np.zeros(edge_shape(config, edge, n_0)) for edge in network_edges(config)}
    )


@dataclass
class ForwardPass:
    """Pre-activations, post-activations, kernels and outputs of one forward pass"""

    pre: Dict[int, np.ndarray]
    post: Dict[int, np.ndarray]
    kernels: Dict[int, np.ndarray]
    output: np.ndarray
    shifted: Dict[Edge, np.ndarray] = field(default_factory=dict, repr=False)


def shift_tables(config: NetworkConfig) -> Dict[int, np.ndarray]:
    if not config.architecture.is_convolutional:
        return {}
    return {
        layer: shift_index(config.spatial_shape or [], config.filter_for(layer).offsets)
        for layer in range(1, config.depth)
    }


def _kernel(config: NetworkConfig, features: np.ndarray) -> np.ndarray:
    width = features.shape[1]
    if config.architecture.is_convolutional:
        return np.einsum("mia,nib->mnab", features, features, optimize=True) / width
    return features @ features.T / width


def forward(
    config: NetworkConfig,
    params: NetworkParameters,
    x: np.ndarray,
    tables: Optional[Dict[int, np.ndarray]] = None,
) -> ForwardPass:
    """
    Propagate inputs through the network

    Args:
        config: architecture
        params: weights per edge
        x: (p, n_0) inputs, or (p, channels, s) for CNNs
        tables: precomputed circular shift tables per layer

    Returns:
        ForwardPass whose kernels are (1/n_l)-normalized inner products of post-activations,
        four-index for CNNs
    """
    x = np.asarray(x, dtype=float)
    n_0 = input_width(config, x)
    for edge in network_edges(config):
        weights = params.weights.get(edge)
        if weights is None or weights.shape != edge_shape(config, edge, n_0):
            raise InvalidArgumentError(f"parameters for edge {edge} missing or misshapen")
    tables = tables if tables is not None else shift_tables(config)
    act = config.hidden_activation()
    conv = config.architecture.is_convolutional
    post: Dict[int, np.ndarray] = {0: x}
    pre: Dict[int, np.ndarray] = {}
    kernels: Dict[int, np.ndarray] = {}
    shifted: Dict[Edge, np.ndarray] = {}
    edges = network_edges(config)
    depth = config.depth
    for layer in range(1, depth):
        total = None
        for edge in (e for e in edges if e[0] == layer):
            source = edge[1]
            w = params.weights[edge]
            norm = np.sqrt(post[source].shape[1])
            if conv:
                gathered = post[source][:, :, tables[layer]]
                shifted[edge] = gathered
                term = np.einsum("ijb,mjba->mia", w, gathered, optimize=True) / norm
            else:
                term = post[source] @ w.T / norm
            total = term if total is None else total + term
        assert total is not None
        pre[layer] = total
        post[layer] = act(total)
        kernels[layer] = _kernel(config, post[layer])
    last = post[depth - 1]
    w_out = params.weights[(depth, depth - 1)]
    output = _readout(config, w_out, last)
    return ForwardPass(pre, post, kernels, output, shifted)


def _readout(config: NetworkConfig, w: np.ndarray, features: np.ndarray) -> np.ndarray:
    width = features.shape[1]
    if not config.architecture.is_convolutional:
        return features @ w.T / np.sqrt(width)
    if config.readout == ReadoutStrategy.VECTORIZATION:
        s = features.shape[2]
        return np.einsum("kia,mia->mk", w, features, optimize=True) / np.sqrt(width * s)
    pooled = features @ config.readout_weights()
    return pooled @ w.T / np.sqrt(width)


def energy(config: NetworkConfig, params: NetworkParameters, x: np.ndarray, y: np.ndarray) -> float:
    """E = 1/2 sum_mu ||f(x_mu) - y_mu||^2"""
    out = forward(config, params, x).output
    return 0.5 * float(np.sum((out - np.asarray(y, dtype=float)) ** 2))


def grad_energy(
    config: NetworkConfig,
    params: NetworkParameters,
    x: np.ndarray,
    y: np.ndarray,
    tables: Optional[Dict[int, np.ndarray]] = None,
) -> Tuple[NetworkParameters, float, ForwardPass]:
    """
    Reverse-mode gradient of the squared-error energy

    Returns:
        (gradient per edge, energy, forward pass)
    """
    tables = tables if tables is not None else shift_tables(config)
    state = forward(config, params, x, tables)
    y = np.asarray(y, dtype=float)
    if y.shape != state.output.shape:
        raise InvalidArgumentError(f"targets {y.shape} do not match outputs {state.output.shape}")
    residual = state.output - y
    depth = config.depth
    conv = config.architecture.is_convolutional
    act = config.hidden_activation()
    grads: Dict[Edge, np.ndarray] = {}
    d_post: Dict[int, np.ndarray] = {}

    last = state.post[depth - 1]
    w_out = params.weights[(depth, depth - 1)]
    width = last.shape[1]
    if not conv:
        grads[(depth, depth - 1)] = residual.T @ last / np.sqrt(width)
        d_post[depth - 1] = residual @ w_out / np.sqrt(width)
    elif config.readout == ReadoutStrategy.VECTORIZATION:
        norm = np.sqrt(width * last.shape[2])
        grads[(depth, depth - 1)] = np.einsum("mk,mia->kia", residual, last, optimize=True) / norm
        d_post[depth - 1] = np.einsum("mk,kia->mia", residual, w_out, optimize=True) / norm
    else:
        u = config.readout_weights()
        pooled = last @ u
        grads[(depth, depth - 1)] = residual.T @ pooled / np.sqrt(width)
        d_pooled = residual @ w_out / np.sqrt(width)
        d_post[depth - 1] = d_pooled[:, :, None] * u[None, None, :]

    edges = network_edges(config)
    for layer in range(depth - 1, 0, -1):
        d_pre = d_post.pop(layer) * act.derivative(state.pre[layer])
        for edge in (e for e in edges if e[0] == layer):
            source = edge[1]
            w = params.weights[edge]
            features = state.post[source]
            norm = np.sqrt(features.shape[1])
            if conv:
                gathered = state.shifted[edge]
                grads[edge] = np.einsum("mia,mjba->ijb", d_pre, gathered, optimize=True) / norm
                if source > 0:
                    d_gathered = np.einsum("ijb,mia->mjba", w, d_pre, optimize=True) / norm
                    d_features = np.zeros_like(features)
                    for b, index in enumerate(tables[layer]):
                        d_features[:, :, index] += d_gathered[:, :, b, :]
                    d_post[source] = d_post.get(source, 0.0) + d_features
            else:
                grads[edge] = d_pre.T @ features / norm
                if source > 0:
                    d_post[source] = d_post.get(source, 0.0) + d_pre @ w / norm
    ordered = {edge: grads[edge] for edge in params.weights}
    return NetworkParameters(ordered), 0.5 * float(np.sum(residual**2)), state


@dataclass(frozen=True)
class GradientCheck:
    max_relative_error: float
    coordinates: int


def check_gradient(
    config: NetworkConfig,
    params: NetworkParameters,
    x: np.ndarray,
    y: np.ndarray,
    n_coords: int = 100,
    h: float = 1e-5,
    seed: int = 0,
    atol: float = 1e-8,
) -> GradientCheck:
    """Compare reverse-mode gradients with central differences on random coordinates"""
    grad, _, _ = grad_energy(config, params, x, y)
    analytic = grad.flat()
    base = params.flat()
    rng = np.random.default_rng(seed)
    coords = rng.choice(base.size, size=min(n_coords, base.size), replace=False)
    worst = 0.0
    for index in coords:
        plus, minus = base.copy(), base.copy()
        plus[index] += h
        minus[index] -= h
        upper = energy(config, params.with_flat(plus), x, y)
        lower = energy(config, params.with_flat(minus), x, y)
        numeric = (upper - lower) / (2.0 * h)
        scale = max(abs(numeric), abs(analytic[index]), atol)
        worst = max(worst, abs(numeric - analytic[index]) / scale)
    logger.debug("gradient checked", coordinates=len(coords), max_relative_error=worst)
    return GradientCheck(worst, len(coords))
