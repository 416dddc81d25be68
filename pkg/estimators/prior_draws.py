"""
Blocked prior sampler over hidden-layer kernels
Draws K^(1..d-1) directly in kernel space and reduces moments block by block
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import structlog

from core.errors import InvalidArgumentError
from core.schemas.architecture import Architecture, NetworkConfig
from theory.gpkernels import FourIndexKernel, shift_operator
from theory.mathcore import GramMatrix, batched_psd_sqrt, psd_sqrt, symmetrize

logger = structlog.get_logger(__name__)

T = TypeVar("T")


def block_generator(seed: int, stream: int, block: int) -> np.random.Generator:
    """Philox stream keyed by (seed, stream, block)"""
    sequence = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(block)))
    return np.random.Generator(np.random.Philox(sequence))


def block_sizes(n_draws: int, block: int) -> List[int]:
    if n_draws < 1 or block < 1:
        raise InvalidArgumentError("n_draws and block size must be positive")
    full, rest = divmod(n_draws, block)
    return [block] * full + ([rest] if rest else [])


def map_blocks(
    fn: Callable[[int, int], T], n_draws: int, block: int, max_workers: int = 1
) -> List[T]:
    """
    Run fn(block_index, block_size) over all blocks

    Results come back in block order whatever the number of worker lanes.
    """
    sizes = block_sizes(n_draws, block)
    if max_workers <= 1 or len(sizes) == 1:
        return [fn(index, size) for index, size in enumerate(sizes)]
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        return list(executor.map(fn, range(len(sizes)), sizes))


@dataclass(frozen=True, eq=False)
class InputKernel:
    """Layer-0 kernel flattened over (sample, site) pairs"""

    flat: np.ndarray
    p: int
    spatial_shape: Tuple[int, ...] = ()

    @classmethod
    def from_gram(cls, gxx: Union[GramMatrix, FourIndexKernel]) -> "InputKernel":
        if isinstance(gxx, FourIndexKernel):
            return cls(gxx.flat(), gxx.p, tuple(gxx.spatial_shape))
        return cls(np.asarray(gxx.entries, dtype=float), gxx.size, ())

    @property
    def s(self) -> int:
        return int(np.prod(self.spatial_shape)) if self.spatial_shape else 1

    @property
    def dimension(self) -> int:
        return self.p * self.s

    def four_index(self, flat: np.ndarray) -> np.ndarray:
        """(..., D, D) -> (..., p, p, s, s)"""
        lead = flat.shape[:-2]
        split = flat.reshape(lead + (self.p, self.s, self.p, self.s))
        return np.moveaxis(split, -3, -2)

    def flatten(self, values: np.ndarray) -> np.ndarray:
        """(..., p, p, s, s) -> (..., D, D)"""
        lead = values.shape[:-4]
        return np.moveaxis(values, -2, -3).reshape(lead + (self.dimension, self.dimension))


def wishart_kernels(rng: np.random.Generator, roots: np.ndarray, width: int, size: int) -> np.ndarray:
    """
    (1/n) L A A^T L^T for a batch of roots L, i.e. samples of W(n, L L^T)/n

    Bartlett factors are used when the width is at least the dimension, explicit Gaussian
    columns otherwise.
    """
    dim = roots.shape[-1]
    if width >= dim:
        factor = np.zeros((size, dim, dim))
        rows, cols = np.tril_indices(dim, k=-1)
        factor[:, rows, cols] = rng.standard_normal((size, rows.size))
        diag = np.sqrt(rng.chisquare(width - np.arange(dim), size=(size, dim)))
        factor[:, np.arange(dim), np.arange(dim)] = diag
    else:
        factor = rng.standard_normal((size, dim, width))
    spread = np.matmul(roots, factor)
    kernels = np.matmul(spread, np.swapaxes(spread, -1, -2)) / width
    return symmetrize(kernels)


def _feature_kernels(
    rng: np.random.Generator, roots: np.ndarray, width: int, size: int, activation
) -> np.ndarray:
    dim = roots.shape[-1]
    noise = rng.standard_normal((size, width, dim))
    pre = np.matmul(noise, np.swapaxes(np.broadcast_to(roots, (size, dim, dim)), -1, -2))
    post = activation(pre)
    return symmetrize(np.matmul(np.swapaxes(post, -1, -2), post) / width)


def _roots(cov: np.ndarray) -> np.ndarray:
    if cov.ndim == 2:
        return psd_sqrt(cov)
    return batched_psd_sqrt(cov)


def draw_prior_kernels(
    config: NetworkConfig,
    inputs: InputKernel,
    size: int,
    seed: int,
    stream: int = 0,
    block: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> List[np.ndarray]:
    """
    Draw every hidden-layer kernel of `size` networks from the prior

    Args:
        config: network architecture
        inputs: flattened layer-0 kernel
        size: number of networks
        seed: base seed
        stream: stream id separating estimators sharing a seed
        block: block index inside the stream
        rng: explicit generator overriding (seed, stream, block)

    Returns:
        One (size, D, D) array per hidden layer 1..d-1
    """
    generator = rng if rng is not None else block_generator(seed, stream, block)
    profile = config.profile
    activation = config.hidden_activation()
    linear = config.architecture.is_linear
    history: List[np.ndarray] = [inputs.flat]
    kernels: List[np.ndarray] = []
    for layer in range(1, config.depth):
        cov = _layer_covariance(config, inputs, history, layer)
        roots = _roots(cov)
        width = profile.width(layer)
        if linear:
            sample = wishart_kernels(generator, roots, width, size)
        else:
            sample = _feature_kernels(generator, roots, width, size, activation)
        history.append(sample)
        kernels.append(sample)
    return kernels


def _layer_covariance(
    config: NetworkConfig, inputs: InputKernel, history: Sequence[np.ndarray], layer: int
) -> np.ndarray:
    """Conditional covariance of one neuron's pre-activations given all lower layers"""
    if config.skip is not None:
        total = None
        for source, variance in sorted(config.skip.incoming(layer).items()):
            term = variance * history[source]
            total = term if total is None else total + term
        assert total is not None
        return total
    previous = history[layer - 1]
    if config.architecture in (Architecture.CNN_LINEAR_1D, Architecture.CNN_LINEAR_2D):
        shifted = shift_operator(inputs.four_index(previous), config.filter_for(layer), inputs.spatial_shape)
        previous = inputs.flatten(shifted)
    return config.profile.variance(layer) * previous


@dataclass
class KernelMoments:
    """Running count, mean and centred second moments of stacked kernel entries"""

    count: int
    mean: np.ndarray
    squares: np.ndarray
    scatter: Optional[np.ndarray] = None

    @classmethod
    def from_samples(cls, samples: np.ndarray, covariance: bool = True) -> "KernelMoments":
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise InvalidArgumentError("samples must be a nonempty (draws, features) array")
        mean = samples.mean(axis=0)
        centred = samples - mean
        squares = np.einsum("if,if->f", centred, centred)
        scatter = centred.T @ centred if covariance else None
        return cls(samples.shape[0], mean, squares, scatter)

    def combine(self, other: "KernelMoments") -> "KernelMoments":
        """Parallel-variance merge of two disjoint sample sets"""
        total = self.count + other.count
        delta = other.mean - self.mean
        weight = self.count * other.count / total
        mean = self.mean + delta * (other.count / total)
        squares = self.squares + other.squares + delta * delta * weight
        scatter = None
        if self.scatter is not None and other.scatter is not None:
            scatter = self.scatter + other.scatter + np.outer(delta, delta) * weight
        return KernelMoments(total, mean, squares, scatter)

    @staticmethod
    def combine_all(blocks: Sequence["KernelMoments"]) -> "KernelMoments":
        if not blocks:
            raise InvalidArgumentError("no blocks to combine")
        total = blocks[0]
        for part in blocks[1:]:
            total = total.combine(part)
        return total

    def variance(self) -> np.ndarray:
        if self.count < 2:
            return np.full_like(self.mean, np.inf)
        return self.squares / (self.count - 1)

    def standard_error(self) -> np.ndarray:
        return np.sqrt(self.variance() / self.count)

    def covariance(self) -> np.ndarray:
        if self.scatter is None:
            raise InvalidArgumentError("moments were reduced without covariances")
        if self.count < 2:
            raise InvalidArgumentError("covariance needs at least two draws")
        return self.scatter / (self.count - 1)

    @staticmethod
    def batch_covariance_se(blocks: Sequence["KernelMoments"]) -> np.ndarray:
        """Standard error of the pooled covariance from the spread of per-block covariances"""
        usable = [b for b in blocks if b.scatter is not None and b.count >= 2]
        if len(usable) < 2:
            logger.warning("covariance standard error needs two blocks", blocks=len(usable))
            shape = blocks[0].scatter.shape if blocks and blocks[0].scatter is not None else (0, 0)
            return np.full(shape, np.inf)
        per_block = np.stack([b.covariance() for b in usable])
        weights = np.array([b.count for b in usable], dtype=float)
        weights /= weights.sum()
        pooled = np.einsum("b,bij->ij", weights, per_block)
        spread = np.einsum("b,bij->ij", weights, (per_block - pooled) ** 2)
        effective = 1.0 / np.sum(weights**2)
        return np.sqrt(spread * effective / (effective - 1.0) / effective)
