"""
Regression tasks
Class-ordered image tasks with one-hot targets, synthetic Gaussian tasks and their Gram matrices
"""

from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from scipy.stats import ortho_group

from core.errors import InvalidArgumentError
from theory.gpkernels import FourIndexKernel
from theory.mathcore import GramMatrix, gram_from_samples, symmetrize
from theory.predictor import EvaluationSet

logger = structlog.get_logger(__name__)

N_CLASSES = 10


class TeacherKind(str, Enum):
    """How synthetic targets are generated"""

    RANDOM_LINEAR = "random-linear"
    RANDOM_ROTATION = "random-rotation"
    PRESCRIBED = "prescribed"


class Ordering(str, Enum):
    """Sample order of an image task"""

    CLASS = "class"
    INTERLEAVED = "interleaved"
    FILE = "file"


class ImageLayout(str, Enum):
    """How an image becomes CNN input channels and sites"""

    ROW_CHANNELS = "row-channels"
    SINGLE_CHANNEL = "single-channel"


@dataclass(frozen=True, eq=False)
class Task:
    """Training inputs and targets, optional held-out points"""

    x: np.ndarray
    y: np.ndarray
    x_test: Optional[np.ndarray] = None
    y_test: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    spatial_shape: Tuple[int, ...] = ()

    @property
    def p(self) -> int:
        return int(self.x.shape[0])

    @property
    def n_0(self) -> int:
        return int(self.x.shape[1])

    @property
    def n_d(self) -> int:
        return int(self.y.shape[1])

    @property
    def has_test(self) -> bool:
        return self.x_test is not None and self.y_test is not None

    @property
    def is_spatial(self) -> bool:
        return bool(self.spatial_shape)

    def _flat_inputs(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(x.shape[0], -1)

    @property
    def gxx(self) -> GramMatrix:
        """Input Gram over training points, normalized by the input width"""
        flat = self._flat_inputs(self.x)
        return gram_from_samples(flat, flat.shape[1])

    @property
    def gyy(self) -> GramMatrix:
        return gram_from_samples(self.y, self.n_d)

    def gxx_tensor(self, include_test: bool = False) -> FourIndexKernel:
        if not self.is_spatial:
            raise InvalidArgumentError("four-index input kernels need image inputs")
        x = self.all_inputs() if include_test else self.x
        return FourIndexKernel(_channel_gram(x), self.spatial_shape)

    def all_inputs(self) -> np.ndarray:
        if self.x_test is None:
            return self.x
        return np.concatenate([self.x, self.x_test], axis=0)

    def input_kernel(self, include_test: bool = False) -> Union[GramMatrix, FourIndexKernel]:
        """Layer-0 kernel over training points followed by test points when requested"""
        if self.is_spatial:
            return self.gxx_tensor(include_test)
        flat = self._flat_inputs(self.all_inputs() if include_test else self.x)
        return gram_from_samples(flat, flat.shape[1])

    def evaluation_set(self) -> EvaluationSet:
        if not self.has_test:
            raise InvalidArgumentError("task has no test points")
        assert self.x_test is not None and self.y_test is not None
        return EvaluationSet.from_data(
            self._flat_inputs(self.x), self.y, self._flat_inputs(self.x_test), self.y_test
        )


def _channel_gram(x: np.ndarray) -> np.ndarray:
    """G[mu, nu, a, b] = (1/C) sum_c x[mu, c, a] x[nu, c, b]"""
    values = np.einsum("mca,ncb->mnab", x, x, optimize=True) / x.shape[1]
    return 0.5 * (values + values.transpose(1, 0, 3, 2))


def cnn_inputs(images: np.ndarray, layout: Union[ImageLayout, str]) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """Images (p, H, W) to CNN inputs (p, channels, sites) and the spatial shape"""
    images = np.asarray(images, dtype=float)
    if images.ndim != 3:
        raise InvalidArgumentError(f"expected an image batch (p, H, W), got {images.shape}")
    p, rows, cols = images.shape
    if ImageLayout(layout) == ImageLayout.ROW_CHANNELS:
        return images, (cols,)
    return images.reshape(p, 1, rows * cols), (rows, cols)


def image_gram_tensor(images: np.ndarray, layout: Union[ImageLayout, str]) -> FourIndexKernel:
    """Four-index input kernel of an image batch"""
    x, shape = cnn_inputs(images, layout)
    return FourIndexKernel(_channel_gram(x), shape)


def one_hot(labels: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise InvalidArgumentError(f"labels must lie in 0..{n_classes - 1}")
    return np.eye(n_classes)[labels]


def _select(labels: np.ndarray, p: int, ordering: Ordering) -> np.ndarray:
    if ordering == Ordering.FILE:
        return np.arange(p)
    classes = np.unique(labels)
    per_class = [np.flatnonzero(labels == c) for c in classes]
    base, extra = divmod(p, len(classes))
    quota = [base + (1 if i < extra else 0) for i in range(len(classes))]
    short = [int(c) for c, idx, q in zip(classes, per_class, quota) if len(idx) < q]
    if short:
        raise InvalidArgumentError(f"not enough samples of classes {short} for p={p}")
    chosen = [idx[:q] for idx, q in zip(per_class, quota)]
    if ordering == Ordering.CLASS:
        return np.concatenate(chosen)
    width = max(quota)
    rounds = [idx[r] for r in range(width) for idx in chosen if r < len(idx)]
    return np.asarray(rounds, dtype=int)


def build_task(
    images: np.ndarray,
    labels: np.ndarray,
    p: int,
    ordering: Union[Ordering, str] = Ordering.CLASS,
    p_test: int = 0,
    layout: Optional[Union[ImageLayout, str]] = None,
) -> Task:
    """
    Deterministic class-balanced selection with one-hot targets

    Args:
        images: (N, H, W) images in [0, 1]
        labels: (N,) integer classes
        p: training points
        ordering: class-sorted, interleaved or file order
        p_test: held-out points chosen the same way from the samples left over
        layout: keep images spatial for CNNs; flattened otherwise

    Returns:
        Task whose G_xx normalizer is H*W and G_yy normalizer the class count
    """
    images = np.asarray(images, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise InvalidArgumentError("images must be (N, H, W) with one label each")
    if p < 1 or p + p_test > images.shape[0]:
        raise InvalidArgumentError(f"p={p} (+{p_test} test) exceeds {images.shape[0]} samples")
    ordering = Ordering(ordering)
    train = _select(labels, p, ordering)
    test = np.zeros(0, dtype=int)
    if p_test:
        remaining = np.setdiff1d(np.arange(labels.size), train)
        test = remaining[_select(labels[remaining], p_test, ordering)]
    targets = one_hot(labels)
    if layout is None:
        x = images.reshape(images.shape[0], -1)
        shape: Tuple[int, ...] = ()
    else:
        x, shape = cnn_inputs(images, layout)
    task = Task(
        x=x[train],
        y=targets[train],
        x_test=x[test] if p_test else None,
        y_test=targets[test] if p_test else None,
        labels=labels[train],
        spatial_shape=shape,
    )
    logger.info("image task built", p=p, p_test=p_test, ordering=ordering.value)
    return task


def _prescribed_targets(gyy: np.ndarray, n_d: int, rng: np.random.Generator) -> np.ndarray:
    values, vectors = np.linalg.eigh(symmetrize(np.asarray(gyy, dtype=float)))
    tol = 1e-10 * max(float(np.abs(values).max(initial=0.0)), 1e-300)
    if values.min(initial=0.0) < -tol:
        raise InvalidArgumentError("prescribed G_yy is not positive semidefinite")
    rank = int(np.sum(values > tol))
    if rank > n_d:
        raise InvalidArgumentError(f"prescribed G_yy has rank {rank} > n_d = {n_d}")
    order = np.argsort(values)[::-1][:n_d]
    factor = vectors[:, order] * np.sqrt(np.clip(values[order], 0.0, None) * n_d)
    rotation = ortho_group.rvs(n_d, random_state=rng) if n_d > 1 else np.ones((1, 1))
    return factor @ rotation


def synthetic_task(
    seed: int,
    n_0: int,
    p: int,
    n_d: int,
    teacher: Union[TeacherKind, str] = TeacherKind.RANDOM_LINEAR,
    gyy: Optional[np.ndarray] = None,
    p_test: int = 0,
) -> Task:
    """
    Gaussian inputs with targets from a teacher

    Inputs are i.i.d. standard Gaussian, so G_xx = X X^T / n_0 concentrates at the identity.
    random-linear: Y = X W / sqrt(n_0), W standard Gaussian.
    random-rotation: Y = the first n_d coordinates of X in a random orthonormal basis.
    prescribed: training targets with Y Y^T / n_d equal to the given G_yy.
    """
    if min(n_0, p, n_d) < 1 or p_test < 0:
        raise InvalidArgumentError("n_0, p and n_d must be at least 1")
    kind = TeacherKind(teacher)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((p + p_test, n_0))
    if kind == TeacherKind.RANDOM_LINEAR:
        y = x @ rng.standard_normal((n_0, n_d)) / np.sqrt(n_0)
    elif kind == TeacherKind.RANDOM_ROTATION:
        if n_d > n_0:
            raise InvalidArgumentError("random-rotation teachers need n_d <= n_0")
        basis = ortho_group.rvs(n_0, random_state=rng) if n_0 > 1 else np.ones((1, 1))
        y = x @ basis[:, :n_d]
    else:
        if gyy is None:
            raise InvalidArgumentError("prescribed teachers need a G_yy matrix")
        if np.shape(gyy) != (p, p):
            raise InvalidArgumentError(f"prescribed G_yy must be ({p}, {p})")
        if p_test:
            raise InvalidArgumentError("prescribed teachers define training targets only")
        y = _prescribed_targets(gyy, n_d, rng)
    return Task(
        x=x[:p],
        y=y[:p],
        x_test=x[p:] if p_test else None,
        y_test=y[p:] if p_test else None,
    )


def export_csv(task: Task, path: Union[str, Path]) -> Path:
    """Training rows as x0..x{n0-1}, y0..y{nd-1} with 9 significant digits"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = task.x.reshape(task.p, -1)
    frame = pd.DataFrame(
        np.hstack([flat, task.y]),
        columns=[f"x{i}" for i in range(flat.shape[1])] + [f"y{j}" for j in range(task.n_d)],
    )
    frame.to_csv(path, index=False, float_format="%.9g")
    return path


def spatial_task(task: Task, spatial_shape: Sequence[int]) -> Task:
    """View flat inputs of width C*s as CNN inputs (p, C, s) over the given spatial shape"""
    sites = int(np.prod(spatial_shape))
    if sites < 1 or task.n_0 % sites:
        raise InvalidArgumentError(f"input width {task.n_0} is not a multiple of {sites} sites")
    channels = task.n_0 // sites

    def view(x: Optional[np.ndarray]) -> Optional[np.ndarray]:
        return None if x is None else x.reshape(x.shape[0], channels, sites)

    return replace(
        task, x=view(task.x), x_test=view(task.x_test), spatial_shape=tuple(spatial_shape)
    )
