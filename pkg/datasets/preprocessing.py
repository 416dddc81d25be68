"""
Image preprocessing
"""

from functools import lru_cache

import numpy as np

from core.errors import InvalidArgumentError


@lru_cache(maxsize=32)
def box_filter_matrix(source: int, target: int) -> np.ndarray:
    """
    (target, source) averaging weights of an exact area box filter

    Row i averages the source cells overlapping [i*source/target, (i+1)*source/target),
    each weighted by its fractional overlap. Rows sum to one.
    """
    if target < 1 or source < 1:
        raise InvalidArgumentError("image sizes must be positive")
    if target > source:
        raise InvalidArgumentError(f"cannot downsample {source} pixels to {target}")
    edges = np.arange(target + 1) * (source / target)
    cells = np.arange(source)
    lower = np.maximum(edges[:-1, None], cells[None, :])
    upper = np.minimum(edges[1:, None], cells[None, :] + 1)
    weights = np.clip(upper - lower, 0.0, None) * (target / source)
    weights.setflags(write=False)
    return weights


def downsample(images: np.ndarray, target: int = 10) -> np.ndarray:
    """Box-filter square images (..., H, H) down to (..., target, target)"""
    images = np.asarray(images, dtype=float)
    if images.ndim < 2 or images.shape[-1] != images.shape[-2]:
        raise InvalidArgumentError(f"expected square images, got shape {images.shape}")
    weights = box_filter_matrix(images.shape[-1], int(target))
    return np.einsum("ik,...kl,jl->...ij", weights, images, weights, optimize=True)
