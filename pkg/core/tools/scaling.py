"""
Power-law fits of deviation norms against width
"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import scipy.stats

from ..errors import InvalidArgumentError

MIN_POINTS = 3


@dataclass(frozen=True)
class PowerLawFit:
    """value ~ exp(intercept) * n^slope with a two-sided confidence interval on the slope"""

    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    stderr: float
    points: int

    def contains(self, slope: float) -> bool:
        return self.ci_low <= slope <= self.ci_high


def fit_power_law(
    points: Sequence[Tuple[float, float]], confidence: float = 0.95
) -> PowerLawFit:
    """
    Least squares on (log n, log value)

    Args:
        points: (width, value) pairs, at least three, all values positive
        confidence: coverage of the Student-t slope interval

    Returns:
        PowerLawFit; the interval collapses to the slope for exact power laws
    """
    if len(points) < MIN_POINTS:
        raise InvalidArgumentError(f"need at least {MIN_POINTS} points, got {len(points)}")
    if not 0.0 < confidence < 1.0:
        raise InvalidArgumentError(f"confidence must lie in (0, 1), got {confidence}")
    data = np.asarray(points, dtype=float)
    if data.ndim != 2 or data.shape[1] != 2:
        raise InvalidArgumentError("points must be (width, value) pairs")
    widths, values = data[:, 0], data[:, 1]
    if np.any(widths <= 0) or np.any(values <= 0) or not np.all(np.isfinite(data)):
        raise InvalidArgumentError("power-law fits need finite positive widths and values")
    if np.unique(widths).size < 2:
        raise InvalidArgumentError("power-law fits need at least two distinct widths")

    result = scipy.stats.linregress(np.log(widths), np.log(values))
    stderr = float(result.stderr) if np.isfinite(result.stderr) else 0.0
    half = float(scipy.stats.t.ppf(0.5 * (1.0 + confidence), len(widths) - 2)) * stderr
    slope = float(result.slope)
    return PowerLawFit(
        slope=slope,
        intercept=float(result.intercept),
        ci_low=slope - half,
        ci_high=slope + half,
        stderr=stderr,
        points=len(widths),
    )
