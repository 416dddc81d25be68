"""
Unit tests for power-law fits
"""

import pytest

from core.errors import InvalidArgumentError
from core.tools.scaling import fit_power_law


class TestPowerLaw:
    """Test cases for fit_power_law"""

    @pytest.mark.parametrize("exponent", [1, 2])
    def test_exact_power_law(self, exponent):
        """c / n^k fits slope -k with a collapsed interval"""
        fit = fit_power_law([(n, 3.0 / n**exponent) for n in (64, 128, 256, 512)])
        assert fit.slope == pytest.approx(-exponent)
        assert fit.ci_high - fit.ci_low == pytest.approx(0.0, abs=1e-8)
        assert fit.points == 4

    def test_noisy_interval(self):
        """Scatter widens the interval around the slope"""
        fit = fit_power_law([(64, 1.1 / 64), (128, 0.9 / 128), (256, 1.05 / 256)])
        assert fit.ci_low < fit.slope < fit.ci_high
        assert fit.contains(-1.0)

    def test_too_few_points(self):
        """Fewer than three points are rejected"""
        with pytest.raises(InvalidArgumentError):
            fit_power_law([(64, 1.0), (128, 0.5)])

    @pytest.mark.parametrize(
        "points",
        [
            [(64, 1.0), (128, 0.0), (256, 0.25)],
            [(64, 1.0), (64, 1.0), (64, 1.0)],
            [(-1, 1.0), (128, 0.5), (256, 0.25)],
        ],
    )
    def test_invalid_points(self, points):
        """Nonpositive values and single widths cannot be fitted"""
        with pytest.raises(InvalidArgumentError):
            fit_power_law(points)

    def test_confidence_range(self):
        """Confidence must lie strictly between 0 and 1"""
        with pytest.raises(InvalidArgumentError):
            fit_power_law([(1, 1.0), (2, 0.5), (4, 0.25)], confidence=1.0)
