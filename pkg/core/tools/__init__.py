"""
Shared tools for experiment runs
"""

from .file_utils import FileUtils
from .logging_utils import configure_logging
from .scaling import PowerLawFit, fit_power_law
from .validation_utils import ValidationUtils

__all__ = [
    "FileUtils",
    "PowerLawFit",
    "ValidationUtils",
    "configure_logging",
    "fit_power_law",
]
