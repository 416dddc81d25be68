"""
Exception hierarchy for the feature-kernel toolkit
Every failure mode raised by the theory, estimator and dataset layers
"""

from typing import Optional


class KernelToolkitError(Exception):
    """Base class for all toolkit errors"""


class InvalidArgumentError(KernelToolkitError, ValueError):
    """Argument outside the documented domain (shape, range, layer index)"""


class UnsupportedOrderError(KernelToolkitError, ValueError):
    """Gaussian moment order beyond the pairing-enumeration cap"""


class SingularMatrixError(KernelToolkitError, ArithmeticError):
    """Matrix that must be inverted is singular to working precision"""


class DivergentSeriesError(KernelToolkitError, ArithmeticError):
    """Truncated series whose spectral radius is not below one"""

    def __init__(self, message: str, spectral_radius: float):
        super().__init__(message)
        self.spectral_radius = spectral_radius


class NeedsFiniteTemperatureError(KernelToolkitError, ValueError):
    """Low-temperature limit requested on a singular kernel"""


class UnsupportedReadoutError(KernelToolkitError, ValueError):
    """Convolutional readout without a shift-independent correction"""


class ResourceLimitError(KernelToolkitError, MemoryError):
    """Requested tensor exceeds the configured memory guard"""


class ConvergenceFailureError(KernelToolkitError, RuntimeError):
    """Iterative solve stopped without meeting its tolerance"""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class FormatError(KernelToolkitError, ValueError):
    """Malformed binary input"""

    def __init__(self, message: str, offset: Optional[int] = None):
        location = f" at byte offset {offset}" if offset is not None else ""
        super().__init__(f"{message}{location}")
        self.offset = offset


class DivergenceError(KernelToolkitError, RuntimeError):
    """Langevin chain left the finite parameter region"""

    def __init__(self, chain_id: int, dt: float, step: int):
        super().__init__(
            f"chain {chain_id} diverged at step {step}; reduce the step size dt={dt:g}"
        )
        self.chain_id = chain_id
        self.dt = dt
        self.step = step


class ConfigError(KernelToolkitError, ValueError):
    """Experiment configuration could not be parsed or validated"""
