"""
Network architecture schemas
Widths, prior variances, convolution filters, activations and skip connectivity
"""

import math
from enum import Enum
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Tuple

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.special import erf

from core.errors import InvalidArgumentError

VARIANCE_FLOOR = 1e-12
SIMPLEX_TOL = 1e-12


class Architecture(str, Enum):
    """Supported network families"""

    MLP_LINEAR = "mlp-linear"
    CNN_LINEAR_1D = "cnn-linear-1d"
    CNN_LINEAR_2D = "cnn-linear-2d"
    MLP_RELU = "mlp-relu"
    SINGLE_NONLINEAR = "single-nonlinear"

    @property
    def is_convolutional(self) -> bool:
        return self in (Architecture.CNN_LINEAR_1D, Architecture.CNN_LINEAR_2D)

    @property
    def is_linear(self) -> bool:
        return self in (
            Architecture.MLP_LINEAR,
            Architecture.CNN_LINEAR_1D,
            Architecture.CNN_LINEAR_2D,
        )

    @property
    def spatial_ndim(self) -> int:
        return {Architecture.CNN_LINEAR_1D: 1, Architecture.CNN_LINEAR_2D: 2}.get(self, 0)


class ReadoutStrategy(str, Enum):
    """How the last convolutional layer is contracted before the linear readout"""

    VECTORIZATION = "vectorization"
    GAP = "gap"
    PROJECTION = "projection"


class ActivationKind(str, Enum):
    IDENTITY = "identity"
    RELU = "relu"
    ERF = "erf"
    POLYNOMIAL = "polynomial"
    CUSTOM = "custom"


class WidthProfile(BaseModel):
    """Hidden widths n_1..n_{d-1}, output width n_d and prior variances sigma_1^2..sigma_d^2"""

    hidden_widths: List[int] = Field(..., description="Hidden-layer widths n_1..n_{d-1}")
    output_width: int = Field(..., description="Readout width n_d")
    prior_variances: List[float] = Field(
        ..., description="Prior weight variances sigma_1^2..sigma_d^2 (one per layer)"
    )

    model_config = ConfigDict(
        frozen=True,
        json_schema_extra={
            "example": {
                "hidden_widths": [512, 512],
                "output_width": 2,
                "prior_variances": [1.0, 1.0, 1.0],
            }
        },
    )

    @field_validator("hidden_widths")
    @classmethod
    def _check_widths(cls, widths: List[int]) -> List[int]:
        if not widths:
            raise ValueError("at least one hidden layer is required (depth d >= 2)")
        if any(int(n) < 1 for n in widths):
            raise ValueError(f"all widths must be >= 1, got {widths}")
        return [int(n) for n in widths]

    @field_validator("output_width")
    @classmethod
    def _check_output_width(cls, width: int) -> int:
        if int(width) < 1:
            raise ValueError(f"output width must be >= 1, got {width}")
        return int(width)

    @field_validator("prior_variances")
    @classmethod
    def _floor_variances(cls, variances: List[float]) -> List[float]:
        if any(v < 0 or not math.isfinite(v) for v in variances):
            raise ValueError(f"prior variances must be finite and nonnegative, got {variances}")
        return [max(float(v), VARIANCE_FLOOR) for v in variances]

    @model_validator(mode="after")
    def _check_lengths(self) -> "WidthProfile":
        if len(self.prior_variances) != self.depth:
            raise ValueError(
                f"expected {self.depth} prior variances for depth {self.depth}, "
                f"got {len(self.prior_variances)}"
            )
        return self

    @property
    def depth(self) -> int:
        return len(self.hidden_widths) + 1

    @property
    def readout_variance(self) -> float:
        return self.prior_variances[-1]

    def width(self, layer: int) -> int:
        """n_layer for layer in 1..d"""
        if not 1 <= layer <= self.depth:
            raise InvalidArgumentError(f"layer {layer} outside 1..{self.depth}")
        return self.output_width if layer == self.depth else self.hidden_widths[layer - 1]

    def variance(self, layer: int) -> float:
        if not 1 <= layer <= self.depth:
            raise InvalidArgumentError(f"layer {layer} outside 1..{self.depth}")
        return self.prior_variances[layer - 1]

    def check_hidden_layer(self, layer: int) -> None:
        if not 1 <= layer <= self.depth - 1:
            raise InvalidArgumentError(f"hidden layer {layer} outside 1..{self.depth - 1}")

    def gp_scale(self, layer: int) -> float:
        """m_layer^2 = sigma_layer^2 ... sigma_1^2 (1.0 at layer 0)"""
        if not 0 <= layer <= self.depth:
            raise InvalidArgumentError(f"layer {layer} outside 0..{self.depth}")
        return float(np.prod(self.prior_variances[:layer])) if layer else 1.0

    def variance_prefactor(self, layer: int, lag: int) -> float:
        """sigma_{layer+1}^2 ... sigma_{layer+lag}^2"""
        if lag < 0 or layer + lag > self.depth:
            raise InvalidArgumentError(f"lag {lag} from layer {layer} leaves 0..{self.depth}")
        return float(np.prod(self.prior_variances[layer : layer + lag])) if lag else 1.0

    def inverse_width_sum(self, layer: int) -> Fraction:
        """sum_{l' <= layer} 1/n_{l'} in exact rational arithmetic"""
        self.check_hidden_layer(layer)
        return sum((Fraction(1, n) for n in self.hidden_widths[:layer]), Fraction(0))

    def width_factor(self, layer: int) -> Fraction:
        """sum_{l' <= layer} n_d/n_{l'} in exact rational arithmetic"""
        return self.output_width * self.inverse_width_sum(layer)

    def with_hidden_widths(self, widths: List[int]) -> "WidthProfile":
        return WidthProfile(
            hidden_widths=list(widths),
            output_width=self.output_width,
            prior_variances=list(self.prior_variances),
        )


class FilterSpec(BaseModel):
    """Convolution filter weights v over a (2k+1)^q receptive field, row-major"""

    weights: List[float] = Field(..., description="Positive filter weights summing to one")
    half_width: int = Field(default=1, description="Filter half-width k")
    ndim: int = Field(default=1, description="Number of spatial axes q")

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_simplex(self) -> "FilterSpec":
        if self.half_width < 0 or self.ndim not in (1, 2):
            raise ValueError("half_width must be >= 0 and ndim 1 or 2")
        expected = (2 * self.half_width + 1) ** self.ndim
        if len(self.weights) != expected:
            raise ValueError(f"expected {expected} filter weights, got {len(self.weights)}")
        if any(v <= 0 for v in self.weights):
            raise ValueError("filter weights must be strictly positive")
        if abs(math.fsum(self.weights) - 1.0) > SIMPLEX_TOL:
            raise ValueError("filter weights must sum to 1")
        return self

    @classmethod
    def uniform(cls, half_width: int = 1, ndim: int = 1) -> "FilterSpec":
        size = (2 * half_width + 1) ** ndim
        return cls(weights=[1.0 / size] * size, half_width=half_width, ndim=ndim)

    @property
    def receptive_shape(self) -> Tuple[int, ...]:
        return (2 * self.half_width + 1,) * self.ndim

    @property
    def weight_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    @property
    def offsets(self) -> np.ndarray:
        """Per-axis offsets -k..k of every receptive-field position, shape (B, ndim)"""
        axis = np.arange(-self.half_width, self.half_width + 1)
        grids = np.meshgrid(*([axis] * self.ndim), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def fits(self, spatial_shape: List[int]) -> bool:
        return len(spatial_shape) == self.ndim and all(
            2 * self.half_width + 1 <= extent for extent in spatial_shape
        )


class ActivationSpec(BaseModel):
    """Pointwise activation phi"""

    kind: ActivationKind = Field(default=ActivationKind.IDENTITY, description="Activation family")
    coefficients: Optional[List[float]] = Field(
        None, description="Polynomial coefficients in ascending powers"
    )
    function: Optional[Callable[[np.ndarray], np.ndarray]] = Field(
        None, description="Custom pointwise function", exclude=True
    )
    derivative_function: Optional[Callable[[np.ndarray], np.ndarray]] = Field(
        None, description="Derivative of the custom function", exclude=True
    )

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def _check_kind(self) -> "ActivationSpec":
        if self.kind == ActivationKind.POLYNOMIAL and not self.coefficients:
            raise ValueError("polynomial activation requires coefficients")
        if self.kind == ActivationKind.CUSTOM and self.function is None:
            raise ValueError("custom activation requires a function")
        return self

    @classmethod
    def polynomial(cls, coefficients: List[float]) -> "ActivationSpec":
        return cls(kind=ActivationKind.POLYNOMIAL, coefficients=list(coefficients))

    @property
    def is_polynomial(self) -> bool:
        return self.kind in (ActivationKind.IDENTITY, ActivationKind.POLYNOMIAL)

    def polynomial_coefficients(self) -> List[float]:
        if self.kind == ActivationKind.IDENTITY:
            return [0.0, 1.0]
        if self.kind == ActivationKind.POLYNOMIAL:
            coeffs = list(self.coefficients or [])
            while len(coeffs) > 1 and coeffs[-1] == 0.0:
                coeffs.pop()
            return coeffs
        raise InvalidArgumentError(f"{self.kind.value} activation is not a polynomial")

    @property
    def degree(self) -> int:
        return len(self.polynomial_coefficients()) - 1

    @property
    def is_odd(self) -> bool:
        """phi(-x) = -phi(x), so E[phi(h)] = 0 for centred Gaussian h"""
        if self.kind in (ActivationKind.IDENTITY, ActivationKind.ERF):
            return True
        if self.kind == ActivationKind.POLYNOMIAL:
            return all(c == 0.0 for c in self.polynomial_coefficients()[0::2])
        return False

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.kind == ActivationKind.IDENTITY:
            return np.asarray(x, dtype=float)
        if self.kind == ActivationKind.RELU:
            return np.maximum(x, 0.0)
        if self.kind == ActivationKind.ERF:
            return erf(x)
        if self.kind == ActivationKind.POLYNOMIAL:
            return np.polynomial.polynomial.polyval(x, self.polynomial_coefficients())
        assert self.function is not None
        return np.asarray(self.function(x), dtype=float)

    def derivative(self, x: np.ndarray) -> np.ndarray:
        if self.kind == ActivationKind.IDENTITY:
            return np.ones_like(np.asarray(x, dtype=float))
        if self.kind == ActivationKind.RELU:
            return (np.asarray(x) > 0.0).astype(float)
        if self.kind == ActivationKind.ERF:
            return 2.0 / math.sqrt(math.pi) * np.exp(-np.square(x))
        if self.kind == ActivationKind.POLYNOMIAL:
            deriv = np.polynomial.polynomial.polyder(self.polynomial_coefficients())
            return np.polynomial.polynomial.polyval(x, deriv) * np.ones_like(x, dtype=float)
        if self.derivative_function is None:
            raise InvalidArgumentError("custom activation has no derivative for gradients")
        return np.asarray(self.derivative_function(x), dtype=float)


class SkipEdge(BaseModel):
    """Weighted edge source -> target with prior variance sigma_{target,source}^2"""

    target: int = Field(..., description="Receiving layer")
    source: int = Field(..., description="Emitting layer (0 is the input)")
    variance: float = Field(..., description="Prior variance of the edge weights")

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_edge(self) -> "SkipEdge":
        if not 0 <= self.source < self.target:
            raise ValueError(f"edge must satisfy 0 <= source < target, got {self.source}->{self.target}")
        if self.variance < 0:
            raise ValueError("edge variance must be nonnegative")
        return self


class SkipConnectivity(BaseModel):
    """Layer DAG of a linear network with arbitrary skip connections"""

    depth: int = Field(..., description="Network depth d")
    edges: List[SkipEdge] = Field(default_factory=list, description="Weighted edges")

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_range(self) -> "SkipConnectivity":
        seen = set()
        for edge in self.edges:
            if edge.target > self.depth:
                raise ValueError(f"edge target {edge.target} beyond depth {self.depth}")
            if (edge.target, edge.source) in seen:
                raise ValueError(f"duplicate edge {edge.source}->{edge.target}")
            seen.add((edge.target, edge.source))
        return self

    @classmethod
    def chain(cls, prior_variances: List[float]) -> "SkipConnectivity":
        edges = [
            SkipEdge(target=layer, source=layer - 1, variance=v)
            for layer, v in enumerate(prior_variances, start=1)
        ]
        return cls(depth=len(prior_variances), edges=edges)

    def variance(self, target: int, source: int) -> float:
        for edge in self.edges:
            if edge.target == target and edge.source == source:
                return edge.variance
        return 0.0

    def incoming(self, target: int) -> Dict[int, float]:
        return {e.source: e.variance for e in self.edges if e.target == target and e.variance > 0}

    def graph(self) -> nx.DiGraph:
        dag = nx.DiGraph()
        dag.add_nodes_from(range(self.depth + 1))
        dag.add_weighted_edges_from(
            (e.source, e.target, e.variance) for e in self.edges if e.variance > 0
        )
        return dag

    def check_connected(self) -> None:
        """Every layer >= 1 needs an incoming edge and a path from the input"""
        dag = self.graph()
        for layer in range(1, self.depth + 1):
            if dag.in_degree(layer) == 0 or not nx.has_path(dag, 0, layer):
                raise InvalidArgumentError(f"layer {layer} is disconnected from the input")

    def chain_variances(self) -> List[float]:
        return [self.variance(layer, layer - 1) for layer in range(1, self.depth + 1)]

    @property
    def is_chain(self) -> bool:
        return all(e.source == e.target - 1 or e.variance == 0 for e in self.edges)


class NetworkConfig(BaseModel):
    """Full description of one Bayesian network with fully connected linear readout"""

    architecture: Architecture = Field(default=Architecture.MLP_LINEAR, description="Family")
    profile: WidthProfile = Field(..., description="Widths and prior variances")
    activation: ActivationSpec = Field(
        default_factory=ActivationSpec, description="Activation (single-nonlinear only)"
    )
    spatial_shape: Optional[List[int]] = Field(None, description="Per-axis spatial extents (CNN)")
    filters: Optional[List[FilterSpec]] = Field(
        None, description="One filter for all layers or one per hidden layer (CNN)"
    )
    padding: str = Field(default="circular", description="Spatial boundary condition (CNN)")
    readout: ReadoutStrategy = Field(
        default=ReadoutStrategy.VECTORIZATION, description="Contraction of the last CNN layer"
    )
    readout_vector: Optional[List[float]] = Field(
        None, description="Projection vector u over spatial sites (projection readout)"
    )
    skip: Optional[SkipConnectivity] = Field(None, description="Skip connections (mlp-linear)")

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def _check_consistency(self) -> "NetworkConfig":
        arch = self.architecture
        if arch.is_convolutional:
            if self.padding != "circular":
                raise ValueError(f"only circular padding is supported, got {self.padding!r}")
            if not self.spatial_shape or len(self.spatial_shape) != arch.spatial_ndim:
                raise ValueError(f"{arch.value} needs a {arch.spatial_ndim}-axis spatial_shape")
            if any(extent < 1 for extent in self.spatial_shape):
                raise ValueError("spatial extents must be >= 1")
            filters = self.filters or [FilterSpec.uniform(1, arch.spatial_ndim)]
            if len(filters) not in (1, self.profile.depth - 1):
                raise ValueError("provide one filter or one per hidden layer")
            for spec in filters:
                if not spec.fits(self.spatial_shape):
                    raise ValueError("filter receptive field does not fit the spatial shape")
            if self.readout == ReadoutStrategy.PROJECTION:
                if self.readout_vector is None or len(self.readout_vector) != self.spatial_size:
                    raise ValueError("projection readout needs a vector with one entry per site")
        if self.skip is not None:
            if arch != Architecture.MLP_LINEAR:
                raise ValueError("skip connections are supported for mlp-linear only")
            if self.skip.depth != self.profile.depth:
                raise ValueError("skip connectivity depth differs from the width profile")
            self.skip.check_connected()
            depth = self.profile.depth
            feeding = self.skip.incoming(depth)
            if set(feeding) != {depth - 1} or not math.isclose(
                feeding[depth - 1], self.profile.readout_variance, rel_tol=1e-12
            ):
                raise ValueError(
                    "the readout layer must be fed by layer d-1 alone with variance sigma_d^2"
                )
        if arch == Architecture.SINGLE_NONLINEAR and self.profile.depth != 2:
            raise ValueError("single-nonlinear networks have exactly one hidden layer")
        return self

    @property
    def depth(self) -> int:
        return self.profile.depth

    @property
    def spatial_size(self) -> int:
        return int(np.prod(self.spatial_shape)) if self.spatial_shape else 1

    def filter_for(self, layer: int) -> FilterSpec:
        filters = self.filters or [FilterSpec.uniform(1, self.architecture.spatial_ndim)]
        return filters[0] if len(filters) == 1 else filters[layer - 1]

    def layer_filters(self) -> List[FilterSpec]:
        return [self.filter_for(layer) for layer in range(1, self.depth)]

    def hidden_activation(self) -> ActivationSpec:
        if self.architecture == Architecture.MLP_RELU:
            return ActivationSpec(kind=ActivationKind.RELU)
        if self.architecture == Architecture.SINGLE_NONLINEAR:
            return self.activation
        return ActivationSpec()

    def readout_weights(self) -> Optional[np.ndarray]:
        """Spatial projection u for gap/projection readouts, None for vectorization"""
        if self.readout == ReadoutStrategy.GAP:
            return np.full(self.spatial_size, 1.0 / self.spatial_size)
        if self.readout == ReadoutStrategy.PROJECTION:
            return np.asarray(self.readout_vector, dtype=float)
        return None

    def with_profile(self, profile: WidthProfile) -> "NetworkConfig":
        return self.model_copy(update={"profile": profile})


class TemperatureParams(BaseModel):
    """Inverse temperature beta and readout prior variance sigma_d^2"""

    beta: float = Field(default=1.0, description="Inverse temperature (inf selects the limit mode)")
    readout_variance: float = Field(default=1.0, description="Readout prior variance sigma_d^2")

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_ranges(self) -> "TemperatureParams":
        if not self.beta >= 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not self.readout_variance > 0 or not math.isfinite(self.readout_variance):
            raise ValueError("readout variance must be positive and finite")
        return self

    @classmethod
    def for_profile(cls, beta: float, profile: WidthProfile) -> "TemperatureParams":
        return cls(beta=beta, readout_variance=profile.readout_variance)

    @property
    def is_limit(self) -> bool:
        return math.isinf(self.beta)

    @property
    def is_prior(self) -> bool:
        return self.beta == 0.0

    @property
    def expansion_parameter(self) -> float:
        """beta * sigma_d^2"""
        return self.beta * self.readout_variance

    @property
    def ridge(self) -> float:
        """1/(beta sigma_d^2), zero in the limit mode"""
        if self.is_limit:
            return 0.0
        if self.is_prior:
            return math.inf
        return 1.0 / self.expansion_parameter


class LangevinSchedule(BaseModel):
    """Euler-Maruyama step size, burn-in, sampling window and chain layout"""

    dt: float = Field(default=1e-3, description="Step size")
    burn_in: int = Field(default=200_000, description="Steps discarded before sampling")
    sample_steps: int = Field(default=200_000, description="Steps in the sampling window")
    thinning: int = Field(default=10, description="Record every thinning-th step")
    seed: int = Field(default=0, description="64-bit base seed")
    chains: int = Field(default=4, description="Number of independent chains")
    omega: float = Field(default=-1.0, description="Weight-decay power law lambda(beta) = beta^omega")

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_schedule(self) -> "LangevinSchedule":
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.burn_in < 0 or self.sample_steps < 1 or self.thinning < 1 or self.chains < 1:
            raise ValueError("burn_in >= 0, sample_steps >= 1, thinning >= 1, chains >= 1 required")
        if self.burn_in + self.sample_steps < self.thinning:
            raise ValueError("burn_in + sample_steps must be at least thinning")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")
        return self

    @property
    def recorded_per_chain(self) -> int:
        return self.sample_steps // self.thinning
