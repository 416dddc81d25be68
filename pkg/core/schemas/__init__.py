"""
Core data schemas: architectures, estimator outputs and reports
"""

from .architecture import (
    ActivationKind,
    ActivationSpec,
    Architecture,
    FilterSpec,
    LangevinSchedule,
    NetworkConfig,
    ReadoutStrategy,
    SkipConnectivity,
    SkipEdge,
    TemperatureParams,
    WidthProfile,
)
from .base import BaseEstimatorOutput, EstimatorKind, EstimatorStatus
from .report import CellResult, CorrectionReport, LayerResult, ScalingFit, ScatterPoint

__all__ = [
    "ActivationKind",
    "ActivationSpec",
    "Architecture",
    "BaseEstimatorOutput",
    "CellResult",
    "CorrectionReport",
    "EstimatorKind",
    "EstimatorStatus",
    "FilterSpec",
    "LangevinSchedule",
    "LayerResult",
    "NetworkConfig",
    "ReadoutStrategy",
    "ScalingFit",
    "ScatterPoint",
    "SkipConnectivity",
    "SkipEdge",
    "TemperatureParams",
    "WidthProfile",
]
