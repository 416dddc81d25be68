"""
Configuration management for feature-kernel experiments
"""

from .estimator_config import (
    EstimatorConfig,
    ImportanceEstimatorConfig,
    LangevinEstimatorConfig,
    OracleConfig,
    TheoryEstimatorConfig,
)
from .settings import (
    ExperimentConfig,
    OrchestratorConfig,
    load_config,
    load_environment_config,
)

__all__ = [
    "EstimatorConfig",
    "ExperimentConfig",
    "ImportanceEstimatorConfig",
    "LangevinEstimatorConfig",
    "OracleConfig",
    "OrchestratorConfig",
    "TheoryEstimatorConfig",
    "load_config",
    "load_environment_config",
]
