"""
Settings and configuration for feature-kernel experiments
YAML or flat dotted key-value files, with environment overrides
"""

import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..errors import ConfigError
from ..schemas.architecture import (
    ActivationSpec,
    Architecture,
    FilterSpec,
    NetworkConfig,
    ReadoutStrategy,
    SkipConnectivity,
    SkipEdge,
    TemperatureParams,
    WidthProfile,
)
from ..schemas.base import EstimatorKind
from .estimator_config import (
    ImportanceEstimatorConfig,
    LangevinEstimatorConfig,
    OracleConfig,
    TheoryEstimatorConfig,
)

ENV_PREFIX = "BNNFK_"


class OrchestratorConfig(BaseModel):
    """Configuration for the experiment orchestrator"""

    output_directory: str = Field(default="./data/outputs", description="Output directory for results")
    log_level: str = Field(default="INFO", description="Logging level")
    log_file: Optional[str] = Field(None, description="JSON-lines log file")
    max_workers: int = Field(default=4, description="Worker lanes for draws and chains")
    write_traces: bool = Field(default=False, description="Write Langevin kernel traces")

    @field_validator("max_workers")
    @classmethod
    def _positive_workers(cls, value: int) -> int:
        if value < 1:
            raise ValueError("max_workers must be >= 1")
        return value


class TaskConfig(BaseModel):
    """Data source for the training (and optional test) set"""

    source: str = Field(default="synthetic", description="synthetic or idx")
    p: int = Field(default=6, description="Training samples")
    p_test: int = Field(default=0, description="Test samples")
    input_dim: int = Field(default=8, description="Input dimension n_0 (channels for CNN tasks)")
    teacher: str = Field(
        default="random-linear", description="random-linear, random-rotation or prescribed"
    )
    target_gram: Optional[List[List[float]]] = Field(None, description="Prescribed G_yy")
    images_path: Optional[str] = Field(None, description="IDX image file")
    labels_path: Optional[str] = Field(None, description="IDX label file")
    downsample_to: int = Field(default=10, description="Square side after downsampling")
    ordering: str = Field(default="class", description="class or file ordering of IDX samples")
    layout: str = Field(default="flat", description="flat, row-channels or single-channel")

    @model_validator(mode="after")
    def _check_task(self) -> "TaskConfig":
        if self.source not in ("synthetic", "idx"):
            raise ValueError(f"unknown task source {self.source!r}")
        if self.teacher not in ("random-linear", "random-rotation", "prescribed"):
            raise ValueError(f"unknown teacher {self.teacher!r}")
        if self.teacher == "prescribed" and self.target_gram is None:
            raise ValueError("prescribed teacher requires target_gram")
        if self.source == "idx" and not (self.images_path and self.labels_path):
            raise ValueError("idx tasks require images_path and labels_path")
        if self.p < 1 or self.p_test < 0 or self.input_dim < 1:
            raise ValueError("p >= 1, p_test >= 0 and input_dim >= 1 required")
        if self.layout not in ("flat", "row-channels", "single-channel"):
            raise ValueError(f"unknown layout {self.layout!r}")
        return self


class ArchitectureConfig(BaseModel):
    """Network family and everything except the hidden widths"""

    architecture: Architecture = Field(default=Architecture.MLP_LINEAR, description="Family")
    output_width: int = Field(default=2, description="Readout width n_d")
    prior_variances: List[float] = Field(
        default_factory=lambda: [1.0, 1.0, 1.0], description="sigma_1^2..sigma_d^2"
    )
    activation: ActivationSpec = Field(default_factory=ActivationSpec, description="Activation")
    spatial_shape: Optional[List[int]] = Field(None, description="CNN spatial extents")
    filters: Optional[List[FilterSpec]] = Field(None, description="CNN filters")
    padding: str = Field(default="circular", description="CNN boundary condition")
    readout: ReadoutStrategy = Field(default=ReadoutStrategy.VECTORIZATION, description="CNN readout")
    readout_vector: Optional[List[float]] = Field(None, description="Projection vector u")
    skip_edges: Optional[List[SkipEdge]] = Field(None, description="Skip-connection edges")

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @property
    def depth(self) -> int:
        return len(self.prior_variances)

    def network(self, hidden_widths: List[int]) -> NetworkConfig:
        profile = WidthProfile(
            hidden_widths=list(hidden_widths),
            output_width=self.output_width,
            prior_variances=list(self.prior_variances),
        )
        skip = None
        if self.skip_edges is not None:
            skip = SkipConnectivity(depth=self.depth, edges=list(self.skip_edges))
        return NetworkConfig(
            architecture=self.architecture,
            profile=profile,
            activation=self.activation,
            spatial_shape=self.spatial_shape,
            filters=self.filters,
            padding=self.padding,
            readout=self.readout,
            readout_vector=self.readout_vector,
            skip=skip,
        )


class TemperatureConfig(BaseModel):
    """Inverse temperature of the likelihood"""

    beta: float = Field(default=1.0, description="Inverse temperature (inf for the limit mode)")

    def params(self, profile: WidthProfile) -> TemperatureParams:
        return TemperatureParams.for_profile(self.beta, profile)


class AcceptanceCheck(BaseModel):
    """Declarative acceptance check evaluated after the sweep"""

    name: str = Field(..., description="Check identifier")
    kind: str = Field(
        ..., description="theory_slope, empirical_slope, relative_error, layer_ratio or within_se"
    )
    estimator: EstimatorKind = Field(default=EstimatorKind.IMPORTANCE, description="Empirical column")
    layer: int = Field(default=1, description="Hidden layer")
    width: Optional[int] = Field(None, description="First hidden width selecting the cell")
    target: float = Field(default=0.0, description="Expected value")
    tolerance: float = Field(default=0.15, description="Allowed absolute deviation (relative for ratios)")

    @field_validator("kind")
    @classmethod
    def _known_kind(cls, kind: str) -> str:
        known = ("theory_slope", "empirical_slope", "relative_error", "layer_ratio", "within_se")
        if kind not in known:
            raise ValueError(f"unknown acceptance kind {kind!r}")
        return kind


class AcceptanceConfig(BaseModel):
    checks: List[AcceptanceCheck] = Field(default_factory=list, description="Checks to evaluate")


class ExperimentConfig(BaseModel):
    """Main experiment configuration"""

    name: str = Field(default="deep-linear-desk", description="Experiment name")
    seed: int = Field(default=0, description="Base seed (64-bit)")

    task: TaskConfig = Field(default_factory=TaskConfig)
    architecture: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    temperature: TemperatureConfig = Field(default_factory=TemperatureConfig)
    width_sweep: List[List[int]] = Field(
        default_factory=lambda: [[64, 64], [128, 128], [256, 256], [512, 512]],
        description="Hidden-width profiles to evaluate (an integer means equal widths)",
    )
    estimators: List[EstimatorKind] = Field(
        default_factory=lambda: [EstimatorKind.THEORY, EstimatorKind.IMPORTANCE],
        description="Estimators to run",
    )

    theory: TheoryEstimatorConfig = Field(default_factory=TheoryEstimatorConfig)
    importance: ImportanceEstimatorConfig = Field(default_factory=ImportanceEstimatorConfig)
    langevin: LangevinEstimatorConfig = Field(default_factory=LangevinEstimatorConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    acceptance: AcceptanceConfig = Field(default_factory=AcceptanceConfig)
    orchestrator: OrchestratorConfig = Field(default_factory=OrchestratorConfig)

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "name": "deep-linear-desk",
                "seed": 0,
                "task": {"source": "synthetic", "p": 6, "input_dim": 8},
                "architecture": {"architecture": "mlp-linear", "output_width": 2},
                "temperature": {"beta": 1.0},
                "width_sweep": [[64, 64], [512, 512]],
                "estimators": ["theory", "importance"],
            }
        }
    )

    @field_validator("width_sweep", mode="before")
    @classmethod
    def _expand_widths(cls, sweep: Any) -> Any:
        if isinstance(sweep, list):
            return [entry if isinstance(entry, list) else [entry] for entry in sweep]
        return sweep

    @model_validator(mode="after")
    def _check_experiment(self) -> "ExperimentConfig":
        if not self.estimators:
            raise ValueError("at least one estimator is required")
        if not self.width_sweep:
            raise ValueError("width sweep must not be empty")
        hidden = self.architecture.depth - 1
        expanded = []
        for widths in self.width_sweep:
            if len(widths) == 1 and hidden > 1:
                widths = widths * hidden
            if len(widths) != hidden:
                raise ValueError(f"width profile {widths} does not have {hidden} hidden layers")
            expanded.append(widths)
        self.width_sweep = expanded
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")
        # every profile must build a consistent network
        for widths in self.width_sweep:
            self.architecture.network(widths)
        return self

    def networks(self) -> List[NetworkConfig]:
        return [self.architecture.network(widths) for widths in self.width_sweep]


class EnvironmentConfig(BaseModel):
    """Environment-specific configuration"""

    environment: str = Field(default="development", description="Environment name")
    debug_mode: bool = Field(default=False, description="Enable debug mode")
    log_level: Optional[str] = Field(None, description="Log level override")
    log_file: Optional[str] = Field(None, description="Log file path")
    output_directory: Optional[str] = Field(None, description="Output directory override")
    max_workers: Optional[int] = Field(None, description="Worker lane override")


def _strip_comment(line: str) -> str:
    for index, char in enumerate(line):
        if char == "#" and (index == 0 or line[index - 1].isspace()):
            return line[:index]
    return line


def parse_flat_config(text: str) -> Dict[str, Any]:
    """
    Parse the flat dotted key-value format into nested sections

    Args:
        text: lines of the form ``section.key = value`` (values are YAML scalars or
            flow collections, ``#`` starts a comment)

    Returns:
        Nested dictionary ready for ExperimentConfig validation
    """
    tree: Dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected 'key = value', got {raw.strip()!r}")
        key, value_text = (part.strip() for part in line.split("=", 1))
        if not key or any(not part for part in key.split(".")):
            raise ConfigError(f"line {number}: malformed key {key!r}")
        try:
            value = yaml.safe_load(value_text) if value_text else None
        except yaml.YAMLError as exc:
            raise ConfigError(f"line {number}: cannot parse value for {key}: {exc}") from exc
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"line {number}: {part} is both a value and a section")
            node = child
        if parts[-1] in node:
            raise ConfigError(f"line {number}: duplicate key {key}")
        node[parts[-1]] = value
    return tree


def load_config(config_path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """
    Load configuration from file or use defaults

    Args:
        config_path: YAML file (.yaml/.yml) or flat dotted key-value file

    Returns:
        ExperimentConfig instance
    """
    if not config_path:
        return ExperimentConfig()

    path = Path(config_path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc

    if path.suffix.lower() in (".yaml", ".yml"):
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must contain a mapping at the top level")
    else:
        data = parse_flat_config(text)

    try:
        return ExperimentConfig.model_validate(data)
    except (ValidationError, ValueError) as exc:
        raise ConfigError(f"invalid configuration {path}:\n{exc}") from exc


def load_environment_config(env_path: Optional[str] = None) -> EnvironmentConfig:
    """
    Load environment configuration from a .env file or environment variables

    Args:
        env_path: Path to a .env file (default: search from the working directory)

    Returns:
        EnvironmentConfig instance
    """
    load_dotenv(env_path, override=False)

    workers = os.getenv(f"{ENV_PREFIX}MAX_WORKERS")
    try:
        max_workers = int(workers) if workers else None
    except ValueError as exc:
        raise ConfigError(f"{ENV_PREFIX}MAX_WORKERS must be an integer, got {workers!r}") from exc

    return EnvironmentConfig(
        environment=os.getenv(f"{ENV_PREFIX}ENVIRONMENT", "development"),
        debug_mode=os.getenv(f"{ENV_PREFIX}DEBUG_MODE", "false").lower() == "true",
        log_level=os.getenv(f"{ENV_PREFIX}LOG_LEVEL"),
        log_file=os.getenv(f"{ENV_PREFIX}LOG_FILE"),
        output_directory=os.getenv(f"{ENV_PREFIX}OUTPUT_DIR"),
        max_workers=max_workers,
    )


def apply_environment(config: ExperimentConfig, env: EnvironmentConfig) -> ExperimentConfig:
    """Environment values override the file, leaving unset variables alone"""
    updates: Dict[str, Any] = {}
    if env.log_level:
        updates["log_level"] = env.log_level
    if env.debug_mode:
        updates["log_level"] = "DEBUG"
    if env.log_file:
        updates["log_file"] = env.log_file
    if env.output_directory:
        updates["output_directory"] = env.output_directory
    if env.max_workers is not None:
        updates["max_workers"] = env.max_workers
    if not updates:
        return config
    orchestrator = config.orchestrator.model_copy(update=updates)
    return config.model_copy(update={"orchestrator": orchestrator})
