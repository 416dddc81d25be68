"""
Experiment report schemas
Per-cell kernel comparisons, power-law fits and acceptance outcomes
"""

from datetime import datetime
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field

from .base import BaseEstimatorOutput


class ScatterPoint(BaseModel):
    """One kernel entry: predicted deviation against measured deviation"""

    index: str = Field(..., description="Entry label, e.g. '0,3'")
    theory: Optional[float] = Field(None, description="Predicted O(1/n) deviation")
    empirical: Optional[float] = Field(None, description="Measured deviation from K_inf")
    se: Optional[float] = Field(None, description="Standard error of the measured entry")


class LayerResult(BaseModel):
    """Deviation norms for one hidden layer of one cell"""

    layer: int = Field(..., description="Hidden layer index (1-based)")
    deviation_norm: Optional[float] = Field(None, description="||<K>_emp - K_inf||_F")
    theory_norm: Optional[float] = Field(None, description="||Delta_theory||_F")
    deviation_se: Optional[float] = Field(None, description="Standard error of the deviation norm")
    relative_error: Optional[float] = Field(
        None, description="||<K>_emp - K_inf - Delta_theory||_F / ||Delta_theory||_F"
    )
    residual_z: Optional[float] = Field(
        None, description="||<K>_emp - K_inf - Delta_theory||_F in units of its standard error"
    )
    k_inf: List[List[float]] = Field(default_factory=list, description="GP kernel (two-index view)")
    scatter: List[ScatterPoint] = Field(default_factory=list, description="Entrywise pairs")


class CellResult(BaseEstimatorOutput):
    """Outcome of one estimator at one width profile"""

    hidden_widths: List[int] = Field(..., description="Hidden widths of the cell")
    layers: List[LayerResult] = Field(default_factory=list, description="Per-layer results")
    effective_sample_size: Optional[float] = Field(None, description="ESS of the estimate")
    unreliable: bool = Field(default=False, description="ESS below the reliability threshold")
    predictor: Dict[str, Any] = Field(default_factory=dict, description="Predictor statistics")


class ScalingFit(BaseModel):
    """Log-log least-squares fit of a deviation norm against width"""

    estimator: str = Field(..., description="Column the fit was made on")
    layer: int = Field(..., description="Hidden layer")
    slope: float = Field(..., description="Fitted exponent")
    intercept: float = Field(..., description="Fitted log intercept")
    ci_low: float = Field(..., description="Lower end of the 95% slope interval")
    ci_high: float = Field(..., description="Upper end of the 95% slope interval")
    points: int = Field(..., description="Number of widths in the fit")


class AcceptanceResult(BaseModel):
    """One configured acceptance check"""

    name: str = Field(..., description="Check identifier")
    passed: bool = Field(..., description="Whether the check holds")
    value: Optional[float] = Field(None, description="Measured quantity")
    target: Optional[float] = Field(None, description="Expected value")
    tolerance: Optional[float] = Field(None, description="Allowed deviation")
    message: str = Field(default="", description="Human-readable verdict")


class CorrectionReport(BaseModel):
    """Complete record of one experiment run"""

    experiment_name: str = Field(..., description="Configured experiment name")
    execution_id: str = Field(..., description="Unique execution identifier")
    status: str = Field(default="running", description="running, completed or failed")
    started_at: datetime = Field(default_factory=datetime.now, description="Start time")
    completed_at: Optional[datetime] = Field(None, description="Completion time")
    total_execution_time: Optional[float] = Field(None, description="Wall time in seconds")
    seed: int = Field(..., description="Base seed of the run")
    config: Dict[str, Any] = Field(default_factory=dict, description="Resolved configuration")
    cells: List[CellResult] = Field(default_factory=list, description="Per-cell results")
    fits: List[ScalingFit] = Field(default_factory=list, description="Scaling fits")
    acceptance: List[AcceptanceResult] = Field(default_factory=list, description="Checks")
    errors: List[str] = Field(default_factory=list, description="Run-level errors")
    metadata: Dict[str, Any] = Field(default_factory=dict, description="Run metadata")

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "experiment_name": "deep-linear-desk",
                "execution_id": "exec_20240101_120000",
                "status": "completed",
                "seed": 0,
            }
        }
    )

    @property
    def acceptance_passed(self) -> bool:
        return all(check.passed for check in self.acceptance)

    @property
    def diverged(self) -> bool:
        return any(cell.metadata.get("diverged") for cell in self.cells)
