"""
Base schemas shared by every estimator run
"""

from datetime import datetime
from enum import Enum
from typing import Any, Dict, Optional

from pydantic import BaseModel, ConfigDict, Field


class EstimatorKind(str, Enum):
    """Sources of kernel estimates"""

    THEORY = "theory"
    IMPORTANCE = "importance"
    LANGEVIN = "langevin"


class EstimatorStatus(str, Enum):
    """Status of an estimator cell"""

    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    SKIPPED = "skipped"


class BaseEstimatorOutput(BaseModel):
    """Base output schema for every estimator cell"""

    estimator: EstimatorKind = Field(..., description="Estimator that produced this output")
    execution_id: str = Field(..., description="Unique experiment execution identifier")
    status: EstimatorStatus = Field(..., description="Outcome of the cell")
    timestamp: datetime = Field(default_factory=datetime.now, description="When it was produced")
    execution_time_seconds: Optional[float] = Field(None, description="Wall time in seconds")
    error_message: Optional[str] = Field(None, description="Error message if the cell failed")
    metadata: Dict[str, Any] = Field(default_factory=dict, description="Additional metadata")

    model_config = ConfigDict(use_enum_values=False)
