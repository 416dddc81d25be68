"""
Estimator configuration for experiment runs
"""

from typing import Any, Dict, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..schemas.architecture import LangevinSchedule
from ..schemas.base import EstimatorKind


class EstimatorConfig(BaseModel):
    """Configuration shared by every estimator"""

    name: EstimatorKind = Field(..., description="Estimator name")
    enabled: bool = Field(default=True, description="Whether the estimator runs")
    seed_offset: int = Field(default=0, description="Added to the experiment seed for this estimator")
    parameters: Dict[str, Any] = Field(default_factory=dict, description="Free-form extras")

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "name": "importance",
                "enabled": True,
                "seed_offset": 1,
                "parameters": {},
            }
        }
    )


class TheoryEstimatorConfig(EstimatorConfig):
    """Analytic corrections"""

    name: EstimatorKind = Field(default=EstimatorKind.THEORY, description="Estimator name")
    cnn_mode: str = Field(
        default="propagated", description="CNN covariance mode: closed-form or propagated"
    )
    qmc_points: int = Field(default=2**18, description="Quasi-Monte-Carlo points for non-polynomial kernels")
    skip_oracle_draws: int = Field(
        default=100_000, description="Prior draws for the skip-connection Monte-Carlo correction"
    )

    @model_validator(mode="after")
    def _check_mode(self) -> "TheoryEstimatorConfig":
        if self.cnn_mode not in ("closed-form", "propagated"):
            raise ValueError(f"unknown cnn_mode {self.cnn_mode!r}")
        if self.qmc_points < 1024:
            raise ValueError("qmc_points must be at least 1024")
        return self


class ImportanceEstimatorConfig(EstimatorConfig):
    """Exact-readout importance-sampling oracle"""

    name: EstimatorKind = Field(default=EstimatorKind.IMPORTANCE, description="Estimator name")
    seed_offset: int = Field(default=1, description="Added to the experiment seed")
    n_draws: int = Field(default=1_000_000, description="Prior draws per width profile")
    block_size: int = Field(default=4096, description="Draws per RNG block")
    ess_threshold: float = Field(default=100.0, description="ESS below which estimates are flagged")
    predictor: bool = Field(default=True, description="Also estimate predictor statistics")

    @model_validator(mode="after")
    def _check_draws(self) -> "ImportanceEstimatorConfig":
        if self.n_draws < 1 or self.block_size < 1:
            raise ValueError("n_draws and block_size must be positive")
        return self


class LangevinEstimatorConfig(EstimatorConfig):
    """Euler-Maruyama Langevin posterior sampler"""

    name: EstimatorKind = Field(default=EstimatorKind.LANGEVIN, description="Estimator name")
    seed_offset: int = Field(default=2, description="Added to the experiment seed")
    dt: float = Field(default=1e-3, description="Step size")
    burn_in: int = Field(default=200_000, description="Burn-in steps")
    sample_steps: int = Field(default=200_000, description="Sampling steps")
    thinning: int = Field(default=10, description="Recording stride")
    chains: int = Field(default=4, description="Independent chains")
    omega: float = Field(default=-1.0, description="Weight-decay exponent, lambda(beta) = beta^omega")
    trace_directory: str = Field(
        default="traces", description="Trace stream directory, relative to the output directory"
    )

    def schedule(self, seed: int) -> LangevinSchedule:
        return LangevinSchedule(
            dt=self.dt,
            burn_in=self.burn_in,
            sample_steps=self.sample_steps,
            thinning=self.thinning,
            seed=(seed + self.seed_offset) % 2**64,
            chains=self.chains,
            omega=self.omega,
        )


class OracleConfig(BaseModel):
    """Prior-cumulant oracle used by validation and the skip-connection fallback"""

    n_draws: int = Field(default=100_000, description="Prior draws")
    block_size: int = Field(default=4096, description="Draws per RNG block")
    seed_offset: int = Field(default=3, description="Added to the experiment seed")
