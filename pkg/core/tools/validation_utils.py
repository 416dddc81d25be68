"""
Validation utilities for experiment configurations
"""

import math
import re
from pathlib import Path
from typing import List

from ..config.settings import ExperimentConfig
from ..schemas.architecture import ReadoutStrategy
from ..schemas.base import EstimatorKind

IDX_CLASSES = 10


class ValidationUtils:
    """Utility class for validation operations"""

    @staticmethod
    def validate_file_path(file_path: str) -> bool:
        """Validate if file path exists and is accessible"""
        try:
            path = Path(file_path)
            return path.exists() and path.is_file()
        except (OSError, ValueError):
            return False

    @staticmethod
    def validate_execution_id(execution_id: str) -> bool:
        """Validate execution ID format"""
        if not execution_id or not isinstance(execution_id, str):
            return False

        # Allow alphanumeric characters, underscores, and hyphens
        pattern = r"^[a-zA-Z0-9_-]+$"
        return bool(re.match(pattern, execution_id))

    @staticmethod
    def validate_experiment(config: ExperimentConfig) -> List[str]:
        """
        Dry-run shape checks that pydantic validation cannot see

        Args:
            config: Parsed experiment configuration

        Returns:
            List of validation errors (empty if valid)
        """
        errors: List[str] = []
        task = config.task
        arch = config.architecture
        kind = arch.architecture
        estimators = set(config.estimators)

        if task.source == "idx":
            sources = (("images_path", task.images_path), ("labels_path", task.labels_path))
            for label, path in sources:
                if path and not ValidationUtils.validate_file_path(path):
                    errors.append(f"task.{label} does not exist: {path}")
            if arch.output_width != IDX_CLASSES:
                errors.append(
                    f"idx tasks have {IDX_CLASSES} one-hot outputs, output_width is {arch.output_width}"
                )
            if kind.is_convolutional:
                side = task.downsample_to
                expected = {"row-channels": ([side], 1), "single-channel": ([side, side], 2)}
                if task.layout not in expected:
                    errors.append(f"{kind.value} needs layout row-channels or single-channel")
                else:
                    shape, ndim = expected[task.layout]
                    if kind.spatial_ndim != ndim or arch.spatial_shape != shape:
                        errors.append(
                            f"layout {task.layout} gives spatial shape {shape}, "
                            f"architecture declares {arch.spatial_shape}"
                        )
            elif task.layout != "flat":
                errors.append(f"layout {task.layout} needs a convolutional architecture")
        else:
            sites = math.prod(arch.spatial_shape or [1]) if kind.is_convolutional else 1
            if task.teacher == "random-rotation":
                n_0 = task.input_dim * sites
                if arch.output_width > n_0:
                    errors.append("random-rotation teachers need output_width <= input width")
            if task.teacher == "prescribed" and task.target_gram is not None:
                rows = len(task.target_gram)
                if rows != task.p or any(len(row) != task.p for row in task.target_gram):
                    errors.append(f"task.target_gram must be {task.p}x{task.p}")
                if task.p_test:
                    errors.append("prescribed teachers define training targets only; set p_test = 0")

        if EstimatorKind.IMPORTANCE in estimators and math.isinf(config.temperature.beta):
            errors.append("the importance oracle needs a finite beta")
        if config.temperature.beta < 0:
            errors.append("beta must be non-negative")
        if EstimatorKind.THEORY in estimators:
            if kind.is_convolutional and arch.readout == ReadoutStrategy.PROJECTION:
                errors.append("projection readouts have no shift-independent theory correction")
            if arch.skip_edges is not None and math.isinf(config.temperature.beta):
                errors.append("skip-connection corrections need a finite beta")
        if EstimatorKind.LANGEVIN in estimators:
            langevin = config.langevin
            if langevin.dt <= 0:
                errors.append("langevin.dt must be positive")
            if langevin.burn_in + langevin.sample_steps < langevin.thinning:
                errors.append("langevin burn_in + sample_steps must cover one thinning stride")
            if config.temperature.beta == 0 and langevin.omega != -1.0:
                errors.append("prior sampling at beta = 0 needs omega = -1")

        depth = arch.depth
        widths = {profile[0] for profile in config.width_sweep}
        for check in config.acceptance.checks:
            needed = EstimatorKind.THEORY if check.kind == "theory_slope" else check.estimator
            if needed not in estimators:
                errors.append(f"acceptance check {check.name} uses {needed.value}, which is not run")
            if not 1 <= check.layer < depth:
                errors.append(
                    f"acceptance check {check.name} names layer {check.layer} outside 1..{depth - 1}"
                )
            if check.width is not None and check.width not in widths:
                errors.append(
                    f"acceptance check {check.name} names width {check.width} outside the sweep"
                )
            if check.kind in ("theory_slope", "empirical_slope") and len(widths) < 3:
                errors.append(f"acceptance check {check.name} needs at least three widths")
        return errors
