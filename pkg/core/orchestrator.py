"""
Experiment orchestrator
Runs the width sweep: GP kernels, analytic corrections and empirical estimates per width,
then scaling fits, acceptance checks and report files
"""

import math
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import structlog

from datasets.idx import load_idx
from datasets.preprocessing import downsample
from datasets.tasks import Task, build_task, spatial_task, synthetic_task
from estimators.importance import importance_oracle
from estimators.langevin import run_chains
from estimators.trace_stream import TraceWriter
from theory.corrections import (
    cnn_correction_delta,
    deep_linear_delta,
    single_nonlinear_correction,
    skip_correction_monte_carlo,
)
from theory.gpkernels import (
    FourIndexKernel,
    cnn_linear_gp,
    mlp_linear_gp,
    mlp_nonlinear_gp,
    single_layer_gp,
    skip_linear_gp,
)
from theory.predictor import PredictorStatistics, bias_variance, predictor_statistics

from .config.settings import AcceptanceCheck, ExperimentConfig
from .errors import DivergenceError
from .schemas.architecture import Architecture, NetworkConfig, TemperatureParams
from .schemas.base import EstimatorKind, EstimatorStatus
from .schemas.report import (
    AcceptanceResult,
    CellResult,
    CorrectionReport,
    LayerResult,
    ScalingFit,
    ScatterPoint,
)
from .tools.file_utils import FileUtils
from .tools.scaling import MIN_POINTS, fit_power_law

SCATTER_COLUMNS = ["estimator", "hidden_widths", "width", "layer", "index", "theory", "empirical", "se"]
SCALING_COLUMNS = [
    "estimator",
    "hidden_widths",
    "width",
    "layer",
    "deviation_norm",
    "deviation_se",
    "theory_norm",
    "relative_error",
]


@dataclass
class _Reference:
    """GP kernels of one width profile and, when available, the predicted deviations"""

    k_inf: List[np.ndarray]
    delta: Optional[List[np.ndarray]] = None
    error: Optional[str] = None
    predictor: Dict[str, Any] = field(default_factory=dict)


def _multiplicity(shape: Tuple[int, ...]) -> np.ndarray:
    """1 on entries equal to their own transpose, 2 elsewhere"""
    if len(shape) == 2:
        return 2.0 - np.eye(shape[0])
    p, _, s, _ = shape
    self_transposed = np.einsum("mn,ab->mnab", np.eye(p), np.eye(s))
    return 2.0 - self_transposed


def _entry_labels(shape: Tuple[int, ...]) -> List[Tuple[Tuple[int, ...], str]]:
    """Upper-triangle sample pairs (every spatial pair for four-index kernels)"""
    p = shape[0]
    labels = []
    for mu in range(p):
        for nu in range(mu, p):
            if len(shape) == 2:
                labels.append(((mu, nu), f"{mu},{nu}"))
                continue
            for a in range(shape[2]):
                for b in range(shape[3]):
                    if mu == nu and b < a:
                        continue
                    labels.append(((mu, nu, a, b), f"{mu},{nu},{a},{b}"))
    return labels


def _two_index(kernel: np.ndarray) -> List[List[float]]:
    if kernel.ndim == 4:
        kernel = FourIndexKernel.unchecked(kernel, (kernel.shape[2],)).flat()
    return np.asarray(kernel, dtype=float).tolist()


def _training_block(kernel: np.ndarray, p: int) -> np.ndarray:
    return kernel[:p, :p]


def _predictor_summary(
    mean: np.ndarray,
    covariance: Optional[np.ndarray],
    targets: Optional[np.ndarray],
    mean_se: Optional[np.ndarray] = None,
) -> Dict[str, Any]:
    summary: Dict[str, Any] = {"mean": np.asarray(mean).tolist()}
    if mean_se is not None:
        summary["mean_se"] = np.asarray(mean_se).tolist()
    if covariance is not None:
        summary["variance"] = np.einsum("mjmj->mj", covariance).tolist()
        if targets is not None:
            errors = bias_variance(PredictorStatistics(mean, covariance), targets)
            summary["bias_error"] = errors.e_b
            summary["variance_error"] = errors.e_v
    return summary


class ExperimentOrchestrator:
    """
    Orchestrates one configured experiment
    Builds the task, sweeps the width profiles and records every (width, estimator) cell
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.logger = structlog.get_logger(__name__)
        self.output_dir = Path(config.orchestrator.output_directory)

        # Execution state
        self.current_execution_id: Optional[str] = None
        self.execution_start_time: Optional[datetime] = None

    @property
    def max_workers(self) -> int:
        return self.config.orchestrator.max_workers

    def build_task(self) -> Task:
        """Synthetic Gaussian task or class-balanced IDX selection, CNN-shaped when needed"""
        task_config = self.config.task
        arch = self.config.architecture
        spatial = arch.architecture.is_convolutional
        if task_config.source == "idx":
            assert task_config.images_path is not None and task_config.labels_path is not None
            images = load_idx(task_config.images_path, expect="images")
            labels = load_idx(task_config.labels_path, expect="labels", scale=False)
            if images.shape[1] != task_config.downsample_to:
                images = downsample(images, task_config.downsample_to)
            layout = task_config.layout if spatial else None
            return build_task(
                images,
                labels,
                task_config.p,
                ordering=task_config.ordering,
                p_test=task_config.p_test,
                layout=layout,
            )

        sites = math.prod(arch.spatial_shape or [1]) if spatial else 1
        gyy = None if task_config.target_gram is None else np.asarray(task_config.target_gram)
        task = synthetic_task(
            self.config.seed,
            task_config.input_dim * sites,
            task_config.p,
            arch.output_width,
            teacher=task_config.teacher,
            gyy=gyy,
            p_test=task_config.p_test,
        )
        if spatial:
            assert arch.spatial_shape is not None
            task = spatial_task(task, arch.spatial_shape)
        return task

    def run_experiment(self, execution_id: Optional[str] = None) -> CorrectionReport:
        """
        Execute the configured width sweep

        Args:
            execution_id: Optional execution ID (generated if not provided)

        Returns:
            CorrectionReport with per-cell results, scaling fits and acceptance outcomes
        """
        if not execution_id:
            execution_id = f"exec_{datetime.now().strftime('%Y%m%d_%H%M%S')}"
        self.current_execution_id = execution_id
        self.execution_start_time = datetime.now()

        self.logger.info(
            "starting experiment", name=self.config.name, execution_id=execution_id
        )
        report = CorrectionReport(
            experiment_name=self.config.name,
            execution_id=execution_id,
            started_at=self.execution_start_time,
            seed=self.config.seed,
            config=self.config.model_dump(mode="json"),
        )

        try:
            task = self.build_task()
            report.metadata["task"] = {
                "p": task.p,
                "p_test": 0 if task.x_test is None else int(task.x_test.shape[0]),
                "n_0": task.n_0,
                "n_d": task.n_d,
                "spatial_shape": list(task.spatial_shape),
            }
            if self.config.task.source == "idx":
                report.metadata["input_sha256"] = {
                    "images": FileUtils.get_file_hash(self.config.task.images_path or ""),
                    "labels": FileUtils.get_file_hash(self.config.task.labels_path or ""),
                }

            for network in self.config.networks():
                report.cells.extend(self._run_width(network, task))

            report.fits = self._fit_scaling(report.cells)
            report.acceptance = [self._evaluate(check, report) for check in self.config.acceptance.checks]
            report.status = "completed"
            self.logger.info(
                "experiment completed",
                execution_id=execution_id,
                cells=len(report.cells),
                acceptance_passed=report.acceptance_passed,
            )

        except Exception as e:
            self.logger.error("experiment failed", error=str(e), exc_info=True)
            report.status = "failed"
            report.errors.append(str(e))

        report.completed_at = datetime.now()
        report.total_execution_time = (report.completed_at - report.started_at).total_seconds()
        return report

    def _run_width(self, network: NetworkConfig, task: Task) -> List[CellResult]:
        widths = list(network.profile.hidden_widths)
        temp = self.config.temperature.params(network.profile)
        self.logger.info("evaluating width profile", hidden_widths=widths, beta=temp.beta)
        try:
            reference = self._reference(network, task, temp)
        except Exception as e:
            self.logger.error("GP kernels failed", hidden_widths=widths, error=str(e), exc_info=True)
            return [self._failed(kind, widths, e) for kind in self.config.estimators]

        runners: Dict[EstimatorKind, Callable[[], CellResult]] = {
            EstimatorKind.THEORY: lambda: self._theory_cell(widths, reference),
            EstimatorKind.IMPORTANCE: lambda: self._importance_cell(network, task, temp, reference),
            EstimatorKind.LANGEVIN: lambda: self._langevin_cell(network, task, temp, reference),
        }
        cells = []
        for kind in self.config.estimators:
            start = time.perf_counter()
            try:
                cell = runners[kind]()
            except DivergenceError as e:
                self.logger.warning(
                    "chain diverged", hidden_widths=widths, chain=e.chain_id, dt=e.dt, step=e.step
                )
                cell = self._failed(kind, widths, e)
                cell.metadata.update({"diverged": True, "chain_id": e.chain_id, "dt": e.dt})
            except Exception as e:
                self.logger.error(
                    "estimator failed", estimator=kind.value, hidden_widths=widths, error=str(e), exc_info=True
                )
                cell = self._failed(kind, widths, e)
            cell.execution_time_seconds = time.perf_counter() - start
            cells.append(cell)
        return cells

    def _failed(self, kind: EstimatorKind, widths: List[int], error: Exception) -> CellResult:
        return CellResult(
            estimator=kind,
            execution_id=self.current_execution_id or "",
            status=EstimatorStatus.FAILED,
            error_message=str(error),
            hidden_widths=widths,
        )

    def _reference(self, network: NetworkConfig, task: Task, temp: TemperatureParams) -> _Reference:
        """GP kernels (must succeed) and analytic deviations (may fail per architecture)"""
        profile = network.profile
        arch = network.architecture
        layers = range(1, network.depth)
        theory = self.config.theory
        seed = self.config.seed
        gxx = task.gxx
        gyy = task.gyy

        if arch == Architecture.MLP_LINEAR and network.skip is not None:
            k_inf = [skip_linear_gp(gxx, network.skip, layer).entries for layer in layers]
        elif arch == Architecture.MLP_LINEAR:
            k_inf = [mlp_linear_gp(gxx, profile, layer).entries for layer in layers]
        elif arch.is_convolutional:
            tensor = task.gxx_tensor()
            k_inf = [cnn_linear_gp(tensor, network.layer_filters(), profile, layer).values for layer in layers]
        elif arch == Architecture.SINGLE_NONLINEAR:
            k_inf = [single_layer_gp(gxx, profile.variance(1), network.activation, seed=seed).entries]
        else:
            relu = network.hidden_activation()
            k_inf = [
                mlp_nonlinear_gp(gxx, profile, relu, layer, n_points=theory.qmc_points, seed=seed).entries
                for layer in layers
            ]
        reference = _Reference(k_inf=k_inf)

        try:
            reference.delta = self._theory_deltas(network, task, temp, k_inf)
        except Exception as e:
            self.logger.warning("no analytic correction", architecture=arch.value, error=str(e))
            reference.error = str(e)
            return reference

        if arch == Architecture.MLP_LINEAR and network.skip is None and task.has_test:
            try:
                stats = predictor_statistics(
                    task.x.reshape(task.p, -1), task.y, task.evaluation_set(), profile, temp
                )
                reference.predictor = _predictor_summary(stats.mean, stats.covariance, task.y_test)
            except Exception as e:
                self.logger.warning("theory predictor unavailable", error=str(e))
        return reference

    def _theory_deltas(
        self, network: NetworkConfig, task: Task, temp: TemperatureParams, k_inf: List[np.ndarray]
    ) -> List[np.ndarray]:
        profile = network.profile
        arch = network.architecture
        layers = range(1, network.depth)
        gxx, gyy = task.gxx, task.gyy
        if arch == Architecture.MLP_LINEAR and network.skip is not None:
            oracle = self.config.oracle
            return [
                skip_correction_monte_carlo(
                    network,
                    gxx,
                    gyy,
                    temp,
                    layer,
                    n_draws=self.config.theory.skip_oracle_draws,
                    seed=(self.config.seed + oracle.seed_offset) % 2**64,
                    block_size=oracle.block_size,
                    max_workers=self.max_workers,
                ).delta
                for layer in layers
            ]
        if arch == Architecture.MLP_LINEAR:
            return [deep_linear_delta(gxx, gyy, profile, temp, layer) for layer in layers]
        if arch.is_convolutional:
            tensor = task.gxx_tensor()
            return [
                cnn_correction_delta(
                    tensor,
                    gyy,
                    network.layer_filters(),
                    profile,
                    temp,
                    layer,
                    readout=network.readout,
                    mode=self.config.theory.cnn_mode,
                )
                for layer in layers
            ]
        if network.depth == 2:
            corrected = single_nonlinear_correction(
                gxx,
                gyy,
                profile.variance(1),
                network.hidden_activation(),
                temp,
                (profile.width(1), profile.output_width),
                seed=self.config.seed,
            )
            return [corrected.entries - k_inf[0]]
        raise NotImplementedError("deep nonlinear networks have no closed-form correction")

    def _theory_cell(self, widths: List[int], reference: _Reference) -> CellResult:
        if reference.delta is None:
            raise RuntimeError(reference.error or "no analytic correction")
        layers = [
            LayerResult(
                layer=index,
                theory_norm=float(np.linalg.norm(delta)),
                k_inf=_two_index(k_inf),
            )
            for index, (k_inf, delta) in enumerate(zip(reference.k_inf, reference.delta), start=1)
        ]
        return CellResult(
            estimator=EstimatorKind.THEORY,
            execution_id=self.current_execution_id or "",
            status=EstimatorStatus.COMPLETED,
            hidden_widths=widths,
            layers=layers,
            predictor=reference.predictor,
        )

    def _compare(
        self, layer: int, mean: np.ndarray, se: np.ndarray, reference: _Reference
    ) -> LayerResult:
        """Deviation of an empirical mean kernel from K_inf against the predicted deviation"""
        k_inf = reference.k_inf[layer - 1]
        delta = None if reference.delta is None else reference.delta[layer - 1]
        deviation = mean - k_inf
        norm = float(np.linalg.norm(deviation))
        weights = _multiplicity(deviation.shape)
        deviation_se = (
            float(np.sqrt(np.sum(weights * deviation**2 * se**2))) / norm if norm > 0 else 0.0
        )
        residual = deviation if delta is None else deviation - delta
        noise = float(np.sqrt(np.sum(se**2)))
        result = LayerResult(
            layer=layer,
            deviation_norm=norm,
            deviation_se=deviation_se,
            residual_z=float(np.linalg.norm(residual)) / noise if noise > 0 else None,
            k_inf=_two_index(k_inf),
        )
        if delta is not None:
            theory_norm = float(np.linalg.norm(delta))
            result.theory_norm = theory_norm
            if theory_norm > 0:
                result.relative_error = float(np.linalg.norm(residual)) / theory_norm
        result.scatter = [
            ScatterPoint(
                index=label,
                theory=None if delta is None else float(delta[entry]),
                empirical=float(deviation[entry]),
                se=float(se[entry]),
            )
            for entry, label in _entry_labels(deviation.shape)
        ]
        return result

    def _importance_cell(
        self, network: NetworkConfig, task: Task, temp: TemperatureParams, reference: _Reference
    ) -> CellResult:
        settings = self.config.importance
        predict = settings.predictor and task.has_test
        estimate = importance_oracle(
            network,
            task.input_kernel(include_test=predict),
            task.y,
            temp,
            settings.n_draws,
            (self.config.seed + settings.seed_offset) % 2**64,
            block_size=settings.block_size,
            max_workers=self.max_workers,
            ess_threshold=settings.ess_threshold,
        )
        layers = [
            self._compare(
                layer,
                _training_block(estimate.kernel(layer), task.p),
                _training_block(estimate.kernel_se(layer), task.p),
                reference,
            )
            for layer in range(1, network.depth)
        ]
        predictor: Dict[str, Any] = {}
        if estimate.predictor_mean is not None:
            predictor = _predictor_summary(
                estimate.predictor_mean.mean,
                estimate.predictor_covariance,
                task.y_test,
                estimate.predictor_mean.standard_error,
            )
        return CellResult(
            estimator=EstimatorKind.IMPORTANCE,
            execution_id=self.current_execution_id or "",
            status=EstimatorStatus.COMPLETED,
            hidden_widths=list(network.profile.hidden_widths),
            layers=layers,
            effective_sample_size=estimate.effective_sample_size,
            unreliable=estimate.unreliable,
            predictor=predictor,
            metadata={
                "n_draws": estimate.n_draws,
                "log_evidence": estimate.log_evidence,
                "warnings": list(estimate.warnings),
            },
        )

    def _langevin_cell(
        self, network: NetworkConfig, task: Task, temp: TemperatureParams, reference: _Reference
    ) -> CellResult:
        settings = self.config.langevin
        write_traces = self.config.orchestrator.write_traces
        estimate = run_chains(
            network,
            task.x,
            task.y,
            temp,
            settings.schedule(self.config.seed),
            x_test=task.x_test if task.has_test else None,
            max_workers=self.max_workers,
            keep_trace=write_traces,
        )
        metadata: Dict[str, Any] = dict(estimate.metadata)
        metadata.update({"samples": estimate.samples, "chains": estimate.chains})
        if write_traces:
            name = "langevin_" + "x".join(str(w) for w in network.profile.hidden_widths) + ".bnns"
            path = self.output_dir / settings.trace_directory / FileUtils.sanitize_filename(name)
            with TraceWriter(path) as writer:
                writer.write_all(estimate.trace)
            metadata["trace"] = str(path)
        layers = [
            self._compare(layer, estimate.kernel(layer), estimate.kernel_se(layer), reference)
            for layer in range(1, network.depth)
        ]
        predictor: Dict[str, Any] = {}
        if estimate.predictor_mean is not None:
            predictor = _predictor_summary(
                estimate.predictor_mean,
                estimate.predictor_covariance,
                task.y_test,
                estimate.predictor_mean_se,
            )
        return CellResult(
            estimator=EstimatorKind.LANGEVIN,
            execution_id=self.current_execution_id or "",
            status=EstimatorStatus.COMPLETED,
            hidden_widths=list(network.profile.hidden_widths),
            layers=layers,
            effective_sample_size=estimate.effective_sample_size,
            predictor=predictor,
            metadata=metadata,
        )

    @staticmethod
    def _norm(cell: CellResult, layer: LayerResult) -> Optional[float]:
        if cell.estimator == EstimatorKind.THEORY:
            return layer.theory_norm
        return layer.deviation_norm

    def _fit_scaling(self, cells: List[CellResult]) -> List[ScalingFit]:
        """Log-log fits of each (estimator, layer) column against the first hidden width"""
        columns: Dict[Tuple[EstimatorKind, int], List[Tuple[float, float]]] = {}
        for cell in cells:
            if cell.status != EstimatorStatus.COMPLETED:
                continue
            for layer in cell.layers:
                value = self._norm(cell, layer)
                if value is None or not np.isfinite(value) or value <= 0:
                    continue
                key = (cell.estimator, layer.layer)
                columns.setdefault(key, []).append((float(cell.hidden_widths[0]), value))

        fits = []
        for (kind, layer), points in columns.items():
            if len({n for n, _ in points}) < MIN_POINTS:
                continue
            fit = fit_power_law(points)
            fits.append(
                ScalingFit(
                    estimator=kind.value,
                    layer=layer,
                    slope=fit.slope,
                    intercept=fit.intercept,
                    ci_low=fit.ci_low,
                    ci_high=fit.ci_high,
                    points=fit.points,
                )
            )
            self.logger.info("scaling fit", estimator=kind.value, layer=layer, slope=round(fit.slope, 4))
        return fits

    def _select_cell(self, report: CorrectionReport, check: AcceptanceCheck) -> Optional[CellResult]:
        estimator = EstimatorKind.THEORY if check.kind == "theory_slope" else check.estimator
        candidates = [
            cell
            for cell in report.cells
            if cell.estimator == estimator and cell.status == EstimatorStatus.COMPLETED
        ]
        if check.width is not None:
            candidates = [cell for cell in candidates if cell.hidden_widths[0] == check.width]
        return max(candidates, key=lambda cell: cell.hidden_widths[0], default=None)

    def _measure(self, check: AcceptanceCheck, report: CorrectionReport) -> Optional[float]:
        if check.kind in ("theory_slope", "empirical_slope"):
            estimator = "theory" if check.kind == "theory_slope" else check.estimator.value
            for fit in report.fits:
                if fit.estimator == estimator and fit.layer == check.layer:
                    return fit.slope
            return None
        cell = self._select_cell(report, check)
        if cell is None:
            return None
        by_layer = {layer.layer: layer for layer in cell.layers}
        if check.layer not in by_layer:
            return None
        layer = by_layer[check.layer]
        if check.kind == "relative_error":
            return layer.relative_error
        if check.kind == "within_se":
            return layer.residual_z
        numerator = self._norm(cell, layer)
        denominator = self._norm(cell, by_layer[1]) if 1 in by_layer else None
        if numerator is None or not denominator:
            return None
        return numerator / denominator

    def _evaluate(self, check: AcceptanceCheck, report: CorrectionReport) -> AcceptanceResult:
        """Pass when |value - target| <= tolerance (relative to the target for layer ratios)"""
        value = self._measure(check, report)
        allowed = check.tolerance * abs(check.target) if check.kind == "layer_ratio" else check.tolerance
        if value is None or not np.isfinite(value):
            passed = False
            message = f"{check.name}: no {check.kind} value available"
        else:
            passed = abs(value - check.target) <= allowed
            verdict = "passed" if passed else "failed"
            message = f"{check.name} {verdict}: {value:.6g} vs {check.target:g} +/- {allowed:g}"
        log = self.logger.info if passed else self.logger.warning
        log("acceptance check", name=check.name, passed=passed, value=value)
        return AcceptanceResult(
            name=check.name,
            passed=passed,
            value=value,
            target=check.target,
            tolerance=check.tolerance,
            message=message,
        )

    def write_outputs(self, report: CorrectionReport) -> Dict[str, Path]:
        """Write report.json, scatter.csv and scaling.csv to the output directory"""
        FileUtils.ensure_directory(self.output_dir)
        scatter_rows = []
        scaling_rows = []
        for cell in report.cells:
            if cell.status != EstimatorStatus.COMPLETED:
                continue
            widths = "x".join(str(w) for w in cell.hidden_widths)
            for layer in cell.layers:
                scaling_rows.append(
                    {
                        "estimator": cell.estimator.value,
                        "hidden_widths": widths,
                        "width": cell.hidden_widths[0],
                        "layer": layer.layer,
                        "deviation_norm": self._norm(cell, layer),
                        "deviation_se": layer.deviation_se,
                        "theory_norm": layer.theory_norm,
                        "relative_error": layer.relative_error,
                    }
                )
                for point in layer.scatter:
                    scatter_rows.append(
                        {
                            "estimator": cell.estimator.value,
                            "hidden_widths": widths,
                            "width": cell.hidden_widths[0],
                            "layer": layer.layer,
                            "index": point.index,
                            "theory": point.theory,
                            "empirical": point.empirical,
                            "se": point.se,
                        }
                    )
        paths = {
            "report": FileUtils.write_json(report, self.output_dir / "report.json"),
            "scatter": FileUtils.write_csv(scatter_rows, self.output_dir / "scatter.csv", SCATTER_COLUMNS),
            "scaling": FileUtils.write_csv(scaling_rows, self.output_dir / "scaling.csv", SCALING_COLUMNS),
        }
        self.logger.info("results saved", directory=str(self.output_dir))
        return paths
