"""
Experiment runner
Command-line entry point: run, validate and inspect feature-kernel experiments
"""

import sys
from typing import Any, Dict, List, Optional

import click
import structlog
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from core.config.settings import (
    ExperimentConfig,
    apply_environment,
    load_config,
    load_environment_config,
)
from core.errors import ConfigError, FormatError
from core.orchestrator import ExperimentOrchestrator
from core.schemas.base import EstimatorKind
from core.schemas.report import CorrectionReport
from core.tools.logging_utils import configure_logging
from core.tools.validation_utils import ValidationUtils
from estimators.trace_stream import summarize_trace

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_ACCEPTANCE = 3
EXIT_DIVERGENCE = 4

console = Console()
logger = structlog.get_logger(__name__)


def _parse_estimators(value: str) -> List[EstimatorKind]:
    names = [name.strip() for name in value.split(",") if name.strip()]
    try:
        return [EstimatorKind(name) for name in names]
    except ValueError as exc:
        known = ", ".join(kind.value for kind in EstimatorKind)
        raise ConfigError(f"unknown estimator in {value!r}; choose from {known}") from exc


def resolve_config(
    config_path: str,
    out: Optional[str] = None,
    seed: Optional[int] = None,
    estimators: Optional[str] = None,
    workers: Optional[int] = None,
) -> ExperimentConfig:
    """
    Load a configuration and apply overrides: file, then environment, then flags

    Raises:
        ConfigError: unreadable, invalid or inconsistent configuration
    """
    config = apply_environment(load_config(config_path), load_environment_config())
    data: Dict[str, Any] = config.model_dump(mode="python")
    if out is not None:
        data["orchestrator"]["output_directory"] = out
    if seed is not None:
        data["seed"] = seed
    if estimators is not None:
        data["estimators"] = _parse_estimators(estimators)
    if workers is not None:
        data["orchestrator"]["max_workers"] = workers
    try:
        config = ExperimentConfig.model_validate(data)
    except (ValidationError, ValueError) as exc:
        raise ConfigError(f"invalid overrides:\n{exc}") from exc

    errors = ValidationUtils.validate_experiment(config)
    if errors:
        raise ConfigError("configuration failed dry-run checks:\n  " + "\n  ".join(errors))
    return config


def exit_code(report: CorrectionReport) -> int:
    """Divergence outranks acceptance failures"""
    if report.status == "failed":
        return EXIT_FAILED
    if report.diverged:
        return EXIT_DIVERGENCE
    if not report.acceptance_passed:
        return EXIT_ACCEPTANCE
    return EXIT_OK


def _summary_tables(report: CorrectionReport) -> List[Table]:
    fits = Table(title=f"Scaling fits: {report.experiment_name}")
    fits.add_column("Estimator")
    fits.add_column("Layer", justify="right")
    fits.add_column("Slope", justify="right")
    fits.add_column("95% CI", justify="right")
    fits.add_column("Widths", justify="right")
    for fit in report.fits:
        fits.add_row(
            fit.estimator,
            str(fit.layer),
            f"{fit.slope:.4f}",
            f"[{fit.ci_low:.4f}, {fit.ci_high:.4f}]",
            str(fit.points),
        )

    checks = Table(title="Acceptance checks")
    checks.add_column("Check")
    checks.add_column("Result")
    checks.add_column("Detail")
    for check in report.acceptance:
        verdict = "[green]pass[/green]" if check.passed else "[red]fail[/red]"
        checks.add_row(check.name, verdict, check.message)

    failures = Table(title="Failed cells")
    failures.add_column("Estimator")
    failures.add_column("Widths")
    failures.add_column("Error")
    for cell in report.cells:
        if cell.error_message:
            widths = "x".join(str(w) for w in cell.hidden_widths)
            failures.add_row(cell.estimator.value, widths, cell.error_message)

    tables = [fits]
    if report.acceptance:
        tables.append(checks)
    if failures.row_count:
        tables.append(failures)
    return tables


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging")
@click.pass_context
def cli(ctx: click.Context, verbose: bool) -> None:
    """Finite-width feature-kernel experiments"""
    ctx.ensure_object(dict)
    ctx.obj["verbose"] = verbose


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--out", "out", default=None, help="Output directory (overrides the config)")
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="Base seed")
@click.option("--estimators", default=None, help="Comma-separated: theory,importance,langevin")
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Worker lanes")
@click.option("--execution-id", default=None, help="Execution ID (generated if omitted)")
@click.pass_context
def run(
    ctx: click.Context,
    config_path: str,
    out: Optional[str],
    seed: Optional[int],
    estimators: Optional[str],
    workers: Optional[int],
    execution_id: Optional[str],
) -> None:
    """Run the experiment in CONFIG_PATH and write report.json, scatter.csv and scaling.csv"""
    try:
        config = resolve_config(config_path, out, seed, estimators, workers)
    except ConfigError as exc:
        console.print(f"[red]Configuration error:[/red] {exc}")
        sys.exit(EXIT_CONFIG)
    if execution_id is not None and not ValidationUtils.validate_execution_id(execution_id):
        console.print(f"[red]Invalid execution id:[/red] {execution_id}")
        sys.exit(EXIT_CONFIG)

    settings = config.orchestrator
    configure_logging("DEBUG" if ctx.obj.get("verbose") else settings.log_level, settings.log_file)
    logger.info(
        "configuration resolved",
        path=config_path,
        estimators=[kind.value for kind in config.estimators],
        widths=config.width_sweep,
    )

    orchestrator = ExperimentOrchestrator(config)
    report = orchestrator.run_experiment(execution_id)
    paths = orchestrator.write_outputs(report)

    for table in _summary_tables(report):
        console.print(table)
    console.print(f"Execution ID: {report.execution_id}")
    console.print(f"Status: {report.status}")
    if report.total_execution_time is not None:
        console.print(f"Execution time: {report.total_execution_time:.2f} seconds")
    console.print(f"Report: {paths['report']}")
    for error in report.errors:
        console.print(f"[red]Error:[/red] {error}")
    sys.exit(exit_code(report))


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--estimators", default=None, help="Comma-separated: theory,importance,langevin")
def validate(config_path: str, estimators: Optional[str]) -> None:
    """Parse CONFIG_PATH and run dry-run shape checks without computing anything"""
    try:
        config = resolve_config(config_path, estimators=estimators)
    except ConfigError as exc:
        console.print(f"[red]Configuration error:[/red] {exc}")
        sys.exit(EXIT_CONFIG)

    table = Table(title=f"Experiment {config.name}")
    table.add_column("Setting")
    table.add_column("Value")
    table.add_row("architecture", config.architecture.architecture.value)
    table.add_row("depth", str(config.architecture.depth))
    table.add_row("task", f"{config.task.source} (p={config.task.p}, p_test={config.task.p_test})")
    table.add_row("beta", f"{config.temperature.beta:g}")
    table.add_row("width sweep", "; ".join("x".join(map(str, w)) for w in config.width_sweep))
    table.add_row("estimators", ", ".join(kind.value for kind in config.estimators))
    table.add_row("acceptance checks", str(len(config.acceptance.checks)))
    console.print(table)
    console.print("[green]Configuration valid[/green]")


@cli.command()
@click.argument("trace_path", type=click.Path(exists=True, dir_okay=False))
def trace(trace_path: str) -> None:
    """Summarize a binary Langevin trace: sample counts and per-layer mean kernels"""
    try:
        summary = summarize_trace(trace_path)
    except FormatError as exc:
        console.print(f"[red]Malformed trace:[/red] {exc}")
        sys.exit(EXIT_FAILED)

    console.print(f"Frames: {summary.frames}  Chains: {', '.join(map(str, summary.chains))}")
    table = Table(title="Mean kernels")
    table.add_column("Layer", justify="right")
    table.add_column("Shape")
    table.add_column("Frobenius norm", justify="right")
    table.add_column("Mean diagonal", justify="right")
    for layer, kernel in enumerate(summary.mean_kernels, start=1):
        diagonal = kernel.diagonal() if kernel.ndim == 2 else kernel.diagonal().diagonal()
        table.add_row(
            str(layer),
            "x".join(map(str, kernel.shape)),
            f"{float((kernel**2).sum()) ** 0.5:.6g}",
            f"{float(diagonal.mean()):.6g}",
        )
    console.print(table)


def main() -> None:
    """Main entry point for command-line execution"""
    cli(obj={})


if __name__ == "__main__":
    main()
