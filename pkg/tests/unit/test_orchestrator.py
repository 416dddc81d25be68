"""
Unit tests for the experiment orchestrator
"""

import json

import pandas as pd
import pytest

from core.config.settings import ExperimentConfig
from core.errors import DivergenceError
from core.orchestrator import ExperimentOrchestrator
from core.schemas.base import EstimatorKind, EstimatorStatus
from estimators.trace_stream import read_trace


def _config(tmp_path, **updates):
    data = {
        "name": "unit-sweep",
        "seed": 3,
        "task": {"source": "synthetic", "p": 3, "p_test": 2, "input_dim": 4},
        "architecture": {"output_width": 2, "prior_variances": [1.0, 1.0, 1.0]},
        "temperature": {"beta": 1.0},
        "width_sweep": [[16, 16], [32, 32], [64, 64]],
        "estimators": ["theory"],
        "orchestrator": {"output_directory": str(tmp_path), "max_workers": 1},
    }
    data.update(updates)
    return ExperimentConfig.model_validate(data)


class TestExperimentOrchestrator:
    """Test cases for ExperimentOrchestrator"""

    def test_theory_sweep(self, tmp_path):
        """Analytic deviations scale as 1/n with the layer ratio of the width factors"""
        checks = [
            {"name": "slope", "kind": "theory_slope", "layer": 1, "target": -1.0, "tolerance": 1e-6},
            {
                "name": "ratio",
                "kind": "layer_ratio",
                "estimator": "theory",
                "layer": 2,
                "target": 2.0,
                "tolerance": 1e-6,
            },
        ]
        orchestrator = ExperimentOrchestrator(_config(tmp_path, acceptance={"checks": checks}))
        report = orchestrator.run_experiment("unit_run")

        assert report.status == "completed"
        assert len(report.cells) == 3
        assert all(cell.status == EstimatorStatus.COMPLETED for cell in report.cells)
        assert {(fit.estimator, fit.layer) for fit in report.fits} == {("theory", 1), ("theory", 2)}
        assert report.fits[0].slope == pytest.approx(-1.0, abs=1e-8)
        assert report.acceptance_passed
        assert report.cells[0].predictor["mean"]
        assert report.metadata["task"]["p_test"] == 2

    def test_failed_check(self, tmp_path):
        """Checks outside tolerance fail the report"""
        checks = [{"name": "off", "kind": "theory_slope", "layer": 1, "target": -2.0, "tolerance": 0.1}]
        report = ExperimentOrchestrator(
            _config(tmp_path, acceptance={"checks": checks})
        ).run_experiment()
        assert not report.acceptance_passed
        assert "failed" in report.acceptance[0].message

    def test_outputs(self, tmp_path):
        """Report, scatter and scaling files are written"""
        config = _config(
            tmp_path,
            estimators=["theory", "importance"],
            importance={"n_draws": 2000, "block_size": 1000},
        )
        orchestrator = ExperimentOrchestrator(config)
        report = orchestrator.run_experiment("unit_outputs")
        paths = orchestrator.write_outputs(report)

        saved = json.loads(paths["report"].read_text())
        assert saved["execution_id"] == "unit_outputs"
        assert len(saved["cells"]) == 6

        scaling = pd.read_csv(paths["scaling"])
        assert set(scaling["estimator"]) == {"theory", "importance"}
        assert len(scaling) == 12

        scatter = pd.read_csv(paths["scatter"])
        # six upper-triangle entries per layer, two layers, three widths
        assert len(scatter[scatter["estimator"] == "importance"]) == 36

        importance = [c for c in report.cells if c.estimator == EstimatorKind.IMPORTANCE]
        assert all(c.effective_sample_size and c.effective_sample_size > 0 for c in importance)
        assert all(c.layers[0].relative_error is not None for c in importance)

    def test_deep_relu_has_no_correction(self, tmp_path):
        """Deep nonlinear networks keep their GP kernels but fail the theory cell"""
        config = _config(
            tmp_path,
            architecture={
                "architecture": "mlp-relu",
                "output_width": 2,
                "prior_variances": [2.0, 2.0, 2.0, 1.0],
            },
            width_sweep=[[8, 8, 8]],
            theory={"qmc_points": 1024},
        )
        report = ExperimentOrchestrator(config).run_experiment()
        cell = report.cells[0]
        assert cell.status == EstimatorStatus.FAILED
        assert "closed-form" in cell.error_message

    def test_langevin_traces(self, tmp_path):
        """Langevin cells write their trace stream under the output directory"""
        config = _config(
            tmp_path,
            width_sweep=[[4, 4]],
            estimators=["langevin"],
            langevin={"dt": 1e-3, "burn_in": 5, "sample_steps": 10, "thinning": 5, "chains": 1},
            orchestrator={
                "output_directory": str(tmp_path),
                "max_workers": 1,
                "write_traces": True,
            },
        )
        report = ExperimentOrchestrator(config).run_experiment()
        cell = report.cells[0]
        assert cell.status == EstimatorStatus.COMPLETED
        trace_path = tmp_path / "traces" / "langevin_4x4.bnns"
        assert cell.metadata["trace"] == str(trace_path)
        assert len(read_trace(trace_path)) == 2
        assert cell.predictor["mean"]

    def test_divergence_is_recorded(self, tmp_path, mocker):
        """Diverging chains mark their cell instead of aborting the sweep"""
        mocker.patch("core.orchestrator.run_chains", side_effect=DivergenceError(1, 0.5, 7))
        config = _config(
            tmp_path,
            width_sweep=[[4, 4]],
            estimators=["langevin"],
            langevin={"burn_in": 5, "sample_steps": 10, "thinning": 5, "chains": 2},
        )
        report = ExperimentOrchestrator(config).run_experiment()
        assert report.status == "completed"
        assert report.diverged
        assert report.cells[0].metadata["chain_id"] == 1
