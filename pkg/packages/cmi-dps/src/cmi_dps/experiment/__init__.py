"""Experiment orchestration: configuration, seeded batches and diagnostics."""

from __future__ import annotations

from cmi_dps.experiment.config import ExperimentConfig, load_config
from cmi_dps.experiment.diagnostics import DiagnosticsReport, run_diagnostics
from cmi_dps.experiment.runner import ExperimentSummary, run_experiment

__all__ = [
    "DiagnosticsReport",
    "ExperimentConfig",
    "ExperimentSummary",
    "load_config",
    "run_diagnostics",
    "run_experiment",
]
