"""Experiment configuration, orchestration and reporting."""

from .config import ExperimentConfig, load_config
from .report import ReportRow, emit_report
from .runner import run_experiment, run_ood, sensitivity_sweep

__all__ = ["ExperimentConfig", "ReportRow", "emit_report", "load_config", "run_experiment", "run_ood", "sensitivity_sweep"]
