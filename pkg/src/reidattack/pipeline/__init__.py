"""Experiment orchestration: configuration, combined attack, runs, reports and the CLI."""
from .cli import cli_main
from .config import ExperimentConfig, config_from_dict, load_config
from .experiment import ExperimentResult, run_combined_attack, run_experiment
from .report import emit_report

__all__ = ["cli_main", "ExperimentConfig", "config_from_dict", "load_config", "ExperimentResult",
           "run_combined_attack", "run_experiment", "emit_report"]
