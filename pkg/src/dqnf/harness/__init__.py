"""Experiment runner, reporting and the tabular oracle."""
from .runner import ConfigError, RunConfig, run_experiment, run_seed, train

__all__ = ["ConfigError", "RunConfig", "run_experiment", "run_seed", "train"]
