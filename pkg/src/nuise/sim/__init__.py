"""Scenario-driven simulation, Monte-Carlo metrics, log files and the CLI."""
from .config import ConfigError, ScenarioConfig, load_config, parse_config
from .metrics import MetricsReport, run_monte_carlo
from .simulate import StepLog, TrialResult, replay, simulate_trial

__all__ = [
    "ConfigError",
    "ScenarioConfig",
    "load_config",
    "parse_config",
    "MetricsReport",
    "run_monte_carlo",
    "StepLog",
    "TrialResult",
    "replay",
    "simulate_trial",
]
