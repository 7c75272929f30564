"""Experiment orchestration: configuration, episode runner, exports and the CLI."""

from .config import ConfigError, ExperimentConfig, load_config, save_config
from .export import export_metrics
from .runner import (
    ArchitectureMismatchError,
    EpisodeResult,
    Learners,
    RunLedger,
    run_baseline,
    run_episode,
    run_evaluation,
    run_training,
)

__all__ = [
    "ArchitectureMismatchError",
    "ConfigError",
    "EpisodeResult",
    "ExperimentConfig",
    "Learners",
    "RunLedger",
    "export_metrics",
    "load_config",
    "run_baseline",
    "run_episode",
    "run_evaluation",
    "run_training",
    "save_config",
]
