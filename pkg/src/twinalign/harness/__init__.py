"""Experiment plumbing: config, file formats, metrics, plots and the CLI."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .io import load_track, read_log, write_log, write_track
from .metrics import MetricsSummary, summarize
from .plots import emit_plots

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "MetricsSummary",
    "emit_plots",
    "load_config",
    "load_track",
    "parse_config",
    "read_log",
    "summarize",
    "write_log",
    "write_track",
]
