"""Experiment harness: objectives, data, configs, loops and the CLI."""

from .config import ConfigError, ExperimentConfig, load_config
from .records import ResultRecord, read_jsonl, write_jsonl

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "ResultRecord", "read_jsonl",
           "write_jsonl"]
