"""Tasks, configuration, training loop, cost model and command-line entry point."""

from .config import PRESETS, ConfigError, TrainConfig, load_config, parse_config_text, preset
from .runner import analyze_stream, build_stream, evaluate, train

__all__ = ["PRESETS", "ConfigError", "TrainConfig", "load_config", "parse_config_text", "preset",
           "analyze_stream", "build_stream", "evaluate", "train"]
