"""Experiment orchestration: configs, result tables, SVG plots and the CLI."""
from .config import ExperimentConfig, config_from_dict, load_config
from .experiments import COMMANDS, Check, Outcome
from .tables import ResultTable, read_table, write_table
