"""Configuration, datasets, experiment pipelines and the command line."""

from .config import DatasetSpec, ExperimentConfig, FinetuneConfig, TheorySuiteConfig, load_config, parse_config, with_overrides
from .datasets import Dataset, load_dataset, read_idx
from .pipeline import ResultBundle, finetune, run_theory_suite, run_ticket_pipeline
from .outputs import emit_outputs
from .checks import run_checks
