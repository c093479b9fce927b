"""Run configuration, checkpoints, metrics streams, plot export and the CLI."""

from commformer.harness.checkpoint import (
    FORMAT_VERSION,
    Checkpoint,
    load_checkpoint,
    restore_trainer,
    save_checkpoint,
    save_trainer,
)
from commformer.harness.config import RunConfig, load_config, parse_pairs
from commformer.harness.metrics import JsonlWriter, read_jsonl
from commformer.harness.runner import Run, build_model, build_trainer, model_from_checkpoint, run_eval
from commformer.seeding import derive_rng, derive_seed, worker_seeds

__all__ = [
    "Checkpoint",
    "FORMAT_VERSION",
    "JsonlWriter",
    "Run",
    "RunConfig",
    "build_model",
    "build_trainer",
    "derive_rng",
    "derive_seed",
    "load_checkpoint",
    "load_config",
    "model_from_checkpoint",
    "parse_pairs",
    "read_jsonl",
    "restore_trainer",
    "run_eval",
    "save_checkpoint",
    "save_trainer",
    "worker_seeds",
]
