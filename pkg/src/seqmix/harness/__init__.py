"""Tiny end-to-end training on synthetic sequence tasks."""

from .model import TinyModel, TinyModelConfig, cross_entropy, loss_and_grads, masked_accuracy
from .reference import RECALL_MAX_STEPS, RECALL_THRESHOLD, recall_config, recall_task
from .tasks import DELIM, PAD, SyntheticTask, generate_batch
from .train import LR_GRID, RunRecord, evaluate, load_weights, lr_sweep, train, write_run

__all__ = [
    "DELIM", "LR_GRID", "PAD", "RECALL_MAX_STEPS", "RECALL_THRESHOLD", "RunRecord", "SyntheticTask",
    "TinyModel", "TinyModelConfig", "cross_entropy", "evaluate", "generate_batch", "load_weights",
    "loss_and_grads", "lr_sweep", "masked_accuracy", "recall_config", "recall_task", "train",
    "write_run",
]
