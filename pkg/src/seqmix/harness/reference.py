"""The documented associative-recall configuration and its pass threshold.

The first converged run of this config (seed 0) jumped from 0.28 to above
0.99 eval accuracy at step 600 of 2000, in about two minutes on one core;
seed 1 crossed 0.9 at step 700. The threshold below is the one the acceptance test asserts.
"""

from .model import TinyModelConfig
from .tasks import SyntheticTask

RECALL_THRESHOLD = 0.9
RECALL_MAX_STEPS = 2000


def recall_config(variant: str = "twomamba", seed: int = 0) -> TinyModelConfig:
    # lr 3e-3 rather than 1e-4. Over 2000 steps, 1e-4 ends at 0.20 accuracy and 3e-4 first
    # passes 0.9 at step 1500. The linear preset at 3e-3 only reaches 0.27.
    return TinyModelConfig(d_model=64, n_heads=4, d_head=16, n_layers=2, vocab=32, seq_len=64,
                           variant=variant, lr=3e-3, total_steps=RECALL_MAX_STEPS, batch_size=32,
                           eval_every=100, eval_batches=4, seed=seed)


def recall_task(seed: int = 0) -> SyntheticTask:
    return SyntheticTask("assoc_recall", vocab=32, seq_len=64, n_pairs=8, seed=seed)
