"""Synthetic sequence tasks: copy and associative recall.

Token 0 pads, token 1 is the delimiter / query marker; everything else is
content. Batches come out as next-token pairs ``(tokens, targets)`` with a
mask selecting the positions that are scored.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigurationError

PAD = 0
DELIM = 1
FIRST_SYMBOL = 2


@dataclass(frozen=True)
class SyntheticTask:
    kind: str = "assoc_recall"
    vocab: int = 32
    seq_len: int = 64
    n_pairs: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("copy", "assoc_recall"):
            raise ConfigurationError(f"unknown task {self.kind!r}; expected 'copy' or 'assoc_recall'")
        symbols = self.vocab - FIRST_SYMBOL
        if self.kind == "assoc_recall":
            # distinct keys from one half of the symbols, values from the other
            if self.n_pairs < 1 or self.n_pairs > symbols // 2:
                raise ConfigurationError(
                    f"vocab {self.vocab} leaves {symbols // 2} distinct keys; cannot place {self.n_pairs} pairs")
            if 2 * self.n_pairs + 2 > self.seq_len:
                raise ConfigurationError(f"seq_len {self.seq_len} too short for {self.n_pairs} pairs")
        elif symbols < 1 or self.seq_len < 3:
            raise ConfigurationError("copy task needs at least one symbol and seq_len >= 3")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def key_range(self) -> tuple[int, int]:
        half = (self.vocab - FIRST_SYMBOL) // 2
        return FIRST_SYMBOL, FIRST_SYMBOL + half

    @property
    def value_range(self) -> tuple[int, int]:
        lo = self.key_range[1]
        return lo, lo + (self.vocab - FIRST_SYMBOL) // 2


def _copy(task: SyntheticTask, batch: int, rng: np.random.Generator):
    n = task.seq_len
    length = (n - 1) // 2  # prefix, delimiter and repeat fit in n tokens
    seq = np.full((batch, n + 1), PAD, dtype=np.int64)
    prefix = rng.integers(FIRST_SYMBOL, task.vocab, size=(batch, length))
    seq[:, :length] = prefix
    seq[:, length] = DELIM
    seq[:, length + 1:2 * length + 1] = prefix
    mask = np.zeros((batch, n), dtype=bool)
    # target position t predicts seq[t + 1]
    mask[:, length:2 * length] = True
    return seq[:, :-1], seq[:, 1:], mask


def _assoc_recall(task: SyntheticTask, batch: int, rng: np.random.Generator):
    n, k = task.seq_len, task.n_pairs
    klo, khi = task.key_range
    vlo, vhi = task.value_range
    keys = np.argsort(rng.random((batch, khi - klo)), axis=1)[:, :k] + klo
    values = rng.integers(vlo, vhi, size=(batch, k))
    pick = rng.integers(0, k, size=batch)
    rows = np.arange(batch)
    body = np.empty((batch, 2 * k + 3), dtype=np.int64)
    body[:, 0:2 * k:2] = keys
    body[:, 1:2 * k:2] = values
    body[:, 2 * k] = DELIM
    body[:, 2 * k + 1] = keys[rows, pick]
    body[:, 2 * k + 2] = values[rows, pick]
    seq = np.full((batch, n + 1), PAD, dtype=np.int64)
    seq[:, n + 1 - body.shape[1]:] = body
    mask = np.zeros((batch, n), dtype=bool)
    mask[:, -1] = True
    return seq[:, :-1], seq[:, 1:], mask


def generate_batch(task: SyntheticTask, batch: int, rng=None):
    """``(tokens [B, N], targets [B, N], loss_mask [B, N])``.

    ``rng`` may be a Generator or an integer seed; by default the task's seed.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(task.seed if rng is None else rng)
    if task.kind == "copy":
        return _copy(task, batch, rng)
    return _assoc_recall(task, batch, rng)
