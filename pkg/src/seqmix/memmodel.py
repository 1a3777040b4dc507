"""Per-head inference memory: closed forms, crossover and measured traces.

Counts are scalar elements. A KV cache holds ``2 N d`` scalars; a second-order
state with softmax-like normalization and a window-2 conv holds
``d(d+1)^2/2 + 3d`` regardless of ``N``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import PRESETS, TWOMAMBA, SOFTMAX, TWOMAMBA_E, VariantConfig, init_block_weights
from .errors import DomainError

INT64_MAX = 2 ** 63 - 1


def term_count(d: int, p: int = 2) -> int:
    """Number of distinct degree-``p`` monomials in ``d`` variables."""
    if d < 1 or p < 0:
        raise DomainError(f"term_count needs d >= 1 and p >= 0, got d={d}, p={p}")
    n = math.comb(p + d - 1, d - 1)
    if n > INT64_MAX:
        raise OverflowError(f"term_count({d}, {p}) does not fit in 64 bits")
    return n


def kv_cache_elems(n: int, d: int) -> int:
    return 2 * n * d


def second_order_state_elems(d: int) -> int:
    """``d(d+1)^2/2 + 3d``: values, normalizer and one conv row of fused q/k/v."""
    return d * (d + 1) ** 2 // 2 + 3 * d


def crossover(d: int) -> int:
    """Smallest ``N`` with ``2 N d > d(d+1)^2/2 + 3d``.

    Dividing by ``d/2`` gives ``4N > (d+1)^2 + 6``.
    """
    if d < 1:
        raise DomainError("crossover needs d >= 1")
    n = ((d + 1) ** 2 + 6) // 4 + 1
    state = second_order_state_elems(d)
    assert kv_cache_elems(n, d) > state >= kv_cache_elems(n - 1, d), (d, n)
    return n


def state_elems(cfg: VariantConfig, d: int, t: int) -> int:
    """Scalars one head persists after ``t`` tokens under ``cfg``."""
    conv = 3 * d * (cfg.conv_window - 1)
    if cfg.order == "exponential":
        decay = t if cfg.amask != "none" else 0
        return kv_cache_elems(t, d) + decay + conv
    f = d if cfg.order == "linear" else term_count(d, 2)
    return f * d + (f if cfg.softmax_norm else 0) + conv


@dataclass
class MemoryReport:
    d_head: int
    crossover_n: int
    second_order_state: int
    rows: list = field(default_factory=list)
    measured: bool = False

    def kv_cache(self, n: int) -> int:
        return kv_cache_elems(n, self.d_head)

    def first_exceedance(self) -> Optional[int]:
        for row in self.rows:
            if row["kv_elems"] > row["state2_elems"]:
                return row["N"]
        return None


def measure_trace(preset_name: str, d: int, n: int, seed: int = 0) -> list[int]:
    """Run one head of ``preset_name`` statefully for ``n`` tokens and count its state."""
    from .recurrence import run_stateful

    cfg = PRESETS[preset_name]
    rng = np.random.default_rng(seed)
    w = init_block_weights(cfg, d, 1, d, rng)
    h = rng.standard_normal((n, d))
    _, trace = run_stateful(h, cfg, w)
    return trace.head_counts(0)


def memcurve(d: int, n_max: int, measure: bool = False, seed: int = 0) -> MemoryReport:
    """Per-``N`` element counts for a KV cache and a 2Mamba state at head dim ``d``.

    With ``measure`` the counts are also read off stateful runs of the
    ``softmax`` and ``twomamba`` presets and compared exactly.
    """
    if n_max < 1:
        raise DomainError("n_max must be >= 1")
    state2 = second_order_state_elems(d)
    mkv = mst = None
    if measure:
        mkv = measure_trace("softmax", d, n_max, seed)
        mst = measure_trace("twomamba", d, n_max, seed)
    rows = []
    for n in range(1, n_max + 1):
        row = {
            "N": n,
            "kv_elems": kv_cache_elems(n, d),
            "state2_elems": state2,
            "measured_kv": "",
            "measured_state": "",
            "match": "",
            "twomamba_e_elems": state_elems(TWOMAMBA_E, d, n),
        }
        if measure:
            row["measured_kv"] = mkv[n - 1]
            row["measured_state"] = mst[n - 1]
            row["match"] = int(mkv[n - 1] == state_elems(SOFTMAX, d, n) == row["kv_elems"]
                               and mst[n - 1] == state_elems(TWOMAMBA, d, n) == state2)
        rows.append(row)
    return MemoryReport(d_head=d, crossover_n=crossover(d), second_order_state=state2,
                        rows=rows, measured=measure)
