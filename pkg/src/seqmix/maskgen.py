"""Causal and decay masks.

Decay logits ``a[h, t] <= 0`` are per head and per position. Their inclusive
cumulative sum ``a_cs`` gives the semi-separable decay matrix

    A^M[h, i, j] = exp(a_cs[h, i] - a_cs[h, j])   for i >= j, else 0

which equals the product of ``exp(a[h, s])`` for ``j < s <= i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError, DomainError
from .tensorops import check_finite, cumsum_axis, softplus

VARIANTS = ("original", "softplus", "none")

# exp of anything below this is 0 in double precision anyway
EXP_UNDERFLOW = -745.0


@dataclass(frozen=True)
class DecayLogits:
    a: np.ndarray  # [..., H, N]
    variant: str = "softplus"

    def __post_init__(self):
        a = np.asarray(self.a)
        if a.ndim < 2:
            raise DimensionError(f"decay logits must be [..., H, N], got {a.shape}")
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown decay variant {self.variant!r}")
        check_finite(a, "decay logits")
        if np.any(a > 0):
            raise DomainError("decay logits must be <= 0")

    @property
    def heads(self) -> int:
        return self.a.shape[-2]

    @property
    def length(self) -> int:
        return self.a.shape[-1]


@dataclass(frozen=True)
class DecayMatrix:
    a_cs: np.ndarray  # [..., H, N]
    dense: Optional[np.ndarray] = None  # [..., H, N, N]

    @property
    def heads(self) -> int:
        return self.a_cs.shape[-2]

    @property
    def length(self) -> int:
        return self.a_cs.shape[-1]


def causal_mask(n: int, dtype=np.float64) -> np.ndarray:
    """``M[i, j] = 1`` for ``i >= j``."""
    return np.tril(np.ones((n, n), dtype=dtype))


def decay_original(A_log: np.ndarray, dt: np.ndarray) -> DecayLogits:
    """``a = -exp(A_log) * dt``: decay tied to the discretization step."""
    A_log = np.asarray(A_log)
    dt = np.asarray(dt)
    if A_log.ndim != 1 or dt.ndim < 2 or dt.shape[-2] != A_log.shape[0]:
        raise DimensionError(f"expected A_log [H] and dt [..., H, N], got {A_log.shape} and {dt.shape}")
    if np.any(dt < 0):
        raise DomainError("dt must be non-negative (it is a softplus output)")
    a = -np.exp(A_log)[:, None] * dt
    return DecayLogits(a=a, variant="original")


def decay_softplus(h: np.ndarray, W_A: np.ndarray) -> DecayLogits:
    """``a = -softplus(h @ W_A)``, transposed to ``[..., H, N]``."""
    h = np.asarray(h)
    W_A = np.asarray(W_A)
    if h.ndim < 2 or W_A.ndim != 2 or h.shape[-1] != W_A.shape[0]:
        raise DimensionError(f"expected h [..., N, d] and W_A [d, H], got {h.shape} and {W_A.shape}")
    a = -softplus(h @ W_A).swapaxes(-1, -2)
    return DecayLogits(a=np.ascontiguousarray(a), variant="softplus")


def decay_exponent(a_cs: np.ndarray) -> np.ndarray:
    """``a_cs[h, i] - a_cs[h, j]`` on the lower triangle, ``-inf`` above it."""
    n = a_cs.shape[-1]
    diff = a_cs[..., :, None] - a_cs[..., None, :]
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    return np.where(upper, -np.inf, diff)


def dense_from_cumsum(a_cs: np.ndarray) -> np.ndarray:
    """Materialize ``A^M ⊙ M`` from cumulative logits."""
    expo = decay_exponent(a_cs)
    out = np.zeros(expo.shape, dtype=a_cs.dtype)
    keep = expo >= EXP_UNDERFLOW
    out[keep] = np.exp(expo[keep])
    n = a_cs.shape[-1]
    # exp(0) is already 1, but make the diagonal exact regardless of rounding in a_cs
    idx = np.arange(n)
    out[..., idx, idx] = 1.0
    return out


def build_decay_matrix(logits: DecayLogits, materialize: bool = True) -> DecayMatrix:
    a_cs = cumsum_axis(np.asarray(logits.a), axis=-1)
    dense = dense_from_cumsum(a_cs) if materialize else None
    return DecayMatrix(a_cs=a_cs, dense=dense)


def decay_matrix_from_logits(a: np.ndarray, materialize: bool = True) -> DecayMatrix:
    """Shortcut used by kernels and tests: raw ``[H, N]`` logits to a matrix."""
    return build_decay_matrix(DecayLogits(a=np.asarray(a), variant="none"), materialize)


def logsigmoid_softplus_identity_check(grid) -> float:
    """Max over ``grid`` of ``|log(1/(1+exp(-x))) - (-softplus(-x))|``."""
    x = np.asarray(grid, dtype=np.float64)
    check_finite(x, "identity grid")
    lhs = np.log(1.0 / (1.0 + np.exp(-x)))
    rhs = -softplus(-x)
    return float(np.max(np.abs(lhs - rhs)))
