"""Dense tensor numerics shared by every other module.

Tensors are plain ``numpy.ndarray`` objects in row-major layout with batch
axes leading. Verification paths run in float64; float32 exists for
benchmarking only. Every operation here refuses to emit NaN or Inf.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError, DomainError, NonFiniteError

PRECISIONS = {"double": np.float64, "f64": np.float64, "single": np.float32, "f32": np.float32}

# past this magnitude log(1 + exp(x)) is x (or exp(x)) to double precision
SOFTPLUS_CUTOFF = 30.0


def as_tensor(x, precision="double") -> np.ndarray:
    """Copy ``x`` into a finite array of the requested precision."""
    try:
        dtype = PRECISIONS[precision]
    except KeyError:
        raise DomainError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}")
    out = np.array(x, dtype=dtype)
    return check_finite(out)


def _float_array(x) -> np.ndarray:
    """Float arrays keep their dtype; everything else (Python scalars, ints) becomes float64."""
    x = np.asarray(x)
    return x if np.issubdtype(x.dtype, np.floating) else x.astype(np.float64)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{what} has {bad} non-finite entries")
    return x


# ---------------------------------------------------------------------------
# products and reductions
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product ``[*, m, k] @ [*, k, n] -> [*, m, n]``.

    Leading axes broadcast the numpy way. Accumulation happens in the
    inputs' dtype.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"batch axes do not broadcast: {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.matmul(a, b)
    return check_finite(out, "matmul output")


def cumsum_axis(x: np.ndarray, axis: int) -> np.ndarray:
    """Inclusive prefix sum along ``axis``."""
    x = np.asarray(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")
    return check_finite(np.cumsum(x, axis=axis), "cumsum output")


def suffix_sum_axis(x: np.ndarray, axis: int) -> np.ndarray:
    """Inclusive suffix sum; the adjoint of :func:`cumsum_axis`."""
    x = np.asarray(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")
    flipped = np.flip(x, axis=axis)
    return np.flip(np.cumsum(flipped, axis=axis), axis=axis)


# ---------------------------------------------------------------------------
# scalar nonlinearities
# ---------------------------------------------------------------------------


def softplus(x):
    """``log(1 + exp(x))`` with saturating branches beyond +-30."""
    x = _float_array(x)
    check_finite(x, "softplus input")
    out = np.empty_like(x)
    hi = x > SOFTPLUS_CUTOFF
    lo = x < -SOFTPLUS_CUTOFF
    mid = ~(hi | lo)
    out[hi] = x[hi]
    out[lo] = np.exp(x[lo])
    out[mid] = np.log1p(np.exp(x[mid]))
    return out[()] if out.ndim == 0 else out


def softplus_inverse(y):
    """The ``x`` with ``softplus(x) == y``, for ``y > 0``.

    Uses ``y + log(1 - exp(-y))``, written with ``log(-expm1(-y))`` so small
    ``y`` keeps its digits.
    """
    y = _float_array(y)
    check_finite(y, "softplus_inverse input")
    if np.any(y <= 0):
        raise DomainError("softplus_inverse is only defined for y > 0")
    out = y + np.log(-np.expm1(-y))
    return out[()] if out.ndim == 0 else out


def sigmoid(x):
    x = _float_array(x)
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out[()] if out.ndim == 0 else out


def silu(x):
    return np.asarray(x) * sigmoid(x)


def relu(x):
    return np.maximum(np.asarray(x), 0.0)


def log_sigmoid(x):
    """Stable ``log(sigmoid(x))`` evaluated as ``-softplus(-x)``."""
    return -softplus(-np.asarray(x))


# ---------------------------------------------------------------------------
# causal depthwise convolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Depthwise causal convolution parameters.

    ``weight[c, s]`` multiplies the input ``s`` steps in the past, so column 0
    is the current-token tap.
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    activation: str = "none"

    def __post_init__(self):
        w = np.asarray(self.weight)
        if w.ndim != 2:
            raise DimensionError(f"conv weight must be [channels, window], got {w.shape}")
        if not 1 <= w.shape[1] <= 4:
            raise DimensionError(f"conv window must be in 1..4, got {w.shape[1]}")
        if self.bias is not None and np.shape(self.bias) != (w.shape[0],):
            raise DimensionError(f"conv bias must be [{w.shape[0]}], got {np.shape(self.bias)}")
        if self.activation not in ("none", "silu"):
            raise DomainError(f"conv activation must be 'none' or 'silu', got {self.activation!r}")

    @property
    def window(self) -> int:
        return self.weight.shape[1]

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def identity(cls, channels: int, window: int = 1, activation: str = "none", dtype=np.float64):
        """Center tap 1, every other tap 0, no bias."""
        w = np.zeros((channels, window), dtype=dtype)
        w[:, 0] = 1.0
        return cls(weight=w, bias=None, activation=activation)


def conv1d_preactivation(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Causal depthwise convolution with zero left padding, before activation.

    ``x`` is ``[..., N, channels]``; the time axis is second to last.
    """
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] != spec.channels:
        raise DimensionError(f"conv input must be [..., N, {spec.channels}], got {x.shape}")
    n = x.shape[-2]
    out = x * spec.weight[:, 0]
    for s in range(1, spec.window):
        if s >= n:
            break
        out[..., s:, :] += x[..., :-s, :] * spec.weight[:, s]
    if spec.bias is not None:
        out = out + spec.bias
    return out


def causal_conv1d(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """``out[t, c] = act(sum_s weight[c, s] * x[t - s, c] + bias[c])``."""
    pre = conv1d_preactivation(x, spec)
    out = silu(pre) if spec.activation == "silu" else pre
    return check_finite(out, "conv output")
