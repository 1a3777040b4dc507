"""Token-by-token inference.

Polynomial orders keep a fixed-size state per head: first order stores
``sum decay * k v^T`` (``d x d``), second order stores the same over the
compressed feature map ``phi2(k)`` (``d(d+1)/2 x d``). Exponential order has
no finite state and keeps a KV cache, normalized online with a running max.
Decay is folded into the state (or into the cached cumulative logits), and
the conv layer keeps a ring of the last ``window - 1`` projected inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import BlockWeights, VariantConfig
from .errors import ConfigurationError, DimensionError, PreconditionError
from .forward import EPS, RMS_EPS, activate
from .tensorops import sigmoid, silu, softplus

# ---------------------------------------------------------------------------
# second-order feature map
# ---------------------------------------------------------------------------


class Phi2Map:
    """Unique second-order monomials with ``sqrt(2)`` on the cross terms.

    ``phi2(x) . phi2(y) == (x . y)**2``. Pairs ``(i, j)`` with ``i <= j`` are
    ordered row-major.
    """

    def __init__(self, d: int):
        if d < 1:
            raise DimensionError("phi2 needs d >= 1")
        self.d = d
        rows, cols = np.triu_indices(d)
        self.rows = rows
        self.cols = cols
        self.coeffs = np.where(rows == cols, 1.0, np.sqrt(2.0))
        self.f = rows.size

    @property
    def index_table(self) -> list[tuple[int, int]]:
        return list(zip(self.rows.tolist(), self.cols.tolist()))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[-1] != self.d:
            raise DimensionError(f"phi2 expects trailing dim {self.d}, got {x.shape}")
        return x[..., self.rows] * x[..., self.cols] * self.coeffs


_PHI2_CACHE: dict[int, Phi2Map] = {}


def phi2(x: np.ndarray) -> np.ndarray:
    """Compressed second-order features of the last axis."""
    d = np.shape(x)[-1]
    if d not in _PHI2_CACHE:
        _PHI2_CACHE[d] = Phi2Map(d)
    return _PHI2_CACHE[d](x)


# ---------------------------------------------------------------------------
# state containers
# ---------------------------------------------------------------------------


@dataclass
class ConvRing:
    """Last ``window - 1`` pre-conv rows for one head's fused q/k/v channels.

    Row 0 is the most recent token. Zero-initialized, which is the same as
    zero left padding in the quadratic form.
    """

    buffer: np.ndarray  # [window - 1, 3 * d_head]

    @classmethod
    def empty(cls, window: int, width: int, dtype=np.float64) -> "ConvRing":
        return cls(np.zeros((window - 1, width), dtype=dtype))

    def apply(self, x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray]) -> np.ndarray:
        """Convolve the new row ``x`` against the ring, then push it."""
        out = x * weight[:, 0]
        for s in range(1, weight.shape[1]):
            out = out + self.buffer[s - 1] * weight[:, s]
        if bias is not None:
            out = out + bias
        if len(self.buffer):
            self.buffer[1:] = self.buffer[:-1]
            self.buffer[0] = x
        return out

    @property
    def n_elems(self) -> int:
        return int(self.buffer.size)


@dataclass
class RecurrentState:
    order: int
    S: np.ndarray  # [f, d_head]
    z: Optional[np.ndarray]  # [f] when normalizing
    conv: ConvRing
    step: int = 0

    @classmethod
    def zeros(cls, order: int, d_head: int, normalize: bool, window: int, dtype=np.float64):
        if order not in (1, 2):
            raise ConfigurationError(f"recurrent order must be 1 or 2, got {order}")
        f = d_head if order == 1 else d_head * (d_head + 1) // 2
        return cls(order=order,
                   S=np.zeros((f, d_head), dtype=dtype),
                   z=np.zeros(f, dtype=dtype) if normalize else None,
                   conv=ConvRing.empty(window, 3 * d_head, dtype))

    @property
    def d(self) -> int:
        return self.S.shape[1]

    @property
    def f(self) -> int:
        return self.S.shape[0]

    @property
    def window(self) -> int:
        return self.conv.buffer.shape[0] + 1

    def n_elems(self) -> int:
        n = self.S.size + self.conv.n_elems
        if self.z is not None:
            n += self.z.size
        return int(n)


@dataclass
class KVCache:
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    a_cs_history: Optional[list] = None  # None when the variant has no decay
    conv: Optional[ConvRing] = None
    running_max: float = float("-inf")

    @classmethod
    def empty(cls, d_head: int, decay: bool, window: int, dtype=np.float64):
        return cls(a_cs_history=[] if decay else None, conv=ConvRing.empty(window, 3 * d_head, dtype))

    @property
    def length(self) -> int:
        return len(self.keys)

    def append(self, k, v, a_cs=None):
        self.keys.append(np.array(k))
        self.values.append(np.array(v))
        if self.a_cs_history is not None:
            self.a_cs_history.append(float(a_cs))

    def n_elems(self) -> int:
        n = sum(k.size for k in self.keys) + sum(v.size for v in self.values)
        if self.a_cs_history is not None:
            n += len(self.a_cs_history)
        if self.conv is not None:
            n += self.conv.n_elems
        return int(n)


# ---------------------------------------------------------------------------
# single steps
# ---------------------------------------------------------------------------


def step_first_order(state: RecurrentState, q, k, v, a_t: float = 0.0, dt_t=None, eps: float = EPS):
    """``S <- e^a S + k (dt v)^T``; returns ``q^T S`` (normalized if ``z`` is kept)."""
    if state.order != 1:
        raise PreconditionError("step_first_order needs an order-1 state")
    if dt_t is not None:
        v = v * dt_t
    decay = np.exp(a_t)
    state.S *= decay
    state.S += np.outer(k, v)
    y = q @ state.S
    if state.z is not None:
        state.z *= decay
        state.z += k
        y = y / max(q @ state.z, eps)
    state.step += 1
    return y


def step_second_order(state: RecurrentState, q, k, v, a_t: float = 0.0, dt_t=None, eps: float = EPS):
    """``S <- e^a S + phi2(k) v^T``, ``z <- e^a z + phi2(k)``; returns the normalized read."""
    if state.order != 2:
        raise PreconditionError("step_second_order needs an order-2 state")
    if dt_t is not None:
        v = v * dt_t
    fk = phi2(k)
    fq = phi2(q)
    decay = np.exp(a_t)
    state.S *= decay
    state.S += np.outer(fk, v)
    y = fq @ state.S
    if state.z is not None:
        state.z *= decay
        state.z += fk
        y = y / max(fq @ state.z, eps)
    state.step += 1
    return y


def step_kv_exponential(cache: KVCache, q_t, a_cs_t: float = 0.0, block: Optional[int] = None):
    """Online-max softmax read of the whole cache for query ``q_t``.

    Scores are ``q_t . k_j + a_cs_t - a_cs_j``. The cache is scanned in blocks
    of ``block`` rows keeping a running max ``m`` and accumulators rescaled by
    ``exp(m_old - m_new)``.
    """
    n = cache.length
    if n == 0:
        raise PreconditionError("KV cache is empty")
    block = n if block is None or block <= 0 else block
    K = np.asarray(cache.keys)
    V = np.asarray(cache.values)
    A = None if cache.a_cs_history is None else np.asarray(cache.a_cs_history)
    m = -np.inf
    num = np.zeros(V.shape[1], dtype=V.dtype)
    den = 0.0
    for start in range(0, n, block):
        stop = min(start + block, n)
        s = K[start:stop] @ q_t
        if A is not None:
            s = s + (a_cs_t - A[start:stop])
        m_new = max(m, float(s.max()))
        rescale = np.exp(m - m_new)
        p = np.exp(s - m_new)
        num = num * rescale + p @ V[start:stop]
        den = den * rescale + p.sum()
        m = m_new
    cache.running_max = m
    return num / den


# ---------------------------------------------------------------------------
# full stateful run
# ---------------------------------------------------------------------------


@dataclass
class MemoryTrace:
    """Persisted scalar counts per head after each step (index t -> t+1 tokens)."""

    per_head: list = field(default_factory=list)  # list[list[int]] indexed [step][head]

    def record(self, states) -> None:
        self.per_head.append([s.n_elems() for s in states])

    def head_counts(self, head: int = 0) -> list[int]:
        return [row[head] for row in self.per_head]

    def totals(self) -> list[int]:
        return [sum(row) for row in self.per_head]


def _head_channels(w: BlockWeights, head: int) -> np.ndarray:
    inner, dh = w.inner, w.d_head
    base = np.arange(head * dh, (head + 1) * dh)
    return np.concatenate([base, base + inner, base + 2 * inner])


def make_states(cfg: VariantConfig, w: BlockWeights, dtype=np.float64):
    window = cfg.conv_window
    if cfg.order == "exponential":
        return [KVCache.empty(w.d_head, cfg.amask != "none", window, dtype) for _ in range(w.n_heads)]
    order = 1 if cfg.order == "linear" else 2
    return [RecurrentState.zeros(order, w.d_head, cfg.softmax_norm, window, dtype)
            for _ in range(w.n_heads)]


def run_stateful(h: np.ndarray, cfg: VariantConfig, w: BlockWeights, block: Optional[int] = None):
    """Process ``h`` one token at a time. Returns ``(outputs [N, d], MemoryTrace)``.

    Every valid :class:`VariantConfig` has a stateful form; weights that do
    not match ``cfg`` raise :class:`ConfigurationError`.
    """
    h = np.asarray(h)
    if not isinstance(cfg, VariantConfig):
        raise ConfigurationError(f"expected a VariantConfig, got {type(cfg).__name__}")
    if h.ndim != 2 or h.shape[1] != w.d_model:
        raise DimensionError(f"stateful input must be [N, {w.d_model}], got {h.shape}")
    w.check(cfg)
    H, dh = w.n_heads, w.d_head
    states = make_states(cfg, w, h.dtype)
    channels = [_head_channels(w, i) for i in range(H)]
    conv_w = [w.conv.weight[ch] for ch in channels]
    conv_b = [None if w.conv.bias is None else w.conv.bias[ch] for ch in channels]
    scale = 1.0 / np.sqrt(dh) if cfg.scale_qk else 1.0
    trace = MemoryTrace()
    outputs = np.empty((h.shape[0], w.d_model), dtype=h.dtype)

    for t, x in enumerate(h):
        p = x @ w.W_QKV
        dt = softplus(x @ w.W_dt + w.dt_bias) if cfg.needs_dt else None
        if cfg.amask == "original":
            a = -np.exp(w.A_log) * dt
        elif cfg.amask == "softplus":
            a = -softplus(x @ w.W_A)
        else:
            a = np.zeros(H)
        y = np.empty(w.inner, dtype=h.dtype)
        for i, st in enumerate(states):
            c = st.conv.apply(p[channels[i]], conv_w[i], conv_b[i])
            if w.conv.activation == "silu":
                c = silu(c)
            q, k, v = c[:dh], c[dh:2 * dh], c[2 * dh:]
            q = activate(q, cfg.qk_activation) * scale
            k = activate(k, cfg.qk_activation)
            dt_i = dt[i] if cfg.discretize_values else None
            if cfg.order == "linear":
                y_i = step_first_order(st, q, k, v, a[i], dt_i)
            elif cfg.order == "squared":
                y_i = step_second_order(st, q, k, v, a[i], dt_i)
            else:
                vd = v * dt_i if dt_i is not None else v
                # the cached history is the only persisted copy of the running cumsum
                hist = st.a_cs_history
                a_cs = (hist[-1] if hist else 0.0) + a[i] if hist is not None else 0.0
                st.append(k, vd, a_cs)
                y_i = step_kv_exponential(st, q, a_cs, block)
            if cfg.d_residual:
                y_i = y_i + v * w.D[i * dh:(i + 1) * dh]
            y[i * dh:(i + 1) * dh] = y_i
        if cfg.z_gate:
            y = y * sigmoid(x @ w.W_z)
        if cfg.norm == "output_rmsnorm":
            y = y / np.sqrt(np.mean(y * y) + RMS_EPS) * w.rms_gain
        outputs[t] = y @ w.W_out
        trace.record(states)
    return outputs, trace


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<5q")  # order, d, f, window, step


def serialize_state(state: RecurrentState) -> bytes:
    """Fixed header then ``S``, ``z`` (if kept) and the conv ring as little-endian float64."""
    parts = [state.S.ravel()]
    if state.z is not None:
        parts.append(state.z.ravel())
    parts.append(state.conv.buffer.ravel())
    payload = np.concatenate(parts).astype("<f8").tobytes()
    return _HEADER.pack(state.order, state.d, state.f, state.window, state.step) + payload


def deserialize_state(blob: bytes) -> RecurrentState:
    order, d, f, window, step = _HEADER.unpack_from(blob)
    data = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    ring = (window - 1) * 3 * d
    rest = data.size - f * d - ring
    if rest not in (0, f):
        raise DimensionError(f"payload of {data.size} scalars does not fit header {(order, d, f, window)}")
    S = data[:f * d].reshape(f, d).copy()
    z = data[f * d:f * d + f].copy() if rest == f else None
    buf = data[f * d + rest:].reshape(window - 1, 3 * d).copy()
    return RecurrentState(order=order, S=S, z=z, conv=ConvRing(buf), step=step)
