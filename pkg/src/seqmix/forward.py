"""Quadratic-form forwards.

Head layout is ``[H, N, d_head]`` throughout; sequence-major activations are
``[N, H * d_head]`` with heads contiguous. Every normalization denominator
of a polynomial-order kernel is floored at ``EPS`` so a vanishing first score
(``(q0 . k0)^2 == 0``) cannot divide by zero, while any row with real mass
still sums to exactly one. Exponential kernels subtract the row max first,
which bounds their denominators below by 1, so they need no guard.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace
from typing import Optional

import numpy as np

from .config import BlockWeights, VariantConfig
from .errors import ConfigurationError, DimensionError
from .maskgen import (
    DecayMatrix,
    causal_mask,
    decay_exponent,
    decay_original,
    decay_softplus,
    dense_from_cumsum,
)
from .tensorops import (
    causal_conv1d,
    check_finite,
    conv1d_preactivation,
    cumsum_axis,
    relu,
    sigmoid,
    silu,
    softplus,
)

EPS = 1e-9
RMS_EPS = 1e-6


# ---------------------------------------------------------------------------
# small helpers
# ---------------------------------------------------------------------------


def guard(S, eps: float = EPS):
    """Floor a normalizer at ``eps``; rows whose mass exceeds it are untouched."""
    return np.maximum(S, eps)


def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    """``[..., N, H * d] -> [..., H, N, d]``."""
    *lead, n, width = x.shape
    if width % n_heads:
        raise DimensionError(f"width {width} not divisible by {n_heads} heads")
    return x.reshape(*lead, n, n_heads, width // n_heads).swapaxes(-3, -2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """``[..., H, N, d] -> [..., N, H * d]``."""
    *lead, h, n, d = x.shape
    return x.swapaxes(-3, -2).reshape(*lead, n, h * d)


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    """RMS normalization over the last axis."""
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x / r * gain


def activate(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "none":
        return x
    if kind == "relu":
        return relu(x)
    if kind == "silu":
        return silu(x)
    raise ConfigurationError(f"unknown activation {kind!r}")


def _check_qkv(Q, K, V):
    if Q.ndim < 3 or Q.shape != K.shape or V.shape[:-1] != Q.shape[:-1]:
        raise DimensionError(f"expected Q, K [..., H, N, d] and V [..., H, N, dv], got {Q.shape}, {K.shape}, {V.shape}")


# ---------------------------------------------------------------------------
# reference kernels
# ---------------------------------------------------------------------------


def softmax_attention(Q, K, V, scale_qk: bool = False) -> np.ndarray:
    """Causal softmax attention, row max subtracted before ``exp``."""
    Q, K, V = (np.asarray(t) for t in (Q, K, V))
    _check_qkv(Q, K, V)
    s = Q @ K.swapaxes(-1, -2)
    if scale_qk:
        s = s / np.sqrt(Q.shape[-1])
    n = Q.shape[-2]
    s = np.where(causal_mask(n, bool), s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    w = np.exp(s)
    w = w / w.sum(axis=-1, keepdims=True)
    return check_finite(w @ V, "softmax attention output")


def linear_attention_qk_first(Q, K, V, activation: str = "relu", eps: float = EPS) -> np.ndarray:
    """``(phi(Q) phi(K)^T ⊙ M) V`` divided by the masked row sums."""
    Q, K, V = (np.asarray(t) for t in (Q, K, V))
    _check_qkv(Q, K, V)
    fq, fk = activate(Q, activation), activate(K, activation)
    scores = (fq @ fk.swapaxes(-1, -2)) * causal_mask(Q.shape[-2], Q.dtype)
    norm = guard(scores.sum(axis=-1, keepdims=True), eps)
    return (scores @ V) / norm


def linear_attention_kv_first(Q, K, V, activation: str = "relu", eps: float = EPS) -> np.ndarray:
    """Same contract as :func:`linear_attention_qk_first`, via running sums.

    ``S_t = S_{t-1} + phi(k_t) v_t^T`` and ``z_t = z_{t-1} + phi(k_t)``;
    the output row is ``phi(q_t) S_t / max(phi(q_t) . z_t, eps)``.
    """
    Q, K, V = (np.asarray(t) for t in (Q, K, V))
    _check_qkv(Q, K, V)
    fq, fk = activate(Q, activation), activate(K, activation)
    S = np.cumsum(fk[..., :, None] * V[..., None, :], axis=-3)  # [..., H, N, d, dv]
    z = np.cumsum(fk, axis=-2)
    num = np.einsum("...nd,...ndv->...nv", fq, S)
    den = guard(np.einsum("...nd,...nd->...n", fq, z)[..., None], eps)
    return num / den


def two_mamba_scores(Q, K, dm: DecayMatrix, eps: float = EPS) -> np.ndarray:
    """Normalized 2Mamba weights ``(q_i.k_j)^2 A^M_ij M_ij / max(row sum, eps)``.

    The square acts on the raw inner product; the decay factor is applied once.
    """
    Q, K = np.asarray(Q), np.asarray(K)
    dense = dm.dense if dm.dense is not None else dense_from_cumsum(dm.a_cs)
    x = Q @ K.swapaxes(-1, -2)
    y = x * x * dense
    return y / guard(y.sum(axis=-1, keepdims=True), eps)


@dataclass
class KernelCache:
    X: np.ndarray  # scaled Q K^T
    Y: np.ndarray  # masked, decayed scores (exp kernels: shifted by the row max)
    Y_N: np.ndarray  # normalized scores (== Y when not normalizing)
    S: Optional[np.ndarray]  # row sums floored at eps, [H, N, 1]
    dense: Optional[np.ndarray]  # A^M ⊙ M for polynomial orders
    order: str
    normalize: bool
    scale: float
    eps: float = EPS


def attention_kernel(Q, K, V, a_cs=None, order="linear", normalize=False, scale=1.0,
                     eps: float = EPS, return_cache: bool = False):
    """Score, decay, optionally normalize and mix values.

    ``order`` picks the score map applied to ``scale * q.k``: identity,
    square or exp. ``a_cs`` of shape ``[H, N]`` adds the decay mask; ``None``
    means a plain causal mask.
    """
    Q, K, V = (np.asarray(t) for t in (Q, K, V))
    _check_qkv(Q, K, V)
    n = Q.shape[-2]
    X = Q @ K.swapaxes(-1, -2)
    if scale != 1.0:
        X = X * scale
    dense = None
    S = None
    if order == "exponential":
        if not normalize:
            raise ConfigurationError("exponential scores must be normalized")
        if a_cs is None:
            expo = np.where(causal_mask(n, bool), 0.0, -np.inf)
        else:
            expo = decay_exponent(np.asarray(a_cs))
        logits = X + expo
        Y = np.exp(logits - logits.max(axis=-1, keepdims=True))
        S = Y.sum(axis=-1, keepdims=True)
        Y_N = Y / S
    elif order in ("linear", "squared"):
        dense = causal_mask(n, Q.dtype) if a_cs is None else dense_from_cumsum(np.asarray(a_cs))
        F = X if order == "linear" else X * X
        Y = F * dense
        if normalize:
            S = guard(Y.sum(axis=-1, keepdims=True), eps)
            Y_N = Y / S
        else:
            Y_N = Y
    else:
        raise ConfigurationError(f"unknown order {order!r}")
    O = check_finite(Y_N @ V, "attention output")
    if return_cache:
        return O, KernelCache(X=X, Y=Y, Y_N=Y_N, S=S, dense=dense, order=order,
                              normalize=normalize, scale=scale, eps=eps)
    return O


# the six kernels whose gradients are derived analytically


def kernel_linear(Q, K, V):
    return attention_kernel(Q, K, V, None, "linear", False)


def kernel_linear_smnorm(Q, K, V):
    return attention_kernel(Q, K, V, None, "linear", True)


def kernel_linear_amask(Q, K, V, dm: DecayMatrix):
    return attention_kernel(Q, K, V, dm.a_cs, "linear", False)


def kernel_squared_amask(Q, K, V, dm: DecayMatrix):
    return attention_kernel(Q, K, V, dm.a_cs, "squared", False)


def kernel_twomamba(Q, K, V, dm: DecayMatrix):
    return attention_kernel(Q, K, V, dm.a_cs, "squared", True)


def kernel_twomamba_e(Q, K, V, dm: DecayMatrix):
    return attention_kernel(Q, K, V, dm.a_cs, "exponential", True)


# ---------------------------------------------------------------------------
# configurable block
# ---------------------------------------------------------------------------


def project_qkv(h: np.ndarray, w: BlockWeights):
    """Projection, causal conv and head split. Returns ``(P, C_pre, C, Q, K, V)``."""
    P = h @ w.W_QKV
    C_pre = conv1d_preactivation(P, w.conv)
    C = silu(C_pre) if w.conv.activation == "silu" else C_pre
    inner = w.inner
    Q = split_heads(C[..., :inner], w.n_heads)
    K = split_heads(C[..., inner:2 * inner], w.n_heads)
    V = split_heads(C[..., 2 * inner:], w.n_heads)
    return P, C_pre, C, Q, K, V


def block_forward(h: np.ndarray, cfg: VariantConfig, w: BlockWeights):
    """Run one block and keep every intermediate needed by the backward pass."""
    h = np.asarray(h)
    if h.ndim < 2 or h.shape[-1] != w.d_model:
        raise DimensionError(f"block input must be [..., N, {w.d_model}], got {h.shape}")
    w.check(cfg)
    c = SimpleNamespace(cfg=cfg, h=h)
    c.P, c.C_pre, c.C, c.Q, c.K, c.V = project_qkv(h, w)
    c.Qa = activate(c.Q, cfg.qk_activation)
    c.Ka = activate(c.K, cfg.qk_activation)

    c.dt_pre = c.dt = None
    if cfg.needs_dt:
        c.dt_pre = h @ w.W_dt + w.dt_bias  # [..., N, H]
        c.dt = np.ascontiguousarray(softplus(c.dt_pre).swapaxes(-1, -2))  # [..., H, N]

    c.a = c.a_cs = c.u_A = None
    if cfg.amask == "original":
        c.a = decay_original(w.A_log, c.dt).a
    elif cfg.amask == "softplus":
        c.u_A = h @ w.W_A
        c.a = decay_softplus(h, w.W_A).a
    if c.a is not None:
        c.a_cs = cumsum_axis(c.a, axis=-1)

    c.Vd = c.V * c.dt[..., None] if cfg.discretize_values else c.V
    scale = 1.0 / np.sqrt(w.d_head) if cfg.scale_qk else 1.0
    c.O, c.kernel = attention_kernel(c.Qa, c.Ka, c.Vd, c.a_cs, cfg.order, cfg.softmax_norm,
                                     scale, return_cache=True)
    y = c.O
    if cfg.d_residual:
        y = y + c.V * w.D.reshape(w.n_heads, 1, w.d_head)
    c.y = merge_heads(y)
    c.sig_z = None
    g = c.y
    if cfg.z_gate:
        c.sig_z = sigmoid(h @ w.W_z)
        g = g * c.sig_z
    c.g = g
    if cfg.norm == "output_rmsnorm":
        c.rms = np.sqrt(np.mean(g * g, axis=-1, keepdims=True) + RMS_EPS)
        c.normed = g / c.rms * w.rms_gain
    else:
        c.rms = None
        c.normed = g
    out = c.normed @ w.W_out
    return check_finite(out, "block output"), c


def variant_forward(h: np.ndarray, cfg: VariantConfig, w: BlockWeights) -> np.ndarray:
    """One attention block under ``cfg``, quadratic form. ``[..., N, d] -> [..., N, d]``."""
    return block_forward(h, cfg, w)[0]


def mamba2_full_forward(h: np.ndarray, w: BlockWeights) -> np.ndarray:
    """Full Mamba-2 block written out step by step.

    Conv then SiLU on the fused QKV, ``dt = softplus(h W_dt + dt_bias)``,
    ``A = -exp(A_log)``, decay from ``cumsum(A * dt)``, values scaled by ``dt``,
    D residual, sigmoid Z gate inside the RMSNorm, output projection.
    """
    h = np.asarray(h)
    missing = [n for n in ("W_dt", "dt_bias", "A_log", "D", "W_z") if getattr(w, n) is None]
    if missing:
        raise ConfigurationError(f"mamba2 needs weights {missing}")
    H, dh = w.n_heads, w.d_head
    inner = H * dh
    n = h.shape[0]

    qkv = causal_conv1d(h @ w.W_QKV, w.conv)
    Q = qkv[:, :inner].reshape(n, H, dh).transpose(1, 0, 2)
    K = qkv[:, inner:2 * inner].reshape(n, H, dh).transpose(1, 0, 2)
    V = qkv[:, 2 * inner:].reshape(n, H, dh).transpose(1, 0, 2)

    dt = np.ascontiguousarray(softplus(h @ w.W_dt + w.dt_bias).T)  # [H, N]
    A = -np.exp(w.A_log)  # [H]
    D_res = V * w.D.reshape(H, 1, dh)
    V_dt = V * dt[..., None]
    A_cs = np.cumsum(A[:, None] * dt, axis=-1)
    M = causal_mask(n, bool)
    diff = A_cs[:, :, None] - A_cs[:, None, :]
    A_M = np.where(M, np.exp(np.where(M, diff, 0.0)), 0.0)
    y = ((Q @ K.transpose(0, 2, 1)) * A_M) @ V_dt
    y_D = y + D_res
    y_flat = y_D.transpose(1, 0, 2).reshape(n, inner)
    gated = y_flat * sigmoid(h @ w.W_z)
    y_N = gated / np.sqrt(np.mean(gated * gated, axis=-1, keepdims=True) + RMS_EPS) * w.rms_gain
    return y_N @ w.W_out

