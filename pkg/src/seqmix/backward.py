"""Analytic gradients and the finite-difference oracle.

Notation inside the kernels: ``X = Q K^T``, ``M`` the causal mask, ``A_M`` the
decay matrix, ``Y`` the masked decayed scores, ``S`` their row sums,
``Y_N = Y / S``. For every kernel the decay gradient with respect to the
cumulative logits is ``rowsum(E) - colsum(E)`` where ``E`` is the gradient
with respect to ``A_M`` multiplied elementwise by ``A_M``; the chain to the raw
per-position logits is a suffix sum.

Central finite differences are the authority. Two printed derivations needed
repair and the fixed forms are what is implemented:

* 2Mamba: the score gradient must carry the ``A_M`` factor
  (``D = 2 X ⊙ A_M ⊙ G / S``) and the decay gradient the ``1/S`` factor
  (``E = Y ⊙ G / S``).
* 2Mamba-E: ``dQ = D K``, not ``D K^T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .config import BlockWeights
from .errors import OracleError
from .forward import KernelCache, guard, merge_heads, split_heads
from .maskgen import DecayMatrix, causal_mask, dense_from_cumsum
from .tensorops import sigmoid, suffix_sum_axis


@dataclass
class GradBundle:
    dQ: np.ndarray
    dK: np.ndarray
    dV: np.ndarray
    dA_cs: np.ndarray
    dA_logits: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"Q": self.dQ, "K": self.dK, "V": self.dV, "A_cs": self.dA_cs, "a": self.dA_logits}


def _bundle(dQ, dK, dV, E=None):
    if E is None:
        dA_cs = np.zeros(dQ.shape[:-1], dtype=dQ.dtype)
    else:
        dA_cs = E.sum(axis=-1) - E.sum(axis=-2)
    return GradBundle(dQ=dQ, dK=dK, dV=dV, dA_cs=dA_cs, dA_logits=suffix_sum_axis(dA_cs, axis=-1))


def _t(x):
    return x.swapaxes(-1, -2)


def _live(S, eps):
    """1 where the normalizer is the real row sum, 0 where the floor took over.

    A floored row divides by a constant, so its scores get no centering term.
    """
    return (S > eps).astype(S.dtype)


def _dense(dm: DecayMatrix):
    return dm.dense if dm.dense is not None else dense_from_cumsum(dm.a_cs)


# ---------------------------------------------------------------------------
# the six kernels
# ---------------------------------------------------------------------------


def grad_linear(Q, K, V, dO) -> GradBundle:
    """``O = (Q K^T ⊙ M) V``."""
    M = causal_mask(Q.shape[-2], Q.dtype)
    G = (dO @ _t(V)) * M
    dQ = G @ K
    dK = _t(G) @ Q
    dV = _t((Q @ _t(K)) * M) @ dO
    return _bundle(dQ, dK, dV)


def grad_linear_smnorm(Q, K, V, dO, eps: float = 1e-9) -> GradBundle:
    """``O = Y_N V`` with ``Y = Q K^T ⊙ M`` normalized by its row sums."""
    M = causal_mask(Q.shape[-2], Q.dtype)
    Y = (Q @ _t(K)) * M
    S = guard(Y.sum(axis=-1, keepdims=True), eps)
    Y_N = Y / S
    G = (dO @ _t(V)) * M
    D = (G - _live(S, eps) * (Y_N * G).sum(axis=-1, keepdims=True)) / S * M
    return _bundle(D @ K, _t(D) @ Q, _t(Y_N) @ dO)


def grad_linear_amask(Q, K, V, dm: DecayMatrix, dO) -> GradBundle:
    """``O = (Q K^T ⊙ M ⊙ A_M) V``."""
    A = _dense(dm)  # already masked
    dOV = dO @ _t(V)
    P = dOV * A
    X = Q @ _t(K)
    E = X * A * dOV
    return _bundle(P @ K, _t(P) @ Q, _t(X * A) @ dO, E)


def grad_squared_amask(Q, K, V, dm: DecayMatrix, dO) -> GradBundle:
    """``O = ((Q K^T)^2 ⊙ M ⊙ A_M) V``."""
    A = _dense(dm)
    X = Q @ _t(K)
    dOV = dO @ _t(V)
    P = 2.0 * X * dOV * A
    Y = X * X * A
    return _bundle(P @ K, _t(P) @ Q, _t(Y) @ dO, Y * dOV)


def grad_twomamba(Q, K, V, dm: DecayMatrix, dO, eps: float = 1e-9) -> GradBundle:
    """2Mamba: squared scores, decay mask, row-sum normalization."""
    A = _dense(dm)
    M = causal_mask(Q.shape[-2], Q.dtype)
    X = Q @ _t(K)
    Y = X * X * A
    S = guard(Y.sum(axis=-1, keepdims=True), eps)
    Y_N = Y / S
    dOV = dO @ _t(V)
    G = dOV * M - _live(S, eps) * (Y_N * dOV).sum(axis=-1, keepdims=True)
    dY = G / S * M
    # printed form drops A_M here
    D = 2.0 * X * A * dY
    # printed form drops 1/S here
    E = Y * dY
    return _bundle(D @ K, _t(D) @ Q, _t(Y_N) @ dO, E)


def grad_twomamba_e(Q, K, V, dm: DecayMatrix, dO) -> GradBundle:
    """2Mamba-E: ``exp(q.k + a_cs_i - a_cs_j)`` normalized per row."""
    from .maskgen import decay_exponent

    logits = Q @ _t(K) + decay_exponent(dm.a_cs)
    Y = np.exp(logits - logits.max(axis=-1, keepdims=True))
    Y_N = Y / Y.sum(axis=-1, keepdims=True)
    O = Y_N @ V
    M = causal_mask(Q.shape[-2], Q.dtype)
    G = (dO @ _t(V)) * M - (O * dO).sum(axis=-1, keepdims=True)
    D = Y_N * G * M
    # printed as D K^T, which does not type-check
    return _bundle(D @ K, _t(D) @ Q, _t(Y_N) @ dO, D)


KERNEL_GRADS = {
    "linear": grad_linear,
    "linear_smnorm": grad_linear_smnorm,
    "linear_amask": grad_linear_amask,
    "squared_amask": grad_squared_amask,
    "twomamba": grad_twomamba,
    "twomamba_e": grad_twomamba_e,
}


def kernel_backward(dO: np.ndarray, V: np.ndarray, Q: np.ndarray, K: np.ndarray,
                    cache: KernelCache) -> GradBundle:
    """Backward of :func:`seqmix.forward.attention_kernel` for any order/norm/mask mix."""
    M = causal_mask(Q.shape[-2], Q.dtype)
    dOV = dO @ _t(V)
    if cache.normalize:
        Y_N = cache.Y_N
        dYN = dOV * M
        live = 1.0 if cache.order == "exponential" else _live(cache.S, cache.eps)
        centered = dYN - live * (Y_N * dYN).sum(axis=-1, keepdims=True)
        if cache.order == "exponential":
            # d logits = Y_N ⊙ (G - rowsum(Y_N ⊙ G)); the decay enters the logits additively
            dL = Y_N * centered
            dX, E = dL, dL
        else:
            dY = centered / cache.S * M
            E = cache.Y * dY
    else:
        dY = dOV * M
        E = cache.Y * dY
    if cache.order != "exponential":
        dF = dY * cache.dense
        dX = dF if cache.order == "linear" else 2.0 * cache.X * dF
    if cache.scale != 1.0:
        dX = dX * cache.scale
    return _bundle(dX @ K, _t(dX) @ Q, _t(cache.Y_N) @ dO, E)


# ---------------------------------------------------------------------------
# stage closed forms
# ---------------------------------------------------------------------------


def _wgrad(x, dy):
    """``x^T dy`` summed over every leading axis."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _sum_to_last(x):
    return x.reshape(-1, x.shape[-1]).sum(axis=0)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def rmsnorm_backward(dy, x, gain, rms):
    """Gradients of ``x / rms * gain`` where ``rms = sqrt(mean(x^2) + eps)``."""
    u = dy * gain
    C = x.shape[-1]
    dx = u / rms - x * (u * x).sum(axis=-1, keepdims=True) / (C * rms ** 3)
    dgain = _sum_to_last(dy * x / rms)
    return dx, dgain


def conv_backward(d_pre, x, weight):
    """Adjoint of the causal depthwise conv (pre-activation).

    Time is the second-to-last axis. Returns ``(dx, dweight, dbias)``.
    """
    n = x.shape[-2]
    window = weight.shape[1]
    dx = d_pre * weight[:, 0]
    dw = np.zeros_like(weight)
    dw[:, 0] = _sum_to_last(d_pre * x)
    for s in range(1, window):
        if s >= n:
            break
        dx[..., :-s, :] += d_pre[..., s:, :] * weight[:, s]
        dw[:, s] = _sum_to_last(d_pre[..., s:, :] * x[..., :-s, :])
    return dx, dw, _sum_to_last(d_pre)


def activation_backward(dy, x, kind):
    if kind == "none":
        return dy
    if kind == "relu":
        return dy * (x > 0)
    if kind == "silu":
        return dy * silu_grad(x)
    raise ValueError(kind)


def block_backward(dout: np.ndarray, cache, w: BlockWeights):
    """Backward through :func:`seqmix.forward.block_forward`.

    Returns ``(dh, grads)`` with ``grads`` keyed like :meth:`BlockWeights.arrays`.
    Contributions from activations used twice (``dt`` in decay and values,
    ``V`` in the kernel and the D residual) are summed.
    """
    c = cache
    cfg = c.cfg
    h = c.h
    grads: dict[str, np.ndarray] = {}

    grads["W_out"] = _wgrad(c.normed, dout)
    d_normed = dout @ w.W_out.T
    if cfg.norm == "output_rmsnorm":
        dg, grads["rms_gain"] = rmsnorm_backward(d_normed, c.g, w.rms_gain, c.rms)
    else:
        dg = d_normed
        grads["rms_gain"] = np.zeros_like(w.rms_gain)

    dh = np.zeros_like(h)
    if cfg.z_gate:
        dy = dg * c.sig_z
        dZ = dg * c.y * c.sig_z * (1.0 - c.sig_z)
        grads["W_z"] = _wgrad(h, dZ)
        dh += dZ @ w.W_z.T
    else:
        dy = dg

    dyh = split_heads(dy, w.n_heads)
    dV = np.zeros_like(c.V)
    if cfg.d_residual:
        D = w.D.reshape(w.n_heads, 1, w.d_head)
        dV += dyh * D
        grads["D"] = _sum_to_last(merge_heads(dyh * c.V))

    kb = kernel_backward(dyh, c.Vd, c.Qa, c.Ka, c.kernel)
    ddt = np.zeros_like(c.dt) if c.dt is not None else None
    if cfg.discretize_values:
        dV += kb.dV * c.dt[..., None]
        ddt += (kb.dV * c.V).sum(axis=-1)
    else:
        dV += kb.dV
    dQ = activation_backward(kb.dQ, c.Q, cfg.qk_activation)
    dK = activation_backward(kb.dK, c.K, cfg.qk_activation)

    if cfg.amask != "none":
        da = kb.dA_logits  # [..., H, N]
        if cfg.amask == "original":
            grads["A_log"] = _sum_to_last((da * c.a).swapaxes(-1, -2))
            ddt += da * (-np.exp(w.A_log))[:, None]
        else:
            du = -da.swapaxes(-1, -2) * sigmoid(c.u_A)  # [..., N, H]
            grads["W_A"] = _wgrad(h, du)
            dh += du @ w.W_A.T

    if cfg.needs_dt:
        d_pre = ddt.swapaxes(-1, -2) * sigmoid(c.dt_pre)
        grads["W_dt"] = _wgrad(h, d_pre)
        grads["dt_bias"] = _sum_to_last(d_pre)
        dh += d_pre @ w.W_dt.T

    dC = np.concatenate([merge_heads(dQ), merge_heads(dK), merge_heads(dV)], axis=-1)
    dC_pre = activation_backward(dC, c.C_pre, w.conv.activation)
    dP, grads["conv_weight"], db = conv_backward(dC_pre, c.P, w.conv.weight)
    if w.conv.bias is not None:
        grads["conv_bias"] = db
    grads["W_QKV"] = _wgrad(h, dP)
    dh += dP @ w.W_QKV.T
    return dh, grads


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def finite_diff_oracle(forward: Callable[..., np.ndarray], params: Mapping[str, np.ndarray],
                       dO, step: float = 1e-5, wrt=None) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``sum(forward(**params) * dO)``.

    ``wrt`` limits which entries of ``params`` are perturbed (default: all).
    The forward is called twice on the unperturbed point first; any
    difference between the two results raises :class:`OracleError`.
    """
    if step <= 0:
        raise OracleError("step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    first = np.asarray(forward(**base))
    second = np.asarray(forward(**base))
    if not np.array_equal(first, second):
        raise OracleError("forward is not deterministic")
    dO = np.broadcast_to(np.asarray(dO, dtype=np.float64), first.shape)
    names = list(base) if wrt is None else list(wrt)
    out = {}
    for name in names:
        x = base[name]
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = np.sum(np.asarray(forward(**base)) * dO)
            flat[i] = orig - step
            fm = np.sum(np.asarray(forward(**base)) * dO)
            flat[i] = orig
            g.reshape(-1)[i] = (fp - fm) / (2.0 * step)
        out[name] = g
    return out


def relative_error(a, b) -> float:
    """``max|a - b| / (max(|a|_inf, |b|_inf) + 1e-8)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    return float(np.max(np.abs(a - b), initial=0.0) / (scale + 1e-8))
