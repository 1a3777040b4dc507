"""Self-checks shared by the command line and the acceptance tests.

Each function builds its own random instance from a seed and returns plain
rows (dicts) so callers can print CSV or assert on them.
"""

from __future__ import annotations

import time

import numpy as np

from .backward import KERNEL_GRADS, finite_diff_oracle, relative_error
from .config import init_block_weights, preset
from .errors import ConfigurationError
from .forward import (attention_kernel, kernel_linear, kernel_linear_amask, kernel_linear_smnorm,
                      kernel_squared_amask, kernel_twomamba, kernel_twomamba_e, variant_forward)
from .maskgen import decay_matrix_from_logits, logsigmoid_softplus_identity_check
from .recurrence import phi2, run_stateful
from .tensorops import softplus

KERNEL_FORWARDS = {
    "linear": kernel_linear,
    "linear_smnorm": kernel_linear_smnorm,
    "linear_amask": kernel_linear_amask,
    "squared_amask": kernel_squared_amask,
    "twomamba": kernel_twomamba,
    "twomamba_e": kernel_twomamba_e,
}
MASKED = {"linear_amask", "squared_amask", "twomamba", "twomamba_e"}
# plain linear + softmax norm is only defined on a non-negative score image
NONNEG_QK = {"linear_smnorm"}

GRAD_TOL = 1e-6
EQUIV_TOL = 1e-9
IDENTITY_TOL = 1e-12


def kernel_instance(kernel: str, rng: np.random.Generator, H=2, N=8, d=4):
    Q, K, V = (rng.standard_normal((H, N, d)) for _ in range(3))
    if kernel in NONNEG_QK:
        Q, K = np.abs(Q), np.abs(K)
    a = -softplus(rng.standard_normal((H, N)) - 1.0)
    dO = rng.standard_normal((H, N, d))
    return Q, K, V, a, dO


def gradcheck_kernel(kernel: str, seed: int, H=2, N=8, d=4, step=1e-5) -> dict:
    """Analytic kernel gradient against central differences on one instance."""
    if kernel not in KERNEL_GRADS:
        raise ConfigurationError(f"unknown kernel {kernel!r}; valid kernels: {', '.join(KERNEL_GRADS)}")
    rng = np.random.default_rng(seed)
    Q, K, V, a, dO = kernel_instance(kernel, rng, H, N, d)
    fwd = KERNEL_FORWARDS[kernel]
    if kernel in MASKED:
        g = KERNEL_GRADS[kernel](Q, K, V, decay_matrix_from_logits(a), dO)
        fd = finite_diff_oracle(lambda Q, K, V, a: fwd(Q, K, V, decay_matrix_from_logits(a)),
                                {"Q": Q, "K": K, "V": V, "a": a}, dO, step)
    else:
        g = KERNEL_GRADS[kernel](Q, K, V, dO)
        fd = finite_diff_oracle(fwd, {"Q": Q, "K": K, "V": V}, dO, step)
    analytic = g.as_dict()
    errs = {name: relative_error(analytic[name], fd[name]) for name in fd}
    row = {"kernel": kernel, "seed": seed, "H": H, "N": N, "d": d}
    for name in ("Q", "K", "V", "a"):
        row[f"rel_{name}"] = errs.get(name, 0.0)
    row["max_rel"] = max(errs.values())
    row["pass"] = int(row["max_rel"] < GRAD_TOL)
    return row


def equivalence(preset_name: str, n: int, d_head: int, heads: int, seed: int,
                block=None, precision=np.float64) -> dict:
    """Per-token relative deviation between stateful and quadratic paths."""
    cfg = preset(preset_name)
    rng = np.random.default_rng(seed)
    d_model = heads * d_head
    w = init_block_weights(cfg, d_model, heads, d_head, rng, dtype=precision)
    h = rng.standard_normal((n, d_model)).astype(precision)
    t0 = time.perf_counter()
    ref = variant_forward(h, cfg, w)
    t1 = time.perf_counter()
    out, trace = run_stateful(h, cfg, w, block=block)
    t2 = time.perf_counter()
    num = np.max(np.abs(out - ref), axis=-1)
    den = np.maximum(np.max(np.abs(ref), axis=-1), np.max(np.abs(out), axis=-1)) + 1e-300
    dev = num / den
    return {"preset": preset_name, "per_token": dev, "max": float(dev.max()),
            "quadratic_s": t1 - t0, "stateful_s": t2 - t1, "trace": trace,
            "pass": bool(dev.max() < EQUIV_TOL)}


def phi2_identity(d: int, pairs: int, seed: int) -> float:
    """Gap between ``phi2(x).phi2(y)`` and ``(x.y)^2`` over ``pairs`` draws.

    Measured with :func:`relative_error` (max-norm scaled). A per-pair ratio
    is meaningless when ``x.y`` is near zero: both sides then sit at the
    rounding floor of the dot product.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((pairs, d))
    y = rng.standard_normal((pairs, d))
    lhs = np.einsum("pf,pf->p", phi2(x), phi2(y))
    rhs = np.einsum("pd,pd->p", x, y) ** 2
    return relative_error(lhs, rhs)


def identity_grid(lo=-30.0, hi=30.0, step=0.01) -> np.ndarray:
    n = int(round((hi - lo) / step)) + 1
    return np.linspace(lo, hi, n)


def sigmoid_identity() -> float:
    return logsigmoid_softplus_identity_check(identity_grid())


def online_max_blocks(n: int, d_head: int, seed: int, blocks=(1, 4, 16, None)) -> dict:
    """Stateful 2Mamba-E outputs for several KV scan block sizes."""
    cfg = preset("twomamba_e")
    rng = np.random.default_rng(seed)
    w = init_block_weights(cfg, d_head, 1, d_head, rng)
    h = rng.standard_normal((n, d_head))
    return {b: run_stateful(h, cfg, w, block=b)[0] for b in blocks}


def score_rows(Q, K, a_cs, order):
    """Normalized score matrix ``Y_N`` of a softmax-normalized kernel."""
    _, cache = attention_kernel(Q, K, np.zeros_like(Q), a_cs, order, True, return_cache=True)
    return cache.Y_N
