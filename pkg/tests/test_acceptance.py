"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` or as a script
(``python3 tests/test_acceptance.py``). The lines are also collected into the
pytest terminal summary by ``conftest.py``.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from seqmix import checks
from seqmix.backward import KERNEL_GRADS, relative_error
from seqmix.config import TWOMAMBA, TWOMAMBA_E, init_block_weights
from seqmix.forward import (attention_kernel, kernel_twomamba, kernel_twomamba_e, linear_attention_kv_first,
                            linear_attention_qk_first, merge_heads, softmax_attention, split_heads,
                            variant_forward)
from seqmix.harness import (RECALL_MAX_STEPS, RECALL_THRESHOLD, TinyModel, TinyModelConfig, cross_entropy,
                            loss_and_grads, recall_config, recall_task, train)
from seqmix.maskgen import decay_matrix_from_logits
from seqmix.memmodel import crossover, memcurve
from seqmix.recurrence import phi2

RESULTS = {}


def report(num, title, ok, detail, seconds, budget=None):
    if budget is not None and seconds > budget:
        ok = False
        detail += f"; over the {budget:.0f}s budget"
    line = f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail} [{seconds:.1f}s]"
    RESULTS[num] = line
    print(line)
    return ok


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for kernel in KERNEL_GRADS:
        rows = [checks.gradcheck_kernel(kernel, seed, H=2, N=16, d=8) for seed in range(20)]
        worst[kernel] = max(r["max_rel"] for r in rows)
    ok = all(v < 1e-6 for v in worst.values())
    detail = f"6 kernels x 20 instances, worst rel {max(worst.values()):.2e} (tol 1e-6)"
    assert report(1, "kernel gradients vs finite differences", ok, detail, time.perf_counter() - t0, 120), worst


def test_criterion_02_cross_path_equivalence():
    t0 = time.perf_counter()
    worst = {}
    for name in ("linear", "mamba2s", "twomamba", "mamba2", "softmax", "twomamba_e"):
        worst[name] = max(checks.equivalence(name, 256, 16, 2, seed)["max"] for seed in range(10))
    ok = all(v < 1e-9 for v in worst.values())
    detail = f"6 presets x 10 seeds at N=256, worst per-token rel {max(worst.values()):.2e} (tol 1e-9)"
    assert report(2, "stateful vs quadratic", ok, detail, time.perf_counter() - t0, 300), worst


def test_criterion_03_phi2_identity():
    t0 = time.perf_counter()
    errs = {d: checks.phi2_identity(d, 10_000, seed=d) for d in (2, 4, 8, 64)}
    lengths = {d: phi2(np.zeros(d)).shape[-1] for d in (2, 4, 8, 64)}
    ok = all(e < 1e-12 for e in errs.values()) and all(lengths[d] == d * (d + 1) // 2 for d in lengths)
    ok = ok and lengths[64] == 2080
    detail = f"worst rel {max(errs.values()):.2e} (tol 1e-12), length at d=64 is {lengths[64]}"
    assert report(3, "second-order feature map", ok, detail, time.perf_counter() - t0), (errs, lengths)


def test_criterion_04_memory_crossover():
    t0 = time.perf_counter()
    rep = memcurve(64, 2048, measure=True)
    first = next(r["N"] for r in rep.rows if r["kv_elems"] > r["state2_elems"])
    traces_match = all(r["measured_kv"] == r["kv_elems"] and r["measured_state"] == r["state2_elems"]
                       for r in rep.rows)
    ok = crossover(64) == 1058 and first == 1058 and traces_match
    detail = f"crossover(64)={crossover(64)}, curves cross at N={first}, measured traces equal: {traces_match}"
    assert report(4, "memory crossover", ok, detail, time.perf_counter() - t0)


def test_criterion_05_sigmoid_identity():
    t0 = time.perf_counter()
    dev = checks.sigmoid_identity()
    ok = dev < 1e-12 and checks.identity_grid().size == 6001
    assert report(5, "log-sigmoid identity", ok, f"max deviation {dev:.2e} over 6001 points (tol 1e-12)",
                  time.perf_counter() - t0)


def _squared_smnorm_reference(Q, K, V, dO):
    """Independent forward and backward of causal squared scores with row normalization."""
    n = Q.shape[-2]
    M = np.tril(np.ones((n, n)))
    X = Q @ K.swapaxes(-1, -2)
    Y = X * X * M
    s = Y.sum(-1, keepdims=True)
    P = Y / s
    dP = dO @ V.swapaxes(-1, -2)
    dY = (dP - (dP * P).sum(-1, keepdims=True)) / s
    dX = 2 * X * dY * M
    return P @ V, {"Q": dX @ K, "K": dX.swapaxes(-1, -2) @ Q, "V": P.swapaxes(-1, -2) @ dO}


def _softmax_reference(Q, K, V, dO):
    n = Q.shape[-2]
    X = np.where(np.tril(np.ones((n, n), bool)), Q @ K.swapaxes(-1, -2), -np.inf)
    P = np.exp(X - X.max(-1, keepdims=True))
    P /= P.sum(-1, keepdims=True)
    dP = dO @ V.swapaxes(-1, -2)
    dX = P * (dP - (dP * P).sum(-1, keepdims=True))
    return P @ V, {"Q": dX @ K, "K": dX.swapaxes(-1, -2) @ Q, "V": P.swapaxes(-1, -2) @ dO}


def test_criterion_06_reductions():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    errs = []
    for _ in range(5):
        Q, K, V, dO = rng.standard_normal((4, 2, 12, 4))
        dm = decay_matrix_from_logits(np.zeros((2, 12)))
        for kernel, grad, ref in ((kernel_twomamba, KERNEL_GRADS["twomamba"], _squared_smnorm_reference),
                                  (kernel_twomamba_e, KERNEL_GRADS["twomamba_e"], _softmax_reference)):
            out_ref, g_ref = ref(Q, K, V, dO)
            errs.append(relative_error(kernel(Q, K, V, dm), out_ref))
            g = grad(Q, K, V, dm, dO).as_dict()
            errs += [relative_error(g[k], g_ref[k]) for k in ("Q", "K", "V")]
    # the same reductions at block level: no decay mask, window-1 convolution
    for cfg, ref in ((TWOMAMBA, _squared_smnorm_reference), (TWOMAMBA_E, _softmax_reference)):
        cfg = replace(cfg, amask="none", conv_window=1)
        w = init_block_weights(cfg, 8, 2, 4, rng)
        h = rng.standard_normal((12, 8))
        P = h @ w.W_QKV
        Q, K, V = (split_heads(P[:, i * 8:(i + 1) * 8], 2) for i in range(3))
        expect = merge_heads(ref(Q, K, V, np.zeros_like(V))[0]) @ w.W_out
        errs.append(relative_error(variant_forward(h, cfg, w), expect))
    worst = max(errs)
    assert report(6, "reductions to squared and softmax attention", worst < 1e-10,
                  f"worst rel {worst:.2e} over forward and gradients (tol 1e-10)", time.perf_counter() - t0)


def test_criterion_07_compute_order():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for n in (1, 2, 17, 64, 128, 256):
        Q, K, V = rng.standard_normal((3, 2, n, 16))
        a, b = linear_attention_qk_first(Q, K, V), linear_attention_kv_first(Q, K, V)
        worst = max(worst, relative_error(a, b))
    assert report(7, "quadratic vs key-value-first order", worst < 1e-12, f"worst rel {worst:.2e} (tol 1e-12)",
                  time.perf_counter() - t0)


def test_criterion_08_normalization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    n = 32
    upper = np.triu_indices(n, 1)
    dev, negative, leaked = 0.0, False, False
    for order, nonneg in (("squared", False), ("exponential", False), ("linear", True)):
        for scale in (0.1, 1.0, 10.0):
            Q, K = rng.standard_normal((2, 2, n, 8)) * scale
            if nonneg:
                Q, K = np.abs(Q), np.abs(K)
            for a_cs in (None, np.cumsum(-rng.exponential(0.5, (2, n)), -1)):
                Y = checks.score_rows(Q, K, a_cs, order)
                dev = max(dev, np.max(np.abs(Y.sum(-1) - 1.0)))
                negative |= bool(np.any(Y < 0))
                leaked |= bool(np.any(Y[..., upper[0], upper[1]] != 0.0))
    ok = dev < 1e-10 and not negative and not leaked
    detail = f"max |row sum - 1| {dev:.2e}, negatives: {negative}, strict-upper nonzeros: {leaked}"
    assert report(8, "normalized score rows", ok, detail, time.perf_counter() - t0)


def test_criterion_09_online_max_blocking():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(3):
        outs = checks.online_max_blocks(64, 16, seed)
        full = outs[None]
        worst = max(worst, max(relative_error(o, full) for o in outs.values()))
    assert report(9, "block-size invariance of the exponential scan", worst < 1e-12,
                  f"blocks 1/4/16/full, worst rel {worst:.2e} (tol 1e-12)", time.perf_counter() - t0)


def _miniature_gradient_error():
    cfg = TinyModelConfig(d_model=8, n_heads=2, d_head=4, n_layers=1, vocab=8, seq_len=6, total_steps=1)
    model = TinyModel.init(cfg)
    rng = np.random.default_rng(10)
    tok, tgt = rng.integers(0, 8, (2, 2, 6))
    mask = np.ones((2, 6), bool)
    _, grads, _ = loss_and_grads(model, tok, tgt, mask)
    worst = 0.0
    for name, p in model.params.items():
        flat, fd = p.reshape(-1), np.zeros(p.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + 1e-6
            up = cross_entropy(model.forward(tok)[0], tgt, mask)[0]
            flat[i] = orig - 1e-6
            down = cross_entropy(model.forward(tok)[0], tgt, mask)[0]
            flat[i] = orig
            fd[i] = (up - down) / 2e-6
        worst = max(worst, relative_error(grads[name], fd.reshape(p.shape)))
    return worst


@pytest.mark.slow
def test_criterion_10_harness():
    t0 = time.perf_counter()
    fd = _miniature_gradient_error()
    rec = train(recall_config(), recall_task(), target_acc=RECALL_THRESHOLD)
    ok = fd < 1e-5 and rec.final_eval_acc > RECALL_THRESHOLD and rec.steps_done <= RECALL_MAX_STEPS
    detail = (f"recall acc {rec.final_eval_acc:.3f} at step {rec.steps_done} (need > {RECALL_THRESHOLD} "
              f"within {RECALL_MAX_STEPS}), model gradient rel {fd:.2e} (tol 1e-5)")
    assert report(10, "tiny model training and gradient", ok, detail, time.perf_counter() - t0, 600)


if __name__ == "__main__":
    import sys

    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_criterion_")]
    failed = 0
    for fn in tests:
        try:
            fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
