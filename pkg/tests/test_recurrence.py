from dataclasses import replace

import numpy as np
import pytest

from seqmix.checks import equivalence, online_max_blocks, phi2_identity
from seqmix.config import PRESETS, SOFTMAX, TWOMAMBA, init_block_weights, preset
from seqmix.errors import ConfigurationError, DimensionError, PreconditionError
from seqmix.forward import linear_attention_kv_first, softmax_attention, two_mamba_scores
from seqmix.maskgen import decay_matrix_from_logits
from seqmix.recurrence import (KVCache, Phi2Map, RecurrentState, deserialize_state, phi2, run_stateful,
                               serialize_state, step_first_order, step_kv_exponential,
                               step_second_order)


class TestPhi2:
    def test_hand_case(self):
        x, y = np.array([1.0, 2.0]), np.array([3.0, 4.0])
        assert np.allclose(phi2(x), [1.0, 2 * np.sqrt(2), 4.0])
        assert phi2(x) @ phi2(y) == pytest.approx(121.0, rel=1e-15)

    def test_zero(self):
        assert not np.any(phi2(np.zeros(5)))

    def test_length(self):
        assert phi2(np.ones(64)).shape == (2080,)
        assert Phi2Map(64).f == 64 * 65 // 2

    def test_index_table_order(self):
        assert Phi2Map(3).index_table == [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]

    @pytest.mark.parametrize("d", [2, 4, 8, 64])
    def test_kernel_identity(self, d):
        assert phi2_identity(d, 2000, seed=d) < 1e-12

    def test_bad_dim(self):
        with pytest.raises(DimensionError):
            Phi2Map(0)
        with pytest.raises(DimensionError):
            Phi2Map(3)(np.ones(4))


class TestFirstOrder:
    def test_first_step_exact(self, rng):
        q, k, v = rng.standard_normal((3, 4))
        st = RecurrentState.zeros(1, 4, False, 1)
        assert np.allclose(step_first_order(st, q, k, v, 0.0, 0.7), (q @ k) * 0.7 * v, rtol=1e-15)

    def test_strong_decay_resets(self, rng):
        st = RecurrentState.zeros(1, 3, False, 1)
        for _ in range(4):
            step_first_order(st, *rng.standard_normal((3, 3)))
        q, k, v = rng.standard_normal((3, 3))
        y = step_first_order(st, q, k, v, -50.0, 2.0)
        assert np.allclose(y, (q @ k) * 2.0 * v, rtol=1e-12, atol=1e-15)

    def test_matches_kv_first(self, rng):
        Q, K, V = np.abs(rng.standard_normal((3, 1, 10, 4)))
        ref = linear_attention_kv_first(Q, K, V, activation="none")[0]
        st = RecurrentState.zeros(1, 4, True, 1)
        out = np.array([step_first_order(st, Q[0, t], K[0, t], V[0, t]) for t in range(10)])
        assert np.max(np.abs(out - ref)) < 1e-12

    def test_state_definition(self, rng):
        K, V = rng.standard_normal((2, 6, 3))
        a = -rng.uniform(0, 1, 6)
        st = RecurrentState.zeros(1, 3, True, 1)
        for t in range(6):
            step_first_order(st, np.ones(3), K[t], V[t], a[t])
        w = np.array([np.exp(a[s + 1:].sum()) for s in range(6)])
        assert np.allclose(st.S, (K * w[:, None]).T @ V, rtol=1e-13)
        assert np.allclose(st.z, K.T @ w, rtol=1e-13)

    def test_wrong_order(self):
        with pytest.raises(PreconditionError):
            step_first_order(RecurrentState.zeros(2, 2, False, 1), *np.ones((3, 2)))
        with pytest.raises(ConfigurationError):
            RecurrentState.zeros(3, 2, False, 1)


class TestSecondOrder:
    def test_first_step_returns_value(self, rng):
        q, k, v = rng.standard_normal((3, 4))
        st = RecurrentState.zeros(2, 4, True, 2)
        assert np.allclose(step_second_order(st, q, k, v, -0.3), v, rtol=1e-12)

    @pytest.mark.parametrize("decay", [True, False])
    def test_matches_quadratic(self, rng, decay):
        Q, K, V = rng.standard_normal((3, 1, 32, 4))
        a = -rng.exponential(0.3, (1, 32)) if decay else np.zeros((1, 32))
        ref = two_mamba_scores(Q, K, decay_matrix_from_logits(a)) @ V
        st = RecurrentState.zeros(2, 4, True, 1)
        out = np.array([step_second_order(st, Q[0, t], K[0, t], V[0, t], a[0, t]) for t in range(32)])
        assert np.max(np.abs(out - ref[0]) / np.max(np.abs(ref[0]), axis=-1, keepdims=True)) < 1e-10


class TestKV:
    def test_single_entry(self, rng):
        k, v, q = rng.standard_normal((3, 5))
        c = KVCache.empty(5, False, 1)
        c.append(k, v)
        assert np.array_equal(step_kv_exponential(c, q), v)

    def test_no_decay_is_softmax(self, rng):
        Q, K, V = rng.standard_normal((3, 1, 12, 4))
        ref = softmax_attention(Q, K, V)[0]
        c = KVCache.empty(4, False, 1)
        for t in range(12):
            c.append(K[0, t], V[0, t])
            assert np.allclose(step_kv_exponential(c, Q[0, t], block=5), ref[t], rtol=1e-13, atol=1e-15)

    def test_empty_cache(self):
        with pytest.raises(PreconditionError):
            step_kv_exponential(KVCache.empty(2, True, 1), np.ones(2))

    def test_blocking_invariance(self):
        outs = online_max_blocks(48, 8, seed=3)
        full = outs[None]
        for b, o in outs.items():
            assert np.max(np.abs(o - full)) <= 1e-12 * np.max(np.abs(full))

    def test_huge_scores_stay_finite(self, rng):
        c = KVCache.empty(3, True, 1)
        for t in range(6):
            c.append(rng.standard_normal(3) * 300, rng.standard_normal(3), -0.5 * t)
        assert np.all(np.isfinite(step_kv_exponential(c, rng.standard_normal(3) * 300, -2.5, block=2)))


@pytest.mark.parametrize("name", list(PRESETS))
def test_stateful_matches_quadratic(name):
    r = equivalence(name, 8, 4, 2, seed=11)
    assert r["max"] < 1e-9


@pytest.mark.parametrize("name", list(PRESETS))
def test_stateful_with_conv_weights(name, rng):
    cfg = preset(name)
    w = init_block_weights(cfg, 6, 2, 3, rng)
    w = w.with_arrays({"conv_weight": rng.standard_normal(w.conv.weight.shape),
                       "conv_bias": rng.standard_normal(w.conv.channels)})
    h = rng.standard_normal((20, 6))
    from seqmix.forward import variant_forward
    ref = variant_forward(h, cfg, w)
    out, _ = run_stateful(h, cfg, w)
    assert np.max(np.abs(out - ref)) / np.max(np.abs(ref)) < 1e-9


class TestMemory:
    def test_twomamba_d64_steady_state(self, rng):
        w = init_block_weights(TWOMAMBA, 64, 1, 64, rng)
        _, trace = run_stateful(rng.standard_normal((3, 64)), TWOMAMBA, w)
        assert trace.head_counts(0) == [2080 * 64 + 2080 + 3 * 64] * 3 == [135_392] * 3

    def test_softmax_kv_growth(self, rng):
        w = init_block_weights(SOFTMAX, 64, 1, 64, rng)
        _, trace = run_stateful(rng.standard_normal((5, 64)), SOFTMAX, w)
        assert trace.head_counts(0) == [2 * t * 64 for t in range(1, 6)]

    @pytest.mark.parametrize("name", list(PRESETS))
    def test_counts_are_monotone_or_constant(self, name, rng):
        cfg = preset(name)
        w = init_block_weights(cfg, 8, 2, 4, rng)
        _, trace = run_stateful(rng.standard_normal((7, 8)), cfg, w)
        counts = trace.totals()
        if cfg.order == "exponential":
            assert all(b > a for a, b in zip(counts, counts[1:]))
        else:
            assert len(set(counts)) == 1


class TestSerialization:
    @pytest.mark.parametrize("order,normalize,window", [(1, False, 1), (1, True, 2), (2, True, 4), (2, False, 2)])
    def test_round_trip(self, rng, order, normalize, window):
        st = RecurrentState.zeros(order, 3, normalize, window)
        for _ in range(3):
            x = rng.standard_normal(9)
            st.conv.apply(x, np.ones((9, window)), None)
            (step_first_order if order == 1 else step_second_order)(st, *rng.standard_normal((3, 3)), -0.2)
        blob = serialize_state(st)
        back = deserialize_state(blob)
        assert (back.order, back.step, back.window) == (order, 3, window)
        assert np.array_equal(back.S, st.S) and np.array_equal(back.conv.buffer, st.conv.buffer)
        assert (back.z is None) == (st.z is None)
        if st.z is not None:
            assert np.array_equal(back.z, st.z)
        assert len(blob) == 40 + 8 * st.n_elems()

    def test_header_layout(self):
        st = RecurrentState.zeros(2, 4, True, 2)
        header = np.frombuffer(serialize_state(st)[:40], dtype="<i8")
        assert header.tolist() == [2, 4, 10, 2, 0]

    def test_corrupt_payload(self):
        blob = serialize_state(RecurrentState.zeros(1, 2, False, 1))
        with pytest.raises(DimensionError):
            deserialize_state(blob + b"\0" * 8)


def test_run_stateful_validation(rng):
    w = init_block_weights(TWOMAMBA, 8, 2, 4, rng)
    with pytest.raises(ConfigurationError):
        run_stateful(rng.standard_normal((4, 8)), replace(TWOMAMBA, conv_window=3), w)
    with pytest.raises(ConfigurationError):
        run_stateful(rng.standard_normal((4, 8)), "twomamba", w)
    with pytest.raises(DimensionError):
        run_stateful(rng.standard_normal((2, 4, 8)), TWOMAMBA, w)
