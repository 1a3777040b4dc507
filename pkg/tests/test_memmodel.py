import itertools
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from seqmix.config import TWOMAMBA_E
from seqmix.errors import DomainError
from seqmix.memmodel import (crossover, kv_cache_elems, measure_trace, memcurve,
                             second_order_state_elems, state_elems, term_count)


class TestTermCount:
    def test_head_dim_64(self):
        assert term_count(64) == 2080

    def test_trivial(self):
        assert term_count(1) == 1

    def test_enumeration(self):
        assert term_count(5, 2) == len(list(itertools.combinations_with_replacement(range(5), 2))) == 15

    def test_higher_order(self):
        assert term_count(4, 3) == 20

    def test_overflow_and_domain(self):
        with pytest.raises(OverflowError):
            term_count(10 ** 7, 5)
        with pytest.raises(DomainError):
            term_count(0)

    def test_identity_up_to_4096(self):
        for d in range(1, 4097):
            f = term_count(d, 2)
            assert f * d + f + 3 * d == second_order_state_elems(d) == d * (d + 1) ** 2 // 2 + 3 * d


class TestCrossover:
    @pytest.mark.parametrize("d,n", [(64, 1058), (1, 3), (2, 4)])
    def test_values(self, d, n):
        assert crossover(d) == n

    def test_scan_definition(self):
        for d in range(1, 200):
            n = crossover(d)
            assert 2 * n * d > second_order_state_elems(d) >= 2 * (n - 1) * d

    @given(st.integers(1, 3000))
    def test_monotone(self, d):
        assert crossover(d + 1) >= crossover(d)

    def test_close_to_closed_form(self):
        for d in (8, 64, 128):
            assert crossover(d) == math.floor((d + 1) ** 2 / 4 + 1.5) + 1


class TestCurve:
    def test_rows_at_crossover(self):
        rep = memcurve(64, 1100)
        row = rep.rows[1057]
        assert (row["N"], row["kv_elems"], row["state2_elems"]) == (1058, 135_424, 135_392)
        assert rep.first_exceedance() == 1058 == rep.crossover_n

    def test_small_n(self):
        row = memcurve(64, 1).rows[0]
        assert row["kv_elems"] == 128 < row["state2_elems"]

    def test_measured_matches_formula(self):
        rep = memcurve(16, 64, measure=True)
        assert rep.measured and all(r["match"] == 1 for r in rep.rows)
        assert [r["measured_kv"] for r in rep.rows] == [kv_cache_elems(n, 16) for n in range(1, 65)]

    def test_measured_d64_n64(self):
        assert measure_trace("twomamba", 64, 64) == [second_order_state_elems(64)] * 64
        assert measure_trace("softmax", 64, 64) == [kv_cache_elems(n, 64) for n in range(1, 65)]

    def test_twomamba_e_column(self):
        rep = memcurve(8, 5)
        assert [r["twomamba_e_elems"] for r in rep.rows] == [2 * n * 8 + n + 3 * 8 for n in range(1, 6)]
        assert measure_trace("twomamba_e", 8, 5) == [state_elems(TWOMAMBA_E, 8, n) for n in range(1, 6)]

    @pytest.mark.parametrize("name", ["linear", "mamba2", "mamba2s"])
    def test_other_presets_match_formula(self, name):
        from seqmix.config import preset
        assert measure_trace(name, 8, 6) == [state_elems(preset(name), 8, n) for n in range(1, 7)]

    def test_bad_nmax(self):
        with pytest.raises(DomainError):
            memcurve(8, 0)
