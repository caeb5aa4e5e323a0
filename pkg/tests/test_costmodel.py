import math

import pytest
from hypothesis import given, strategies as st

from aslkv.costmodel import CostModelSpec, evaluate, memory_ratio, overhead_terms, t_attn, tpot_ratio, ttft_ratio
from aslkv.errors import ConfigError


def spec(**kw):
    base = dict(num_layers=32, select_layer=15, n=131072, k=2048, head_dim=128, num_kv_heads=8, lobs=8, pool_width=7)
    base.update(kw)
    return CostModelSpec(**base)


class TestAttentionWork:
    def test_unit(self):
        assert t_attn(1, 1) == 2

    def test_typical(self):
        assert t_attn(2048, 128) == 570_425_344

    def test_long_context_ratio(self):
        assert t_attn(2048, 128) / t_attn(131072, 128) == pytest.approx(2.59e-4, rel=5e-3)

    def test_rejects_zero(self):
        with pytest.raises(ConfigError):
            t_attn(0, 128)


class TestTtft:
    @pytest.mark.parametrize(
        "L,sel,expected",
        [(32, 15, 0.50), (32, 23.9, 0.78), (28, 21.6, 0.81)],
    )
    def test_operating_points(self, L, sel, expected):
        assert ttft_ratio(spec(num_layers=L, select_layer=sel)) == pytest.approx(expected, abs=0.005)

    def test_last_layer_is_full_cost(self):
        assert ttft_ratio(spec(select_layer=31)) == 1.0

    def test_budget_equal_to_n(self):
        assert ttft_ratio(spec(k=131072)) == pytest.approx(1.0)

    @given(st.integers(0, 30), st.integers(1, 4096))
    def test_monotone_in_selection_layer(self, sel, k):
        s = spec(select_layer=sel, k=k, n=8192)
        deeper = spec(select_layer=sel + 1, k=k, n=8192)
        assert ttft_ratio(s) <= ttft_ratio(deeper) + 1e-15
        assert 0 < ttft_ratio(s) <= 1 + 1e-15

    @given(st.integers(1, 4095))
    def test_monotone_in_budget(self, k):
        assert ttft_ratio(spec(k=k, n=4096)) <= ttft_ratio(spec(k=k + 1, n=4096))


class TestTpot:
    def test_long_context(self):
        assert tpot_ratio(spec()) == 0.015625

    def test_budget_equal_to_n(self):
        assert tpot_ratio(spec(k=131072)) == 1.0

    def test_tiny(self):
        assert tpot_ratio(spec(n=2, k=1)) == 0.5


class TestMemory:
    def test_long_context(self):
        assert memory_ratio(spec()) == pytest.approx(0.016, abs=0.001)

    def test_no_lookback_is_exactly_tpot(self):
        s = spec(lobs=0)
        assert memory_ratio(s) == s.k / s.n

    def test_wider_pooling_halves_overhead(self):
        a = memory_ratio(spec(pool_width=7)) - tpot_ratio(spec())
        b = memory_ratio(spec(pool_width=14)) - tpot_ratio(spec())
        assert b == pytest.approx(a / 2, rel=1e-9)

    @given(st.integers(1, 64), st.integers(1, 10_000), st.integers(0, 16), st.integers(1, 15))
    def test_at_least_tpot(self, L, n, lobs, w):
        s = CostModelSpec(num_layers=L, select_layer=0, n=n, k=max(1, n // 3), lobs=lobs, pool_width=w)
        assert memory_ratio(s) >= tpot_ratio(s)


class TestOverhead:
    def test_negligible_against_attention(self):
        s = spec(lmin=10, select_layer=20)
        report = evaluate(s)
        extra = report.pooling + report.ranking + report.variance + report.topk
        assert extra < 1e-3 * report.attention

    def test_clamped_before_lmin(self):
        terms = overhead_terms(spec(lmin=20, select_layer=13))
        assert terms["pooling"] == terms["ranking"] == terms["variance"] == 0
        assert terms["topk"] == pytest.approx(131072 * math.log(2048))

    def test_union_bound(self):
        with pytest.raises(ConfigError):
            spec(union_size=2048 * 8 + 1)
        assert spec().m == 2048 * 8


@pytest.mark.parametrize(
    "kw",
    [dict(select_layer=32), dict(select_layer=-1), dict(k=0), dict(k=200_000), dict(num_layers=0, select_layer=0)],
)
def test_invalid_specs(kw):
    with pytest.raises(ConfigError):
        spec(**kw)
