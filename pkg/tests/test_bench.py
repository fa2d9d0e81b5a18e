import numpy as np
import pytest

from diffgraph import _kernels
from diffgraph.bench import (
    CostSpec,
    REFERENCE_MFLOPS,
    cost_table,
    cost_table_text,
    diffgcn_flop_breakdown,
    flop_count,
    kernel_bench,
    latency_bench,
    make_conv_impls,
    make_table1_impls,
    table1_specs,
)


class TestFlopCount:
    def test_edge_mlp_reference_value(self):
        spec = CostSpec(method="edge_mlp", n_points=1024, k=10, c_in=64, c_out=128)
        assert flop_count(spec) == 1024 * 10 * 2 * 64 * 128 == 167_772_160

    def test_voxel_reference_value(self):
        spec = CostSpec(method="voxel", grid_side=12, kernel_volume=27, c_in=64, c_out=128)
        assert flop_count(spec) == 382_205_952

    def test_pointwise_reference_value(self):
        spec = CostSpec(method="pointwise_mlp", n_points=1024, c_in=64, c_out=128)
        assert flop_count(spec) == 8_388_608

    def test_diffgcn_breakdown(self):
        spec = CostSpec(method="diffgcn")
        br = diffgcn_flop_breakdown(spec)
        assert br["mlp"] == 1024 * 7 * 64 * 128
        assert br["messages"] == 6 * 64 * 1024 * 10
        assert flop_count(spec) == br["total"]

    def test_diffgcn_within_ten_percent_of_reference(self):
        spec = CostSpec(method="diffgcn")
        model = flop_count(spec) / 1e6
        assert abs(model - REFERENCE_MFLOPS["diffgcn"]) / REFERENCE_MFLOPS["diffgcn"] < 0.10

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            flop_count(CostSpec(method="transformer"))

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            CostSpec(method="edge_mlp", n_points=0)

    @pytest.mark.parametrize("factor_field", ["n_points", "c_in", "c_out", "k"])
    def test_multiplicative(self, factor_field):
        base = CostSpec(method="edge_mlp")
        doubled = CostSpec(**{**base.__dict__, factor_field: getattr(base, factor_field) * 2})
        assert flop_count(doubled) == 2 * flop_count(base)

    def test_diffgcn_mlp_term_independent_of_k(self):
        a = diffgcn_flop_breakdown(CostSpec(method="diffgcn", k=10))
        b = diffgcn_flop_breakdown(CostSpec(method="diffgcn", k=20))
        assert a["mlp"] == b["mlp"]
        assert b["messages"] == 2 * a["messages"]

    def test_edge_mlp_doubles_with_k_diffgcn_mlp_does_not(self):
        e1 = flop_count(CostSpec(method="edge_mlp", k=10))
        e2 = flop_count(CostSpec(method="edge_mlp", k=20))
        assert e2 == 2 * e1


class TestCostTable:
    def test_table1_rows(self):
        table = cost_table(table1_specs())
        by_method = {r["method"]: r for r in table["rows"]}
        assert by_method["voxel"]["mflops_model"] == 382.2
        assert by_method["pointwise_mlp"]["mflops_model"] == 8.4
        assert by_method["edge_mlp"]["mflops_model"] == 167.8
        row = by_method["diffgcn"]
        assert row["mflops_reference"] == 61.3
        assert "deviation_pct" in row and abs(row["deviation_pct"]) < 10.0
        assert row["mflops_mlp"] == 58.7
        assert row["mflops_messages"] == 3.9

    def test_empty_specs(self):
        table = cost_table([])
        assert table["rows"] == []
        assert cost_table_text(table)

    def test_text_contains_values(self):
        text = cost_table_text(cost_table(table1_specs()))
        for token in ("382.2", "8.4", "167.8", "61.3"):
            assert token in text


class TestLatency:
    def test_repetition_floor(self):
        with pytest.raises(ValueError):
            latency_bench({"noop": lambda: None}, repetitions=5)

    def test_median_within_minmax(self):
        stats = latency_bench({"noop": lambda: sum(range(100))}, repetitions=10, warmup=1)[
            "noop"
        ]
        assert stats["min_ms"] <= stats["median_ms"] <= stats["max_ms"]

    @pytest.mark.slow
    def test_diffgcn_faster_than_edge_mlp(self):
        impls = make_table1_impls(seed=0)
        stats = latency_bench(impls, repetitions=15, warmup=2)
        assert stats["diffgcn"]["median_ms"] < stats["edge_mlp"]["median_ms"]


class TestConvImpls:
    def test_outputs_have_spec_shapes(self):
        spec = CostSpec(method="diffgcn", n_points=64, k=4, c_in=5, c_out=6)
        impls = make_conv_impls(spec, seed=1)
        for fn in impls.values():
            assert fn().shape == (64, 6)


class TestKernelBench:
    def test_paths_agree(self):
        out = kernel_bench(n_points=256, k=4, c=8, repetitions=10)
        assert out["numpy"]["median_ms"] > 0
        if _kernels.HAVE_NUMBA:
            assert out["numba"] is not None
            assert out["max_abs_diff"] <= 1e-12
