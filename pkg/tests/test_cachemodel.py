# tests/test_cachemodel.py
from fractions import Fraction

import numpy as np
import pytest
from pydantic import ValidationError

from mlaforge.cachemodel import (
    PRESETS,
    QuantSpec,
    bench_reports,
    cache_ratio,
    compound_ratio,
    dequantize_rows,
    format_reduction,
    get_preset,
    latent_report,
    quant_only_ratio,
    quantize_rows,
    render_table,
)
from mlaforge.utils.errors import UsageError

MEMORY_TABLE = {
    "135M": {32: "-68.75%", 16: "-81.25%", 8: "-87.50%"},
    "360M": {32: "-68.75%", 16: "-81.25%", 8: "-87.50%"},
    "1B7": {32: "-68.75%", 16: "-81.25%", 8: "-87.50%"},
    "7B": {64: "-68.75%", 32: "-81.25%", 16: "-87.50%"},
    "13B": {64: "-68.75%", 32: "-81.25%", 16: "-87.50%"},
}

INT4_TABLE = {64: "-92.19%", 32: "-95.31%", 16: "-96.87%"}


class TestRatios:
    @pytest.mark.parametrize("preset,d_kv,expected", [
        (name, d_kv, percent) for name, row in MEMORY_TABLE.items() for d_kv, percent in row.items()
    ])
    def test_latent_cache_reduction(self, preset, d_kv, expected):
        assert format_reduction(cache_ratio(get_preset(preset).config(d_kv_per_head=d_kv))) == expected

    @pytest.mark.parametrize("d_kv,expected", list(INT4_TABLE.items()))
    def test_latent_plus_int4(self, d_kv, expected):
        cfg = get_preset("7B").config(d_kv_per_head=d_kv)
        assert format_reduction(compound_ratio(cfg, QuantSpec(bits=4))) == expected

    def test_ratios_are_exact_fractions(self):
        cfg = get_preset("7B").config(d_kv_per_head=64)
        assert cache_ratio(cfg) == Fraction(11, 16)
        assert compound_ratio(cfg, QuantSpec(bits=4)) == 1 - Fraction(5, 64)

    def test_sixteen_bit_quantization_is_identity(self):
        for name, preset in PRESETS.items():
            for d_kv in preset.dkv_sweep:
                cfg = preset.config(d_kv_per_head=d_kv)
                assert compound_ratio(cfg, QuantSpec(bits=16)) == cache_ratio(cfg), name

    def test_quantizing_the_full_cache(self):
        assert format_reduction(quant_only_ratio(QuantSpec(bits=4))) == "-75.00%"
        assert format_reduction(quant_only_ratio(QuantSpec(bits=2))) == "-87.50%"

    def test_rendering(self):
        assert format_reduction(Fraction(0)) == "0.00%"
        assert format_reduction(Fraction(1, 3)) == "-33.33%"


class TestReports:
    def test_latent_report_fields(self):
        cfg = get_preset("7B").config(d_kv_per_head=64)
        report = latent_report(cfg)
        assert report.scalars_per_token_layer == 32 * (64 + 16)
        assert report.baseline_scalars == 2 * 32 * 128
        assert report.percent == "-68.75%"
        assert report.overhead_bits == 0
        assert 0 <= report.reduction_ratio < 1

    def test_metadata_overhead_is_reported_separately(self):
        cfg = get_preset("7B").config(d_kv_per_head=64)
        report = latent_report(cfg, QuantSpec(bits=4))
        assert report.percent == "-92.19%"
        assert report.overhead_bits == (32 * 80 // 32) * 2 * 16
        assert report.ratio_with_overhead < report.reduction_ratio
        assert report.reduction_ratio > report.ratio_ckv_only > cache_ratio(cfg)

    def test_json_is_schema_stable(self):
        payload = latent_report(get_preset("7B").config(d_kv_per_head=64)).to_json()
        assert payload["reduction_ratio"] == "11/16"
        assert payload["percent"] == "-68.75%"
        assert set(payload) >= {"label", "variant", "bits", "ratio_with_overhead", "percent_ckv_only"}

    def test_bench_rows(self):
        configs = [get_preset("7B").config(d_kv_per_head=w) for w in (64, 16)]
        reports = bench_reports(configs, QuantSpec(bits=4))
        assert [r.percent for r in reports] == ["0.00%", "-75.00%", "-68.75%", "-92.19%", "-87.50%", "-96.87%"]
        table = render_table(reports)
        assert "-96.87%" in table
        assert table.splitlines()[0].startswith("config")

    def test_unknown_preset(self):
        with pytest.raises(UsageError):
            get_preset("70B")


class TestQuantizer:
    def test_constant_group(self):
        rows = np.full((1, 4), 5.0)
        coded = quantize_rows(rows, QuantSpec(bits=4))
        assert np.all(coded.codes == 0)
        assert coded.scale[0, 0] == 0.0
        assert np.array_equal(dequantize_rows(coded, dtype=np.float64), rows)

    def test_values_on_the_grid(self):
        rows = np.arange(16, dtype=np.float64)[None, :]
        coded = quantize_rows(rows, QuantSpec(bits=4))
        assert coded.codes.tolist() == [list(range(16))]
        assert np.array_equal(dequantize_rows(coded, dtype=np.float64), rows)

    @pytest.mark.parametrize("bits", [4, 2])
    def test_error_bounded_by_half_step(self, bits):
        rng = np.random.default_rng(bits)
        spec = QuantSpec(bits=bits, group_size=32)
        rows = rng.standard_normal((100, 96))
        coded = quantize_rows(rows, spec)
        restored = dequantize_rows(coded, dtype=np.float64)
        assert int(coded.codes.max()) <= spec.levels
        for g in range(3):
            cols = slice(32 * g, 32 * (g + 1))
            error = np.abs(rows[:, cols] - restored[:, cols]).max(axis=1)
            half_step = coded.scale[:, g].astype(np.float64) / 2
            assert np.all(error <= half_step * (1 + 1e-6) + 1e-6)
            if bits == 4:
                low = rows[:, cols].min(axis=1)
                spread = rows[:, cols].max(axis=1) - low
                # float16 metadata: zero and scale each off by at most one ulp (2**-10 relative)
                assert np.all(error <= (spread + np.abs(low) * 2**-10) / 30 * (1 + 2**-10) + 1e-9)

    def test_metadata_is_half_precision_and_covers_the_group(self):
        rows = np.random.default_rng(14).standard_normal((50, 64)) * 3
        spec = QuantSpec(bits=4, group_size=32)
        coded = quantize_rows(rows, spec)
        assert coded.scale.dtype == np.float16 and coded.zero.dtype == np.float16
        for g in range(2):
            block = rows[:, 32 * g: 32 * (g + 1)]
            z = coded.zero[:, g].astype(np.float64)
            top = z + spec.levels * coded.scale[:, g].astype(np.float64)
            assert np.all(z <= block.min(axis=1))
            assert np.all(top >= block.max(axis=1))

    def test_constant_group_off_the_half_grid(self):
        rows = np.full((1, 8), 0.1)
        coded = quantize_rows(rows, QuantSpec(bits=4))
        restored = dequantize_rows(coded, dtype=np.float64)
        assert np.all(np.abs(restored - rows) <= coded.scale[0, 0].astype(np.float64) / 2 + 1e-12)

    def test_values_beyond_half_range(self):
        with pytest.raises(UsageError):
            quantize_rows(np.array([[0.0, 1e5]]), QuantSpec(bits=4))

    def test_requantizing_is_idempotent(self):
        spec = QuantSpec(bits=4)
        rows = np.random.default_rng(11).standard_normal((20, 64))
        first = quantize_rows(rows, spec)
        second = quantize_rows(dequantize_rows(first, dtype=np.float64), spec)
        assert np.array_equal(first.codes, second.codes)

    def test_short_last_group(self):
        spec = QuantSpec(bits=8, group_size=32)
        coded = quantize_rows(np.random.default_rng(12).standard_normal((3, 40)), spec)
        assert coded.scale.shape == (3, 2)
        assert coded.width == 40

    def test_rows_are_coded_independently(self):
        spec = QuantSpec(bits=2)
        rows = np.random.default_rng(13).standard_normal((6, 48))
        together = quantize_rows(rows, spec).codes
        apart = np.concatenate([quantize_rows(rows[i:i + 1], spec).codes for i in range(6)])
        assert np.array_equal(together, apart)

    @pytest.mark.parametrize("bits", [3, 32])
    def test_unsupported_bit_widths(self, bits):
        with pytest.raises(ValidationError):
            QuantSpec(bits=bits)
