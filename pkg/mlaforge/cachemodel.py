# mlaforge/cachemodel.py
"""
KV-cache memory accounting and the round-to-nearest group-affine quantizer
used by quantized latent caches.

Ratios are exact fractions. The headline ratio counts payload bits only;
scale/zero-point metadata is reported in a separate column.
"""
import math
from decimal import ROUND_HALF_DOWN, Decimal
from fractions import Fraction
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, field_serializer, field_validator

from .tensorio import ModelConfig
from .utils.errors import UsageError


# half of the float16 maximum, so max - min stays finite too
META_LIMIT = float(np.finfo(np.float16).max) / 2


class QuantSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    bits: int = 4
    group_size: int = 32
    meta_bits: int = 16

    @field_validator("bits")
    @classmethod
    def _check_bits(cls, bits: int) -> int:
        if bits not in (2, 4, 8, 16):
            raise ValueError(f"bits must be one of 2, 4, 8, 16 (got {bits})")
        return bits

    @field_validator("group_size")
    @classmethod
    def _check_group(cls, group_size: int) -> int:
        if group_size < 1:
            raise ValueError("group_size must be positive")
        return group_size

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1


class QuantizedRows(BaseModel):
    """Codes plus per-(row, group) scale and zero-point. The last group of a row may be short."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    codes: np.ndarray
    scale: np.ndarray
    zero: np.ndarray
    spec: QuantSpec

    @property
    def width(self) -> int:
        return int(self.codes.shape[1])


def _group_bounds(width: int, group_size: int) -> List[slice]:
    return [slice(start, min(start + group_size, width)) for start in range(0, width, group_size)]


def quantize_rows(rows: np.ndarray, spec: QuantSpec) -> QuantizedRows:
    """
    Per group: zero = min, scale = (max - min) / (2^bits - 1),
    code = round((x - zero) / scale) clamped to the code range.
    A constant group whose value is exact in float16 gets scale 0 and
    all-zero codes.

    Scale and zero are stored as float16. The zero is rounded down and the
    scale up, so the stored grid still spans [min, max] of every group.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise UsageError(f"quantize_rows expects a 2-D array, got shape {rows.shape}")
    if rows.size and np.max(np.abs(rows)) > META_LIMIT:
        raise UsageError(f"Values beyond {META_LIMIT} do not fit float16 quantization metadata")
    groups = _group_bounds(rows.shape[1], spec.group_size)
    code_dtype = np.uint8 if spec.bits <= 8 else np.uint16
    codes = np.zeros(rows.shape, dtype=code_dtype)
    scale = np.zeros((rows.shape[0], len(groups)), dtype=np.float16)
    zero = np.zeros((rows.shape[0], len(groups)), dtype=np.float16)
    for g, cols in enumerate(groups):
        block = rows[:, cols]
        low = block.min(axis=1)
        high = block.max(axis=1)
        z16 = low.astype(np.float16)
        z16 = np.where(z16.astype(np.float64) > low, np.nextafter(z16, np.float16(-np.inf)), z16)
        s16 = ((high - z16.astype(np.float64)) / spec.levels).astype(np.float16)
        short = z16.astype(np.float64) + spec.levels * s16.astype(np.float64) < high
        s16 = np.where(short, np.nextafter(s16, np.float16(np.inf)), s16)
        zero[:, g] = z16
        scale[:, g] = s16
        # codes are computed against the stored metadata
        z = z16.astype(np.float64)[:, None]
        s = s16.astype(np.float64)[:, None]
        safe = np.where(s > 0, s, 1.0)
        raw = np.clip(np.rint((block - z) / safe), 0, spec.levels)
        codes[:, cols] = np.where(s > 0, raw, 0).astype(code_dtype)
    return QuantizedRows(codes=codes, scale=scale, zero=zero, spec=spec)


def dequantize_rows(coded: QuantizedRows, dtype=np.float32) -> np.ndarray:
    out = np.empty(coded.codes.shape, dtype=np.float64)
    for g, cols in enumerate(_group_bounds(coded.width, coded.spec.group_size)):
        s = coded.scale[:, g].astype(np.float64)[:, None]
        z = coded.zero[:, g].astype(np.float64)[:, None]
        out[:, cols] = z + coded.codes[:, cols].astype(np.float64) * s
    return out.astype(dtype)


def format_reduction(ratio: Fraction) -> str:
    """Render a reduction ratio as a signed percent, two decimals, ties rounded toward zero."""
    percent = (Decimal(ratio.numerator) / Decimal(ratio.denominator) * 100).quantize(
        Decimal("0.01"), rounding=ROUND_HALF_DOWN
    )
    if percent == 0:
        return "0.00%"
    return f"-{percent}%" if percent > 0 else f"+{-percent}%"


def cache_ratio(cfg: ModelConfig) -> Fraction:
    """1 - (d_kv + 2r) / (2 d_h): latent cache against the 16-bit full cache."""
    return 1 - Fraction(cfg.d_kv_per_head + 2 * cfg.r, 2 * cfg.d_h)


def compound_ratio(cfg: ModelConfig, quant: QuantSpec, baseline_bits: int = 16) -> Fraction:
    return 1 - Fraction(cfg.d_kv_per_head + 2 * cfg.r, 2 * cfg.d_h) * Fraction(quant.bits, baseline_bits)


def quant_only_ratio(quant: QuantSpec, baseline_bits: int = 16) -> Fraction:
    """Quantizing the unconverted full cache."""
    return 1 - Fraction(quant.bits, baseline_bits)


class CacheReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    label: str
    variant: str
    bits: int
    scalars_per_token_layer: int
    baseline_scalars: int
    baseline_bits: int = 16
    reduction_ratio: Fraction
    overhead_bits: int = 0
    ratio_with_overhead: Fraction
    ratio_ckv_only: Optional[Fraction] = None

    @field_serializer("reduction_ratio", "ratio_with_overhead", "ratio_ckv_only")
    def _serialize_ratio(self, ratio: Optional[Fraction]) -> Optional[str]:
        return None if ratio is None else f"{ratio.numerator}/{ratio.denominator}"

    @property
    def percent(self) -> str:
        return format_reduction(self.reduction_ratio)

    def to_json(self) -> Dict[str, object]:
        payload = self.model_dump()
        payload["percent"] = self.percent
        payload["percent_with_overhead"] = format_reduction(self.ratio_with_overhead)
        payload["percent_ckv_only"] = None if self.ratio_ckv_only is None else format_reduction(self.ratio_ckv_only)
        return payload


def _metadata_bits(width: int, quant: Optional[QuantSpec]) -> int:
    if quant is None or quant.bits >= 16:
        return 0
    return math.ceil(width / quant.group_size) * 2 * quant.meta_bits


def latent_report(cfg: ModelConfig, quant: Optional[QuantSpec] = None, baseline_bits: int = 16) -> CacheReport:
    """Converted model: k_rope (n_g * 2r) plus c_kv (n_g * d_kv) scalars per token per layer."""
    bits = baseline_bits if quant is None else quant.bits
    baseline = 2 * cfg.n_g * cfg.d_h
    latent = cfg.n_g * cfg.d_kv_per_head
    rope = cfg.n_g * 2 * cfg.r
    headline = cache_ratio(cfg) if quant is None else compound_ratio(cfg, quant, baseline_bits)
    overhead = _metadata_bits(latent + rope, quant)
    payload_bits = (latent + rope) * bits
    ckv_only = None
    if quant is not None:
        ckv_only = 1 - Fraction(latent * bits + rope * baseline_bits + _metadata_bits(latent, quant),
                                baseline * baseline_bits)
    label = f"d_kv={cfg.d_kv_per_head} r={cfg.r}" + ("" if quant is None else f" int{quant.bits}")
    return CacheReport(
        label=label,
        variant="latent",
        bits=bits,
        scalars_per_token_layer=latent + rope,
        baseline_scalars=baseline,
        baseline_bits=baseline_bits,
        reduction_ratio=headline,
        overhead_bits=overhead,
        ratio_with_overhead=1 - Fraction(payload_bits + overhead, baseline * baseline_bits),
        ratio_ckv_only=ckv_only,
    )


def full_report(cfg: ModelConfig, quant: Optional[QuantSpec] = None, baseline_bits: int = 16) -> CacheReport:
    """Unconverted model: full k and v per kv head, optionally quantized."""
    bits = baseline_bits if quant is None else quant.bits
    baseline = 2 * cfg.n_g * cfg.d_h
    headline = Fraction(0) if quant is None else quant_only_ratio(quant, baseline_bits)
    overhead = _metadata_bits(baseline, quant)
    return CacheReport(
        label="full" + ("" if quant is None else f" int{quant.bits}"),
        variant="full",
        bits=bits,
        scalars_per_token_layer=baseline,
        baseline_scalars=baseline,
        baseline_bits=baseline_bits,
        reduction_ratio=headline,
        overhead_bits=overhead,
        ratio_with_overhead=1 - Fraction(baseline * bits + overhead, baseline * baseline_bits),
    )


class Preset(BaseModel):
    """Geometry of a published model; weights are never involved."""

    d: int
    n_h: int
    n_g: int
    d_h: int
    n_layers: int
    vocab: int
    r: int
    dkv_sweep: List[int]

    def config(self, d_kv_per_head: Optional[int] = None, r: Optional[int] = None) -> ModelConfig:
        return ModelConfig.from_dict({
            "d": self.d, "n_h": self.n_h, "n_g": self.n_g, "d_h": self.d_h,
            "n_layers": self.n_layers, "vocab": self.vocab,
            "r": self.r if r is None else r,
            "d_kv_per_head": self.dkv_sweep[0] if d_kv_per_head is None else d_kv_per_head,
        })


PRESETS: Dict[str, Preset] = {
    "135M": Preset(d=576, n_h=9, n_g=3, d_h=64, n_layers=30, vocab=49152, r=4, dkv_sweep=[32, 16, 8]),
    "360M": Preset(d=960, n_h=15, n_g=5, d_h=64, n_layers=32, vocab=49152, r=4, dkv_sweep=[32, 16, 8]),
    "1B7": Preset(d=2048, n_h=32, n_g=32, d_h=64, n_layers=24, vocab=49152, r=4, dkv_sweep=[32, 16, 8]),
    "7B": Preset(d=4096, n_h=32, n_g=32, d_h=128, n_layers=32, vocab=32000, r=8, dkv_sweep=[64, 32, 16]),
    "13B": Preset(d=5120, n_h=40, n_g=40, d_h=128, n_layers=40, vocab=32000, r=8, dkv_sweep=[64, 32, 16]),
}


def get_preset(name: str) -> Preset:
    preset = PRESETS.get(name)
    if preset is None:
        raise UsageError(f"Unknown preset '{name}'. Valid presets: {list(PRESETS)}")
    return preset


def bench_reports(configs: List[ModelConfig], quant: Optional[QuantSpec] = None) -> List[CacheReport]:
    """Baseline rows (16-bit and, if requested, quantized full cache) followed by one or two rows per config."""
    if not configs:
        return []
    reports = [full_report(configs[0])]
    if quant is not None:
        reports.append(full_report(configs[0], quant))
    for cfg in configs:
        reports.append(latent_report(cfg))
        if quant is not None:
            reports.append(latent_report(cfg, quant))
    return reports


def render_table(reports: List[CacheReport]) -> str:
    header = ["config", "bits", "scalars/tok/layer", "KV mem", "with meta", "c_kv only"]
    rows = [header]
    for report in reports:
        rows.append([
            report.label,
            str(report.bits),
            f"{report.scalars_per_token_layer}/{report.baseline_scalars}",
            report.percent,
            format_reduction(report.ratio_with_overhead),
            "-" if report.ratio_ckv_only is None else format_reduction(report.ratio_ckv_only),
        ])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
