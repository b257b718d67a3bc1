# mlaforge/verify.py
"""
Conversion verification: runs the chain of forward-path equivalences on a
source/converted checkpoint pair and collects per-layer reconstruction errors.
"""
import time
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from .attention import (
    AttentionWeights,
    decode_step,
    forward_full,
    forward_mla_absorbed,
    forward_mla_naive,
    forward_partial,
    make_cache,
    registry as variant_registry,
    same_architecture,
)
from .calib import NormStats
from .convert import weights_digest
from .lowrank import LatentFactors, LayerError, layer_projections, reconstruction_report
from .rope import RopeSelection
from .tensorio import ModelConfig, TensorStore, TokenCorpus
from .utils.errors import ConfigError, VariantMismatchError
from .utils.logger import StageLogger

ROPE_LIMIT_TOLERANCE = 0.0
CONVERSION_TOLERANCE = 1e-4
ABSORPTION_TOLERANCE = 1e-4
ABSORBED_PRODUCT_TOLERANCE = 1e-6
DECODE_TOLERANCE = 1e-5


class LinkResult(BaseModel):
    name: str
    max_abs: float
    tolerance: float
    passed: bool
    enforced: bool = True


class VerifyReport(BaseModel):
    links: List[LinkResult]
    layers: List[LayerError]
    warnings: List[str] = []
    full_rank: bool = False
    n_sequences: int = 0
    seq_len: int = 0

    @property
    def passed(self) -> bool:
        return all(link.passed for link in self.links if link.enforced)

    def to_json(self) -> Dict[str, Any]:
        payload = self.model_dump()
        payload["passed"] = self.passed
        return payload

    def to_table(self) -> str:
        lines = [f"{'link':<34} {'max|delta|':>12} {'tol':>9}  status"]
        for link in self.links:
            status = "PASS" if link.passed else ("FAIL" if link.enforced else "REPORT")
            lines.append(f"{link.name:<34} {link.max_abs:>12.3e} {link.tolerance:>9.1e}  {status}")
        lines.append("")
        lines.append(f"{'layer':<6} {'mode':<14} {'rank':>5} {'|E|_F^2':>12} {'discarded':>12} {'rel':>10} {'max|E|':>10}")
        for row in self.layers:
            lines.append(
                f"{row.layer:<6} {row.mode:<14} {row.rank:>5} {row.total_sq_error:>12.4e} "
                f"{row.discarded_sq_sum:>12.4e} {row.relative_error:>10.3e} {row.max_abs_error:>10.3e}"
            )
        for warning in self.warnings:
            lines.append(f"warning: {warning}")
        lines.append("verification " + ("PASSED" if self.passed else "FAILED"))
        return "\n".join(lines)


def _stored_factors(cfg: ModelConfig, store: TensorStore) -> List[LatentFactors]:
    """Factors as written into a converted checkpoint, with the ledger's discarded sums."""
    ledger = {entry["layer"]: entry for entry in store.meta.get("ledger", [])}
    factors = []
    for layer in range(cfg.n_layers):
        entry = ledger.get(layer, {})
        factors.append(LatentFactors(
            layer=layer,
            mode=cfg.svd_mode,
            per_head=cfg.per_head_svd,
            w_dkv=np.asarray(store.layer(layer, "Wdkv"), dtype=np.float64),
            w_uk=np.asarray(store.layer(layer, "Wuk"), dtype=np.float64),
            w_uv=np.asarray(store.layer(layer, "Wuv"), dtype=np.float64),
            discarded=entry.get("discarded", {}),
            total_sq_norm=entry.get("total_sq_norm", 0.0),
            sweeps=entry.get("sweeps", 0),
        ))
    return factors


def _incremental_logits(cfg: ModelConfig, weights: AttentionWeights, variant: str, tokens: np.ndarray, cache_kind: str) -> np.ndarray:
    cache = make_cache(cache_kind, cfg.n_layers)
    rows = []
    for token in tokens:
        logits, cache = decode_step(cfg, weights, cache, int(token), variant)
        rows.append(logits)
    return np.stack(rows)


def _digest_warnings(
    src_store: TensorStore,
    conv_store: TensorStore,
    stats: Optional[NormStats],
    corpus: Optional[TokenCorpus],
) -> List[str]:
    warnings = []
    meta = conv_store.meta
    recorded = meta.get("source_weights_digest")
    if recorded is not None and recorded != weights_digest(src_store):
        warnings.append("source checkpoint weights differ from the ones the conversion was made from")
    stats_corpus = meta.get("stats_corpus_digest")
    if stats is not None and stats_corpus is not None and stats.corpus_digest != stats_corpus:
        warnings.append("given statistics differ from the ones used for conversion (corpus digest mismatch)")
    if corpus is not None and stats_corpus is not None and corpus.digest() != stats_corpus:
        warnings.append("conversion statistics were computed on a different corpus (corpus digest mismatch)")
    return warnings


def verify_conversion(
    src_cfg: ModelConfig,
    src_store: TensorStore,
    conv_cfg: ModelConfig,
    conv_store: TensorStore,
    sequences: Optional[Sequence[Sequence[int]]] = None,
    seed: int = 0,
    n_sequences: int = 4,
    seq_len: int = 16,
    stats: Optional[NormStats] = None,
    corpus: Optional[TokenCorpus] = None,
    cache_kinds: Sequence[str] = ("latent", "quant4"),
) -> VerifyReport:
    """
    Link by link: full ≡ partial(all subspaces) bit-exactly, partial ≡ naive
    latent (enforced only for a lossless conversion), naive ≡ absorbed,
    stored ≡ recomputed absorbed products, batched ≡ incremental per path.
    """
    if src_store.variant != "full" or conv_store.variant != "mla":
        raise VariantMismatchError("verify needs a full source checkpoint and an mla converted checkpoint")
    if not same_architecture(src_cfg, conv_cfg):
        raise ConfigError("Source and converted checkpoints describe different architectures")

    stage = StageLogger("verification")
    started = time.time()

    if sequences is None:
        rng = np.random.default_rng(seed)
        batch = [row for row in rng.integers(0, src_cfg.vocab, size=(n_sequences, seq_len))]
    else:
        batch = [np.asarray(seq, dtype=np.int64) for seq in sequences]
    stage.log_stage_start({"sequences": len(batch), "seed": seed})

    src = AttentionWeights.from_store(src_cfg, src_store)
    conv = AttentionWeights.from_store(conv_cfg, conv_store)
    selection: RopeSelection = conv.selection
    partial = src.with_selection(selection)
    full_rank = bool(conv_store.meta.get("full_rank", False))

    deltas: Dict[str, float] = {}

    def record(name: str, a: np.ndarray, b: np.ndarray) -> None:
        gap = float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)))) if a.size else 0.0
        deltas[name] = max(deltas.get(name, 0.0), gap)

    paths: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
        "full": lambda seq: forward_full(src_cfg, src, seq).logits,
        "partial": lambda seq: forward_partial(src_cfg, src, selection, seq).logits,
        "mla": lambda seq: forward_mla_naive(conv_cfg, conv, seq).logits,
        "mla-absorbed": lambda seq: forward_mla_absorbed(conv_cfg, conv, seq).logits,
    }
    for seq in batch:
        logits = {name: run(seq) for name, run in paths.items()}
        record("full==partial(all subspaces)", logits["full"], forward_partial(
            src_cfg, src, RopeSelection.full(src_cfg.d_h, src_cfg.n_layers, src_cfg.n_g), seq).logits)
        record("partial==mla", logits["partial"], logits["mla"])
        record("mla==mla-absorbed", logits["mla"], logits["mla-absorbed"])
        record("batched==incremental[full]", logits["full"], _incremental_logits(src_cfg, src, "full", seq, "full"))
        record("batched==incremental[partial]", logits["partial"], _incremental_logits(src_cfg, partial, "partial", seq, "full"))
        for kind in cache_kinds:
            for name in ("mla", "mla-absorbed"):
                batched = logits[name] if kind == "latent" else variant_registry.resolve(name).forward(
                    conv, seq, cache=make_cache(kind, conv_cfg.n_layers)).logits
                record(f"batched==incremental[{name}/{kind}]", batched, _incremental_logits(conv_cfg, conv, name, seq, kind))

    tolerances = {
        "full==partial(all subspaces)": ROPE_LIMIT_TOLERANCE,
        "partial==mla": CONVERSION_TOLERANCE,
        "mla==mla-absorbed": ABSORPTION_TOLERANCE,
    }
    links = []
    for name, gap in deltas.items():
        tolerance = tolerances.get(name, DECODE_TOLERANCE)
        enforced = name != "partial==mla" or full_rank
        links.append(LinkResult(name=name, max_abs=gap, tolerance=tolerance, passed=gap <= tolerance, enforced=enforced))
    drift = max(conv.absorbed_drift(), default=0.0)
    links.insert(3, LinkResult(
        name="absorbed products==factors",
        max_abs=drift,
        tolerance=ABSORBED_PRODUCT_TOLERANCE,
        passed=drift <= ABSORBED_PRODUCT_TOLERANCE,
    ))
    for link in links:
        stage.log_link(link.name, link.max_abs, link.tolerance, link.passed, link.enforced)

    originals = [layer_projections(src_store, selection, layer) for layer in range(src_cfg.n_layers)]
    layers = reconstruction_report(_stored_factors(conv_cfg, conv_store), originals)

    report = VerifyReport(
        links=links,
        layers=layers,
        warnings=_digest_warnings(src_store, conv_store, stats, corpus),
        full_rank=full_rank,
        n_sequences=len(batch),
        seq_len=int(max((len(seq) for seq in batch), default=0)),
    )
    for warning in report.warnings:
        stage.logger.warning(warning)
    stage.log_stage_complete((time.time() - started) * 1000)
    return report
