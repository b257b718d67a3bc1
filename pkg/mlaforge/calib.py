# mlaforge/calib.py
"""
Head-wise 2-norm statistics: for every layer, query head and frequency
subspace, the mean over calibration tokens of |q chunk| * |k chunk|,
then averaged over the query heads sharing a kv group.
"""
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from pydantic import BaseModel, ValidationError, model_validator

from .attention import AttentionTap, AttentionWeights, registry as variant_registry
from .tensorio import ModelConfig, TensorStore, TokenCorpus
from .utils.errors import StatsSchemaError, VariantMismatchError
from .utils.logger import StageLogger, get_logger
from .utils.settings import get_thread_count

logger = get_logger("mlaforge.calib")

DEFAULT_MAX_SAMPLES = 1024


class NormStats(BaseModel):
    config_digest: str
    corpus_digest: str
    seq_len: int
    n_samples: int
    scores: List[List[List[float]]]

    @model_validator(mode="after")
    def _check_scores(self) -> "NormStats":
        widths = {len(group) for layer in self.scores for group in layer}
        groups = {len(layer) for layer in self.scores}
        if len(widths) > 1 or len(groups) > 1:
            raise ValueError("scores must be a rectangular [layer][group][subspace] table")
        for layer in self.scores:
            for group in layer:
                if any(not math.isfinite(s) or s < 0 for s in group):
                    raise ValueError("scores must be finite and nonnegative")
        return self

    @property
    def shape(self):
        return np.asarray(self.scores).shape

    def as_array(self) -> np.ndarray:
        return np.asarray(self.scores, dtype=np.float64)

    def check_against(self, cfg: ModelConfig) -> None:
        expected = (cfg.n_layers, cfg.n_g, cfg.n_sub)
        if tuple(self.shape) != expected:
            raise StatsSchemaError(f"Statistics cover shape {tuple(self.shape)}, the model needs {expected}")


def _pairwise_sum(parts: List[np.ndarray]) -> np.ndarray:
    """Fixed-shape binary-tree reduction; the tree depends only on len(parts)."""
    while len(parts) > 1:
        merged = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            merged.append(parts[-1])
        parts = merged
    return parts[0]


def head_scores_of(cfg: ModelConfig, q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Sum over rows of |q chunk| * |k chunk| per query head and subspace (n_h x n_sub)."""
    rows = q.shape[0]
    q_norms = np.sqrt(np.sum(q.reshape(rows, cfg.n_h, cfg.n_sub, 2) ** 2, axis=-1))
    k_norms = np.sqrt(np.sum(k.reshape(rows, cfg.n_g, cfg.n_sub, 2) ** 2, axis=-1))
    groups = [cfg.group_of(h) for h in range(cfg.n_h)]
    return np.sum(q_norms * k_norms[:, groups, :], axis=0)


def _sequence_scores(weights: AttentionWeights, tokens: np.ndarray) -> np.ndarray:
    cfg = weights.cfg
    totals = np.zeros((cfg.n_layers, cfg.n_h, cfg.n_sub))

    def observe(layer: int, q: np.ndarray, k: np.ndarray) -> None:
        totals[layer] = head_scores_of(cfg, q, k)

    variant_registry.resolve("full").forward(weights, tokens, tap=AttentionTap(on_qk=observe))
    return totals


def compute_norm_stats(
    cfg: ModelConfig,
    store: TensorStore,
    corpus: TokenCorpus,
    max_samples: Optional[int] = DEFAULT_MAX_SAMPLES,
) -> NormStats:
    """
    Run the float64 full-RoPE forward over the corpus and aggregate the
    pre-RoPE q/k chunk norm products into per-group subspace scores.
    """
    if store.variant != "full":
        raise VariantMismatchError("2-norm statistics need an unconverted (full-RoPE) checkpoint")
    corpus.check_vocab(cfg.vocab)
    if max_samples is not None and len(corpus) > max_samples:
        corpus = corpus.head(max_samples)

    stage = StageLogger("calibration")
    started = time.time()
    stage.log_stage_start({"samples": len(corpus), "seq_len": corpus.seq_len, "threads": get_thread_count()})

    weights = AttentionWeights.from_store(cfg, store, dtype=np.float64)
    with ThreadPoolExecutor(max_workers=get_thread_count()) as pool:
        per_sequence = list(pool.map(lambda seq: _sequence_scores(weights, seq), corpus.sequences))

    head_means = _pairwise_sum(per_sequence) / float(len(corpus) * corpus.seq_len)
    scores = np.zeros((cfg.n_layers, cfg.n_g, cfg.n_sub))
    for g in range(cfg.n_g):
        members = [h for h in range(cfg.n_h) if cfg.group_of(h) == g]
        scores[:, g, :] = np.mean(head_means[:, members, :], axis=1)

    stats = NormStats(
        config_digest=cfg.digest(),
        corpus_digest=corpus.digest(),
        seq_len=corpus.seq_len,
        n_samples=len(corpus),
        scores=scores.tolist(),
    )
    stage.log_stage_complete((time.time() - started) * 1000)
    return stats


def save_stats(stats: NormStats, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(stats.model_dump(), indent=2, sort_keys=True))
    logger.info(f"Saved 2-norm statistics ({stats.n_samples} samples) to {path}")


def load_stats(path: Union[str, Path], cfg: Optional[ModelConfig] = None) -> NormStats:
    try:
        stats = NormStats.model_validate(json.loads(Path(path).read_text()))
    except OSError as exc:
        raise StatsSchemaError(f"Cannot read statistics {path}: {exc}") from exc
    except (ValueError, ValidationError) as exc:
        raise StatsSchemaError(f"Malformed statistics file {path}: {exc}") from exc
    if cfg is not None:
        stats.check_against(cfg)
    return stats
