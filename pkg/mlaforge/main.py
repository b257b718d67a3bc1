# mlaforge/main.py
"""Command-line surface: init-toy, stats, convert, verify, bench, run."""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, List, Optional

from pydantic import ValidationError

from .attention import AttentionWeights, check_cache_variant, greedy_decode, registry as variant_registry
from .cachemodel import QuantSpec, bench_reports, get_preset, render_table
from .calib import DEFAULT_MAX_SAMPLES, compute_norm_stats, load_stats, save_stats
from .convert import convert_checkpoint, select_rope
from .lowrank import full_rank_dkv
from .rope import registry as strategy_registry
from .tensorio import ModelConfig, load_checkpoint, load_corpus, save_checkpoint, save_corpus, init_toy, synth_corpus
from .utils.errors import ConfigError, MlaForgeError, UsageError, VariantMismatchError, VerificationError
from .utils.logger import StageLogger, get_logger, setup_logger
from .utils.settings import get_log_level
from .verify import verify_conversion

logger = get_logger("mlaforge.main")

R_SWEEP = (1, 2, 4, 8)


def _catalogue(items: dict) -> str:
    return "; ".join(f"{key}: {item.description}" for key, item in items.items())


def _emit(args: argparse.Namespace, payload: Any, text: str) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True) if getattr(args, "json", False) else text)


def _parse_config(raw: str) -> ModelConfig:
    """--config takes inline JSON or a path to a JSON file."""
    try:
        text = raw if raw.lstrip().startswith("{") else Path(raw).read_text()
        data = json.loads(text)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"Cannot parse --config: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("--config must be a JSON object")
    return ModelConfig.from_dict(data)


def _parse_ids(raw: str) -> List[int]:
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise UsageError(f"Token ids must be comma-separated integers: {raw!r}") from exc


def cmd_init_toy(args: argparse.Namespace) -> int:
    cfg = _parse_config(args.config)
    store = init_toy(cfg, args.seed)
    save_checkpoint(cfg, store, args.out)
    payload = {"checkpoint": str(args.out), "config_digest": cfg.digest(), "tensors": len(store)}
    if args.corpus_out:
        corpus = synth_corpus(cfg.vocab, args.corpus_seqs, args.corpus_len, args.seed + 1)
        save_corpus(corpus, args.corpus_out)
        payload.update({"corpus": str(args.corpus_out), "corpus_digest": corpus.digest()})
    _emit(args, payload, "\n".join(f"{k}: {v}" for k, v in payload.items()))
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    cfg, store = load_checkpoint(args.ckpt)
    if store.variant != "full":
        raise VariantMismatchError(f"{args.ckpt} is a converted checkpoint; statistics need the full-RoPE source")
    stats = compute_norm_stats(cfg, store, load_corpus(args.corpus), max_samples=args.max_samples)
    save_stats(stats, args.out)
    payload = {"stats": str(args.out), "n_samples": stats.n_samples, "seq_len": stats.seq_len,
               "corpus_digest": stats.corpus_digest}
    _emit(args, payload, "\n".join(f"{k}: {v}" for k, v in payload.items()))
    return 0


def cmd_convert(args: argparse.Namespace) -> int:
    cfg, store = load_checkpoint(args.ckpt)
    stats = load_stats(args.stats) if args.stats else None
    overrides = {
        "strategy": args.strategy,
        "r": args.r,
        "svd_mode": args.svd,
        "per_head_svd": True if args.per_head_svd else None,
        "global_selection": True if args.global_selection else None,
    }
    if args.dkv == "full":
        target = cfg.with_conversion(**overrides)
        overrides["d_kv_per_head"] = full_rank_dkv(target)
    elif args.dkv is not None:
        try:
            overrides["d_kv_per_head"] = int(args.dkv)
        except ValueError as exc:
            raise UsageError(f"--dkv must be an integer or 'full', got {args.dkv!r}") from exc

    target, converted, factors = convert_checkpoint(cfg, store, stats, **overrides)
    save_checkpoint(target, converted, args.out)
    payload = {
        "checkpoint": str(args.out),
        "strategy": target.strategy,
        "r": target.r,
        "d_kv_per_head": target.d_kv_per_head,
        "svd_mode": target.svd_mode,
        "full_rank": converted.meta["full_rank"],
        "discarded_sq_sum": [f.discarded_sq_sum for f in factors],
    }
    lines = [f"converted -> {args.out} (strategy={target.strategy}, r={target.r}, "
             f"d_kv={target.d_kv_per_head}, svd={target.svd_mode})"]
    lines += [f"layer {f.layer}: discarded_sq_sum={f.discarded_sq_sum:.6e}" for f in factors]
    _emit(args, payload, "\n".join(lines))
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    src_cfg, src_store = load_checkpoint(args.src)
    conv_cfg, conv_store = load_checkpoint(args.converted)
    sequences = None
    if args.tokens:
        path = Path(args.tokens)
        sequences = load_corpus(path).sequences if path.is_file() else [_parse_ids(args.tokens)]
    report = verify_conversion(
        src_cfg, src_store, conv_cfg, conv_store,
        sequences=sequences,
        seed=args.seed,
        n_sequences=args.sequences,
        seq_len=args.seq_len,
        stats=load_stats(args.stats) if args.stats else None,
        corpus=load_corpus(args.corpus) if args.corpus else None,
    )
    _emit(args, report.to_json(), report.to_table())
    if not report.passed:
        failed = [link.name for link in report.links if link.enforced and not link.passed]
        raise VerificationError(f"Equivalence chain broken at: {', '.join(failed)}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    if (args.preset is None) == (args.config is None):
        raise UsageError("bench needs exactly one of --preset or --config")
    if args.preset is not None:
        preset = get_preset(args.preset)
        r = args.r if args.r is not None else preset.r
        widths = args.dkv or preset.dkv_sweep
        configs = [preset.config(d_kv_per_head=w, r=r) for w in widths]
        if args.r_sweep:
            configs += [preset.config(d_kv_per_head=widths[0], r=k) for k in R_SWEEP if k <= preset.d_h // 2 and k != r]
    else:
        base = _parse_config(args.config)
        base = base.with_conversion(r=args.r) if args.r is not None else base
        configs = [base.with_conversion(d_kv_per_head=w) for w in args.dkv] if args.dkv else [base]
        if args.r_sweep:
            configs += [base.with_conversion(r=k, d_kv_per_head=configs[0].d_kv_per_head)
                        for k in R_SWEEP if k <= base.d_h // 2 and k != base.r]
    quant = QuantSpec(bits=args.quant, group_size=args.group_size) if args.quant else None
    reports = bench_reports(configs, quant)
    _emit(args, [report.to_json() for report in reports], render_table(reports))
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    cfg, store = load_checkpoint(args.ckpt)
    variant = args.variant or ("mla" if store.variant == "mla" else "full")
    cache_kind = args.cache or ("latent" if variant.startswith("mla") else "full")
    check_cache_variant(variant, cache_kind)
    if variant.startswith("mla") != (store.variant == "mla"):
        raise VariantMismatchError(f"Variant '{variant}' cannot run a {store.variant} checkpoint")
    weights = AttentionWeights.from_store(cfg, store)
    if variant == "partial":
        stats = load_stats(args.stats) if args.stats else None
        weights = weights.with_selection(select_rope(cfg.with_conversion(strategy=args.strategy), stats))
    result = greedy_decode(cfg, weights, _parse_ids(args.prompt_ids), args.steps, variant, cache_kind)
    payload = result.model_dump()
    payload.update({"variant": variant, "cache": cache_kind})
    text = "tokens: " + ",".join(str(t) for t in result.tokens)
    text += "".join(f"\nstep {i}: {digest}" for i, digest in enumerate(result.step_digests))
    _emit(args, payload, text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlaforge", description="Convert MHA/GQA checkpoints to latent attention")
    parser.add_argument("--log-level", default=None, help="Override MLAFORGE_LOG_LEVEL (e.g. DEBUG, WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)
    strategies = strategy_registry.get_all_strategies()
    variants = variant_registry.get_all_variants()

    p = sub.add_parser("init-toy", help="Create a deterministic toy checkpoint (and optionally a corpus)")
    p.add_argument("--config", required=True, help="Model config as inline JSON or a JSON file path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--corpus-out", type=Path, default=None)
    p.add_argument("--corpus-seqs", type=int, default=8)
    p.add_argument("--corpus-len", type=int, default=32)
    p.add_argument("--json", action="store_true")
    p.set_defaults(handler=cmd_init_toy)

    p = sub.add_parser("stats", help="Compute head-wise 2-norm statistics")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--max-samples", type=int, default=DEFAULT_MAX_SAMPLES)
    p.add_argument("--json", action="store_true")
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("convert", help="Convert a full checkpoint to latent attention")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--stats", type=Path, default=None)
    p.add_argument("--strategy", choices=list(strategies), default=None, help=_catalogue(strategies))
    p.add_argument("--r", type=int, default=None)
    p.add_argument("--dkv", default=None, help="Latent width per kv head, or 'full' for a lossless conversion")
    p.add_argument("--svd", choices=["split", "joint"], default=None)
    p.add_argument("--per-head-svd", action="store_true")
    p.add_argument("--global-selection", action="store_true")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(handler=cmd_convert)

    p = sub.add_parser("verify", help="Check the forward-path equivalence chain")
    p.add_argument("--src", type=Path, required=True)
    p.add_argument("--converted", type=Path, required=True)
    p.add_argument("--tokens", default=None, help="Comma-separated ids or a corpus file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sequences", type=int, default=4)
    p.add_argument("--seq-len", type=int, default=16)
    p.add_argument("--stats", type=Path, default=None)
    p.add_argument("--corpus", type=Path, default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("bench", help="KV-cache memory accounting")
    p.add_argument("--preset", default=None, help="One of 135M, 360M, 1B7, 7B, 13B")
    p.add_argument("--config", default=None)
    p.add_argument("--dkv", type=int, action="append", default=None)
    p.add_argument("--r", type=int, default=None)
    p.add_argument("--r-sweep", action="store_true")
    p.add_argument("--quant", type=int, choices=[2, 4, 8, 16], default=None)
    p.add_argument("--group-size", type=int, default=32)
    p.add_argument("--json", action="store_true")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("run", help="Greedy decoding")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--prompt-ids", required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--variant", choices=list(variants), default=None, help=_catalogue(variants))
    p.add_argument("--cache", choices=["full", "latent", "quant4", "quant2"], default=None)
    p.add_argument("--strategy", choices=list(strategies), default=None, help=_catalogue(strategies))
    p.add_argument("--stats", type=Path, default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(handler=cmd_run)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    level = get_log_level()
    if args.log_level:
        level = logging.getLevelName(args.log_level.upper())
        level = level if isinstance(level, int) else get_log_level()
    setup_logger(level=level)
    logger.debug(f"Running mlaforge {args.command}")

    try:
        return args.handler(args)
    except MlaForgeError as exc:
        StageLogger(args.command).log_error(exc, f"mlaforge {args.command}")
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValidationError as exc:
        print(f"error [config]: {exc.errors()[0]['msg']}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
