# tests/test_attention.py
import numpy as np
import pytest

from mlaforge.attention import (
    AttentionTap,
    AttentionWeights,
    LatentCache,
    decode_step,
    forward_full,
    forward_mla_absorbed,
    forward_mla_naive,
    forward_partial,
    greedy_decode,
    logits_digest,
    make_cache,
    registry,
)
from mlaforge.calib import compute_norm_stats
from mlaforge.convert import convert_checkpoint, select_rope
from mlaforge.lowrank import full_rank_dkv
from mlaforge.rope import RopeSelection
from mlaforge.tensorio import init_toy, synth_corpus
from mlaforge.utils.errors import CorpusError, UsageError, VariantMismatchError
from tests.conftest import make_config, random_tokens
from tests.oracles import reference_forward, rms

FULL_RANK_CASES = {
    "mha-joint": ({"d": 64, "n_g": 4}, "joint"),
    "gqa-joint": ({"d": 32, "n_g": 2}, "joint"),
    "mha-split": ({"d": 32, "n_g": 4}, "split"),
    "gqa-split": ({"d": 24, "n_g": 2}, "split"),
}


def converted(cfg, store, dtype=np.float32, **overrides):
    overrides.setdefault("strategy", "uniform")
    target, conv_store, _ = convert_checkpoint(cfg, store, **overrides)
    return target, conv_store, AttentionWeights.from_store(target, conv_store, dtype=dtype)


def max_gap(a, b):
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))


class TestFullPath:
    def test_single_token_attends_to_its_own_value(self, gqa_config, gqa_store):
        weights = AttentionWeights.from_store(gqa_config, gqa_store, dtype=np.float64)
        token = 17
        out = forward_full(gqa_config, weights, [token]).attn_outputs[0]
        h = rms(gqa_store.get("embed")[[token]].astype(np.float64), gqa_store.get("L0.norm1"), gqa_config.norm_eps)
        v = h @ gqa_store.get("L0.Wv").astype(np.float64)
        heads = np.concatenate([v[:, (head // 2) * 16:(head // 2 + 1) * 16] for head in range(4)], axis=1)
        assert np.allclose(out, heads @ gqa_store.get("L0.Wo").astype(np.float64), rtol=0, atol=1e-12)

    def test_grouped_path_equals_expanded_heads(self, gqa_config, gqa_store):
        mha_cfg = gqa_config.with_conversion(n_g=4)
        expanded = gqa_store.copy()
        for layer in range(2):
            for name in ("Wk", "Wv"):
                w = gqa_store.get(f"L{layer}.{name}")
                expanded.put(f"L{layer}.{name}", np.concatenate([w[:, (h // 2) * 16:(h // 2 + 1) * 16] for h in range(4)], axis=1))
        tokens = random_tokens(gqa_config, 12, seed=1)
        grouped = forward_full(gqa_config, AttentionWeights.from_store(gqa_config, gqa_store), tokens).logits
        per_head = forward_full(mha_cfg, AttentionWeights.from_store(mha_cfg, expanded), tokens).logits
        assert np.array_equal(grouped, per_head)

    @pytest.mark.parametrize("n_g", [4, 2])
    def test_matches_reference_forward(self, n_g):
        cfg = make_config(n_g=n_g)
        store = init_toy(cfg, seed=3)
        tokens = random_tokens(cfg, 16, seed=4)
        oracle = reference_forward(cfg, store, tokens)
        exact = forward_full(cfg, AttentionWeights.from_store(cfg, store, dtype=np.float64), tokens).logits
        single = forward_full(cfg, AttentionWeights.from_store(cfg, store), tokens).logits
        assert max_gap(exact, oracle) <= 1e-9
        assert max_gap(single, oracle) <= 1e-4

    def test_causality(self, mha_config, mha_weights):
        tokens = random_tokens(mha_config, 12, seed=5)
        changed = tokens.copy()
        changed[6:] = (changed[6:] + 1) % mha_config.vocab
        a = forward_full(mha_config, mha_weights, tokens).logits
        b = forward_full(mha_config, mha_weights, changed).logits
        assert np.array_equal(a[:6], b[:6])
        assert not np.array_equal(a[6:], b[6:])

    def test_out_of_vocabulary_token(self, mha_config, mha_weights):
        with pytest.raises(CorpusError):
            forward_full(mha_config, mha_weights, [mha_config.vocab])


class TestPartialPath:
    @pytest.mark.parametrize("n_g", [4, 2])
    def test_all_subspaces_is_the_full_path(self, n_g):
        cfg = make_config(n_g=n_g)
        weights = AttentionWeights.from_store(cfg, init_toy(cfg, seed=0))
        tokens = random_tokens(cfg, 32, seed=6)
        full = forward_full(cfg, weights, tokens).logits
        partial = forward_partial(cfg, weights, RopeSelection.full(16, 2, n_g), tokens).logits
        assert np.array_equal(full, partial)

    def test_no_rotary_subspaces_ignore_position(self, mha_config, mha_weights):
        nope = RopeSelection.replicated("high", [], 16, 2, 4)
        tokens = np.array([5, 40, 99, 7])
        swapped = tokens[[0, 2, 1, 3]]
        scores = []
        for seq in (tokens, swapped):
            tap = AttentionTap(record_scores=True)
            forward_partial(mha_config, mha_weights, nope, seq, tap=tap)
            scores.append(tap.scores[0])
        assert np.array_equal(scores[1][:, 3, [0, 2, 1, 3]], scores[0][:, 3, :])
        assert np.array_equal(scores[1][:, 0, 0], scores[0][:, 0, 0])

    def test_two_norm_selection_matches_reference(self, mha_config, mha_store, corpus):
        sel = select_rope(mha_config, compute_norm_stats(mha_config, mha_store, corpus))
        tokens = random_tokens(mha_config, 16, seed=7)
        weights = AttentionWeights.from_store(mha_config, mha_store, dtype=np.float64)
        logits = forward_partial(mha_config, weights, sel, tokens).logits
        assert max_gap(logits, reference_forward(mha_config, mha_store, tokens, sets=sel.sets)) <= 1e-9

    def test_selection_shape_must_fit(self, mha_config, mha_weights):
        with pytest.raises(ValueError):
            forward_partial(mha_config, mha_weights, RopeSelection.full(16, 2, 2), [1, 2])


class TestLatentPaths:
    @pytest.mark.parametrize("case", sorted(FULL_RANK_CASES))
    def test_full_rank_conversion_reproduces_partial(self, case):
        overrides, mode = FULL_RANK_CASES[case]
        cfg = make_config(**overrides)
        store = init_toy(cfg, seed=8)
        d_kv = full_rank_dkv(cfg, mode=mode)
        target, conv_store, conv = converted(cfg, store, svd_mode=mode, d_kv_per_head=d_kv)
        assert conv_store.meta["full_rank"]
        source = AttentionWeights.from_store(cfg, store)
        for seed in range(16):
            tokens = random_tokens(cfg, 12, seed=100 + seed)
            partial = forward_partial(cfg, source, conv.selection, tokens).logits
            naive = forward_mla_naive(target, conv, tokens).logits
            absorbed = forward_mla_absorbed(target, conv, tokens).logits
            assert max_gap(partial, naive) <= 1e-4
            assert max_gap(naive, absorbed) <= 1e-4

    @pytest.mark.parametrize("svd_mode", ["joint", "split"])
    def test_absorbed_matches_naive_when_truncated(self, mha_config, mha_store, svd_mode):
        target, _, conv = converted(mha_config, mha_store, svd_mode=svd_mode, d_kv_per_head=4)
        for seed in range(4):
            tokens = random_tokens(mha_config, 32, seed=200 + seed)
            naive = forward_mla_naive(target, conv, tokens).logits
            absorbed = forward_mla_absorbed(target, conv, tokens).logits
            assert max_gap(naive, absorbed) <= 1e-4

    def test_identity_output_projection(self):
        cfg = make_config(n_layers=1)
        store = init_toy(cfg, seed=9)
        store.put("L0.Wo", np.eye(64, dtype=np.float32))
        target, _, conv = converted(cfg, store, dtype=np.float64)
        tokens = random_tokens(cfg, 10, seed=10)
        naive = forward_mla_naive(target, conv, tokens).attn_outputs[0]
        absorbed = forward_mla_absorbed(target, conv, tokens).attn_outputs[0]
        assert max_gap(naive, absorbed) <= 1e-6

    def test_single_token_reads_the_latent_value(self, mha_config, mha_store):
        target, conv_store, conv = converted(mha_config, mha_store, dtype=np.float64)
        out = forward_mla_naive(target, conv, [3]).attn_outputs[0]
        h = rms(mha_store.get("embed")[[3]].astype(np.float64), mha_store.get("L0.norm1"), mha_config.norm_eps)
        get = lambda name: conv_store.get(name).astype(np.float64)  # noqa: E731
        value = h @ get("L0.Wdkv") @ get("L0.Wuv")
        assert np.allclose(out, value @ get("L0.Wo"), rtol=0, atol=1e-10)

    def test_error_grows_as_latent_shrinks(self, mha_config, mha_store):
        source = AttentionWeights.from_store(mha_config, mha_store)
        tokens = [random_tokens(mha_config, 16, seed=300 + s) for s in range(3)]
        gaps = []
        for d_kv in (4, 8, 16):
            target, _, conv = converted(mha_config, mha_store, d_kv_per_head=d_kv)
            total = 0.0
            for seq in tokens:
                diff = forward_mla_naive(target, conv, seq).logits - forward_partial(mha_config, source, conv.selection, seq).logits
                total += float(np.sum(diff.astype(np.float64) ** 2))
            gaps.append(np.sqrt(total))
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] <= 1e-3

    @pytest.mark.parametrize("variant", ["mla", "mla-absorbed"])
    def test_softmax_rows_sum_to_one(self, mha_config, mha_store, variant):
        _, _, conv = converted(mha_config, mha_store)
        tap = AttentionTap(record_scores=True)
        registry.resolve(variant).forward(conv, random_tokens(mha_config, 20, seed=11), tap=tap)
        for probs in tap.probs:
            assert np.max(np.abs(probs.sum(axis=-1) - 1.0)) <= 1e-6

    def test_causality(self, mha_config, mha_store):
        target, _, conv = converted(mha_config, mha_store)
        tokens = random_tokens(mha_config, 12, seed=12)
        changed = tokens.copy()
        changed[4:] = (changed[4:] + 3) % mha_config.vocab
        a = forward_mla_absorbed(target, conv, tokens).logits
        b = forward_mla_absorbed(target, conv, changed).logits
        assert np.array_equal(a[:4], b[:4])

    def test_naive_path_needs_converted_weights(self, mha_config, mha_weights):
        with pytest.raises(VariantMismatchError):
            forward_mla_naive(mha_config, mha_weights, [1, 2])

    def test_stored_products_match_factors(self, mha_config, mha_store):
        _, _, conv = converted(mha_config, mha_store)
        assert max(conv.absorbed_drift()) <= 1e-6

    def test_stored_products_match_factors_grouped(self, gqa_config, gqa_store):
        _, _, conv = converted(gqa_config, gqa_store, d_kv_per_head=6)
        assert max(conv.absorbed_drift()) <= 1e-6


DECODE_CASES = [
    ("full", "full"),
    ("partial", "full"),
    ("mla", "latent"),
    ("mla", "quant4"),
    ("mla", "quant2"),
    ("mla-absorbed", "latent"),
    ("mla-absorbed", "quant4"),
    ("mla-absorbed", "quant2"),
]


class TestDecoding:
    @pytest.fixture
    def models(self, mha_config, mha_store, mha_weights):
        target, _, conv = converted(mha_config, mha_store)
        partial = mha_weights.with_selection(RopeSelection.replicated("uniform", [0, 4], 16, 2, 4))
        return {"full": (mha_config, mha_weights), "partial": (mha_config, partial), "mla": (target, conv),
                "mla-absorbed": (target, conv)}

    @pytest.mark.parametrize("variant,cache_kind", DECODE_CASES)
    def test_incremental_equals_batched(self, models, variant, cache_kind):
        cfg, weights = models[variant]
        tokens = random_tokens(cfg, 32, seed=13)
        path = registry.resolve(variant)
        batched = path.forward(weights, tokens, cache=make_cache(cache_kind, cfg.n_layers)).logits
        cache = make_cache(cache_kind, cfg.n_layers)
        rows = []
        for token in tokens:
            logits, cache = decode_step(cfg, weights, cache, int(token), variant)
            rows.append(logits)
        assert len(cache) == 32
        assert max_gap(np.stack(rows), batched) <= 1e-5

    def test_first_step_equals_one_token_forward(self, models):
        cfg, weights = models["mla-absorbed"]
        logits, _ = decode_step(cfg, weights, make_cache("latent", cfg.n_layers), 42, "mla-absorbed")
        assert np.array_equal(logits, forward_mla_absorbed(cfg, weights, [42]).logits[-1])

    def test_each_step_appends_one_row_per_layer(self, models):
        cfg, weights = models["mla"]
        cache = make_cache("latent", cfg.n_layers)
        for step in range(3):
            _, cache = decode_step(cfg, weights, cache, step, "mla")
            assert [cache.layer_length(layer) for layer in range(cfg.n_layers)] == [step + 1] * cfg.n_layers
        assert cache.c_kv(0).shape == (3, cfg.latent_width)
        assert cache.k_rope(1).shape == (3, cfg.n_g * 2 * cfg.r)

    def test_cached_rows_are_frozen(self, models):
        cfg, weights = models["mla"]
        cache = LatentCache(cfg.n_layers)
        decode_step(cfg, weights, cache, 1, "mla")
        with pytest.raises(ValueError):
            cache.c_kv(0)[0, 0] = 1.0

    def test_quantized_cache_drift_is_finite(self, models):
        cfg, weights = models["mla"]
        tokens = random_tokens(cfg, 32, seed=14)
        exact = forward_mla_naive(cfg, weights, tokens).logits
        coded = forward_mla_naive(cfg, weights, tokens, cache=make_cache("quant4", cfg.n_layers)).logits
        drift = max_gap(exact, coded)
        assert np.isfinite(drift)

    def test_cache_kind_must_fit_variant(self, models):
        cfg, weights = models["mla"]
        with pytest.raises(VariantMismatchError):
            decode_step(cfg, weights, make_cache("full", cfg.n_layers), 1, "mla")
        src_cfg, src = models["full"]
        with pytest.raises(VariantMismatchError):
            decode_step(src_cfg, src, make_cache("latent", src_cfg.n_layers), 1, "full")

    def test_unknown_cache_kind(self):
        with pytest.raises(UsageError):
            make_cache("quant3", 2)

    def test_long_random_decoding_stays_bounded(self):
        cfg = make_config(d=16, n_h=2, n_g=1, d_h=8, n_layers=1, vocab=32)
        target, conv_store, conv = converted(cfg, init_toy(cfg, seed=15), strategy="low")
        up = conv_store.get("L0.Wdkv").astype(np.float64) @ conv_store.get("L0.Wuv").astype(np.float64)
        bound = np.sqrt(cfg.n_h * cfg.d) * np.linalg.norm(up, 2) * np.linalg.norm(conv_store.get("L0.Wo"), 2) * 1.01
        path = registry.resolve("mla")
        rng = np.random.default_rng(16)
        norms = []
        for _ in range(50):
            cache = make_cache("latent", 1)
            for token in rng.integers(0, cfg.vocab, size=20):
                out = path.forward(conv, [int(token)], cache=cache).attn_outputs[0]
                norms.append(float(np.linalg.norm(out)))
        assert len(norms) == 1000
        assert np.all(np.isfinite(norms))
        assert max(norms) <= bound


class TestGreedy:
    def test_latent_paths_generate_the_same_tokens(self, mha_config, mha_store):
        target, _, conv = converted(mha_config, mha_store)
        naive = greedy_decode(target, conv, [1, 2, 3], 8, "mla", "latent")
        absorbed = greedy_decode(target, conv, [1, 2, 3], 8, "mla-absorbed", "latent")
        assert naive.tokens == absorbed.tokens
        assert len(naive.generated) == 8

    def test_zero_steps_echo_the_prompt(self, mha_config, mha_weights):
        result = greedy_decode(mha_config, mha_weights, [4, 5], 0)
        assert result.tokens == [4, 5]
        assert result.step_digests == []

    def test_quant2_cache_completes(self, mha_config, mha_store):
        target, _, conv = converted(mha_config, mha_store)
        result = greedy_decode(target, conv, [9], 6, "mla-absorbed", "quant2")
        assert len(result.tokens) == 7

    def test_empty_prompt(self, mha_config, mha_weights):
        with pytest.raises(UsageError):
            greedy_decode(mha_config, mha_weights, [], 3)

    def test_digest_is_stable(self):
        row = np.linspace(-1, 1, 10, dtype=np.float32)
        assert logits_digest(row) == logits_digest(row.copy())
        assert len(logits_digest(row)) == 16
        assert logits_digest(row) != logits_digest(row[::-1].copy())


def test_two_norm_conversion_runs_end_to_end(mha_config, mha_store):
    stats = compute_norm_stats(mha_config, mha_store, synth_corpus(mha_config.vocab, 2, 8, seed=1))
    target, _, conv = converted(mha_config, mha_store, strategy="two_norm", stats=stats)
    assert target.strategy == "two_norm"
    assert conv.selection.sets == select_rope(target, stats).sets
    tokens = random_tokens(mha_config, 8, seed=17)
    assert np.all(np.isfinite(forward_mla_absorbed(target, conv, tokens).logits))
