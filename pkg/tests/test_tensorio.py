# tests/test_tensorio.py
import json
import struct

import numpy as np
import pytest

from mlaforge.tensorio import (
    ModelConfig,
    TokenCorpus,
    decode_checkpoint,
    encode_checkpoint,
    expected_manifest,
    init_toy,
    load_checkpoint,
    load_corpus,
    save_checkpoint,
    save_corpus,
    synth_corpus,
)
from mlaforge.utils.errors import (
    BadMagicError,
    ConfigError,
    CorpusError,
    FormatError,
    ManifestMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from tests.conftest import make_config

PREAMBLE = struct.Struct("<8sIQ")


def rewrite_header(blob, edit):
    """Re-encode the JSON header after `edit` mutates it, keeping the tensor data as is."""
    magic, version, header_len = PREAMBLE.unpack_from(blob, 0)
    header = json.loads(blob[PREAMBLE.size: PREAMBLE.size + header_len])
    old_start = -(-(PREAMBLE.size + header_len) // 64) * 64
    edit(header)
    raw = json.dumps(header).encode("utf-8")
    padding = -(-(PREAMBLE.size + len(raw)) // 64) * 64 - PREAMBLE.size - len(raw)
    return PREAMBLE.pack(magic, version, len(raw)) + raw + b"\0" * padding + blob[old_start:]


class TestModelConfig:
    def test_conversion_defaults(self, mha_config):
        assert mha_config.strategy == "two_norm"
        assert mha_config.svd_mode == "joint"
        assert mha_config.r == 1
        assert mha_config.d_kv_per_head == 8
        assert mha_config.d_ff == 256

    def test_default_r_follows_head_width(self):
        assert make_config(d=256, n_h=2, n_g=2, d_h=128).r == 8

    @pytest.mark.parametrize("overrides", [
        {"d_h": 15},
        {"n_h": 4, "n_g": 3},
        {"r": 9},
        {"svd_mode": "split", "d_kv_per_head": 7},
        {"r": 1, "d_kv_per_head": 29},
        {"d": 0},
        {"unknown_field": 1},
    ])
    def test_invalid_configs(self, overrides):
        with pytest.raises(ConfigError):
            make_config(**overrides)

    def test_with_conversion_keeps_architecture(self, mha_config):
        target = mha_config.with_conversion(strategy="high", r=2, svd_mode=None)
        assert (target.d, target.n_h, target.d_h) == (64, 4, 16)
        assert target.strategy == "high"
        assert target.r == 2
        assert target.svd_mode == "joint"

    def test_digest_tracks_content(self, mha_config):
        assert mha_config.digest() == make_config().digest()
        assert mha_config.digest() != make_config(r=2).digest()


class TestCheckpoint:
    def test_round_trip(self, tmp_path, gqa_config, gqa_store):
        path = tmp_path / "toy.ckpt"
        save_checkpoint(gqa_config, gqa_store, path)
        cfg, store = load_checkpoint(path)
        assert cfg == gqa_config
        assert store.identical(gqa_store)
        assert store.meta == gqa_store.meta

    def test_encoding_is_deterministic_and_aligned(self, gqa_config, gqa_store):
        blob = encode_checkpoint(gqa_config, gqa_store)
        assert blob == encode_checkpoint(gqa_config, init_toy(gqa_config, seed=0))
        assert blob[:8] == b"MLAFORGE"
        assert len(blob) % 64 == 0

    def test_store_follows_manifest_order(self, gqa_config, gqa_store):
        assert gqa_store.names() == list(expected_manifest(gqa_config).keys())

    def test_misshapen_tensor_is_named(self, gqa_config, gqa_store):
        bad = gqa_store.copy()
        bad.put("L0.Wk", np.zeros((gqa_config.d, gqa_config.n_h * gqa_config.d_h), dtype=np.float32))
        blob = encode_checkpoint(gqa_config, bad, validate=False)
        with pytest.raises(ManifestMismatchError) as info:
            decode_checkpoint(blob)
        assert info.value.tensor_name == "L0.Wk"
        assert info.value.exit_code == 3

    def test_flipped_endianness_is_a_version_error(self, mha_config, mha_store):
        blob = bytearray(encode_checkpoint(mha_config, mha_store))
        blob[8:12] = struct.pack(">I", 1)
        with pytest.raises(VersionMismatchError):
            decode_checkpoint(bytes(blob))

    def test_bad_magic(self, mha_config, mha_store):
        blob = b"NOTMAGIC" + encode_checkpoint(mha_config, mha_store)[8:]
        with pytest.raises(BadMagicError):
            decode_checkpoint(blob)

    def test_truncated_data(self, mha_config, mha_store):
        blob = encode_checkpoint(mha_config, mha_store)
        with pytest.raises(TruncatedFileError):
            decode_checkpoint(blob[: len(blob) // 2])
        with pytest.raises(TruncatedFileError):
            decode_checkpoint(blob[:10])

    def test_trailing_bytes_are_ignored(self, mha_config, mha_store):
        _, store = decode_checkpoint(encode_checkpoint(mha_config, mha_store) + b"\0" * 100)
        assert store.identical(mha_store)

    def test_rewritten_header_still_decodes(self, mha_config, mha_store):
        blob = rewrite_header(encode_checkpoint(mha_config, mha_store), lambda header: None)
        _, store = decode_checkpoint(blob)
        assert store.identical(mha_store)

    @pytest.mark.parametrize("edit", [
        lambda h: h["tensors"][0].pop("shape"),
        lambda h: h["tensors"][0].pop("name"),
        lambda h: h["tensors"][0].update(offset=-64),
        lambda h: h["tensors"][0].update(shape=["wide", 4]),
        lambda h: h["tensors"][0].update(dtype="complex64"),
        lambda h: h["tensors"][0].update(shape=[-1, 4]),
        lambda h: h.update(tensors={"L0.Wq": 0}),
    ])
    def test_malformed_entries_are_format_errors(self, mha_config, mha_store, edit):
        blob = rewrite_header(encode_checkpoint(mha_config, mha_store), edit)
        with pytest.raises(FormatError) as info:
            decode_checkpoint(blob)
        assert info.value.exit_code == 3

    def test_missing_tensor_refused_on_save(self, tmp_path, mha_config, mha_store):
        bad = mha_store.copy()
        del bad.tensors["lm_head"]
        with pytest.raises(ManifestMismatchError) as info:
            save_checkpoint(mha_config, bad, tmp_path / "bad.ckpt")
        assert info.value.tensor_name == "lm_head"


class TestInitToy:
    def test_same_seed_same_store(self, mha_config):
        assert init_toy(mha_config, seed=0).identical(init_toy(mha_config, seed=0))

    def test_different_seed_different_store(self, mha_config):
        first, second = init_toy(mha_config, seed=0), init_toy(mha_config, seed=1)
        assert not np.array_equal(first.get("L0.Wq"), second.get("L0.Wq"))

    def test_gaussian_scale(self, mha_config, mha_store):
        variance = float(np.var(mha_store.get("embed")))
        assert variance == pytest.approx(1.0 / mha_config.d, rel=0.2)
        assert np.all(mha_store.get("L1.norm2") == 1.0)


class TestCorpus:
    def test_round_trip_keeps_digest(self, tmp_path):
        corpus = synth_corpus(256, 3, 10, seed=1)
        save_corpus(corpus, tmp_path / "c.bin")
        loaded = load_corpus(tmp_path / "c.bin")
        assert np.array_equal(loaded.tokens, corpus.tokens)
        assert loaded.digest() == corpus.digest()

    def test_from_sequences_pads_and_truncates(self):
        corpus = TokenCorpus.from_sequences([[1, 2, 3, 4, 5], [7]], seq_len=3, pad_id=9)
        assert corpus.tokens.tolist() == [[1, 2, 3], [7, 9, 9]]
        assert corpus.seq_len == 3
        assert len(corpus) == 2

    def test_vocab_and_emptiness_checks(self):
        with pytest.raises(CorpusError):
            TokenCorpus.from_sequences([[3, 300]], seq_len=2).check_vocab(256)
        with pytest.raises(CorpusError):
            TokenCorpus.from_sequences([], seq_len=4).check_vocab(256)
        with pytest.raises(CorpusError):
            TokenCorpus.from_sequences([[-1]], seq_len=1)

    def test_truncated_corpus_file(self, tmp_path):
        path = tmp_path / "c.bin"
        path.write_bytes(synth_corpus(256, 3, 10, seed=1).encode()[:-4])
        with pytest.raises(TruncatedFileError):
            load_corpus(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "c.bin"
        path.write_bytes(b"\0" * 32)
        with pytest.raises(BadMagicError):
            load_corpus(path)


def test_config_round_trips_through_model_dump(mha_config):
    assert ModelConfig.from_dict(mha_config.model_dump()) == mha_config
