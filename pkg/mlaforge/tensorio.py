# mlaforge/tensorio.py
"""
Checkpoint and calibration-corpus file formats.

Checkpoint layout: 8-byte magic `MLAFORGE`, u32 version, u64 header length,
canonical UTF-8 JSON header (config, variant, meta, tensor manifest), then
little-endian tensor data. The data section and every tensor start on a
64-byte boundary.
"""
import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .linalg import as_matrix
from .utils.errors import (
    BadMagicError,
    ConfigError,
    CorpusError,
    FormatError,
    ManifestMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from .utils.logger import get_logger

logger = get_logger("mlaforge.tensorio")

MAGIC = b"MLAFORGE"
VERSION = 1
ALIGNMENT = 64
_PREAMBLE = struct.Struct("<8sIQ")

CORPUS_MAGIC = 0x544B4C4D
_CORPUS_HEADER = struct.Struct("<III")

DTYPES: Dict[str, np.dtype] = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u32": np.dtype("<u4"),
}
_DTYPE_NAMES = {np.dtype(v).str: k for k, v in DTYPES.items()}

Variant = Literal["full", "mla"]
PathLike = Union[str, Path]


class ModelConfig(BaseModel):
    """Architecture hyperparameters plus the conversion block."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    d: int
    n_h: int
    n_g: int
    d_h: int
    n_layers: int
    vocab: int
    rope_base: float = 1e4
    d_ff: Optional[int] = None
    norm_eps: float = 1e-6

    strategy: Literal["high", "low", "uniform", "two_norm"] = "two_norm"
    r: Optional[int] = None
    d_kv_per_head: Optional[int] = None
    svd_mode: Literal["split", "joint"] = "joint"
    per_head_svd: bool = False
    global_selection: bool = False

    @model_validator(mode="before")
    @classmethod
    def _fill_defaults(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        d_h = data.get("d_h")
        if isinstance(d_h, int) and d_h >= 2:
            if data.get("r") is None:
                # r = d_h/16 by default, at least one subspace
                data["r"] = min(max(1, d_h // 16), d_h // 2)
            if data.get("d_kv_per_head") is None:
                r = data["r"] if isinstance(data["r"], int) else 0
                d_kv = min(d_h // 2, max(0, 2 * (d_h - 2 * r)))
                if data.get("svd_mode") == "split":
                    d_kv -= d_kv % 2
                data["d_kv_per_head"] = d_kv
        if data.get("d_ff") is None and isinstance(data.get("d"), int):
            data["d_ff"] = 4 * data["d"]
        return data

    @model_validator(mode="after")
    def _check_invariants(self) -> "ModelConfig":
        for name in ("d", "n_h", "n_g", "d_h", "n_layers", "vocab", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_h % self.n_g != 0:
            raise ValueError(f"n_h={self.n_h} is not divisible by n_g={self.n_g}")
        if self.d_h % 2 != 0:
            raise ValueError(f"d_h={self.d_h} must be even")
        if not 0 <= self.r <= self.d_h // 2:
            raise ValueError(f"r={self.r} outside [0, d_h/2={self.d_h // 2}]")
        if self.d_kv_per_head < 0:
            raise ValueError("d_kv_per_head must be nonnegative")
        if self.svd_mode == "split" and self.d_kv_per_head % 2 != 0:
            raise ValueError(f"d_kv_per_head={self.d_kv_per_head} must be even for split SVD")
        if self.d_kv_per_head > 2 * (self.d_h - 2 * self.r):
            raise ValueError(
                f"d_kv_per_head={self.d_kv_per_head} exceeds 2*(d_h - 2r)={2 * (self.d_h - 2 * self.r)}"
            )
        if self.rope_base <= 0:
            raise ValueError("rope_base must be positive")
        return self

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        """Build a config from untrusted data, mapping validation failures to ConfigError."""
        try:
            return cls.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(f"Invalid model config: {exc.errors()[0]['msg']}") from exc

    def with_conversion(self, **changes: Any) -> "ModelConfig":
        data = self.model_dump()
        data.update({k: v for k, v in changes.items() if v is not None})
        if changes.get("r") is not None and changes.get("d_kv_per_head") is None:
            data["d_kv_per_head"] = None
        return ModelConfig.from_dict(data)

    @property
    def group_size(self) -> int:
        return self.n_h // self.n_g

    @property
    def n_sub(self) -> int:
        return self.d_h // 2

    @property
    def d_rope(self) -> int:
        return 2 * self.r

    @property
    def d_nope(self) -> int:
        return self.d_h - 2 * self.r

    @property
    def latent_width(self) -> int:
        return self.n_g * self.d_kv_per_head

    def group_of(self, head: int) -> int:
        return head * self.n_g // self.n_h

    def digest(self) -> str:
        payload = json.dumps(self.model_dump(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class TensorStore:
    """
    Ordered name -> array mapping, the unit of checkpoint I/O.
    `variant` is "full" for source checkpoints and "mla" after conversion;
    `meta` carries JSON-serializable bookkeeping (error ledger, digests).
    """

    def __init__(self, variant: str = "full", meta: Optional[Dict[str, Any]] = None):
        self.tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.variant = variant
        self.meta: Dict[str, Any] = dict(meta or {})

    def put(self, name: str, array: np.ndarray) -> None:
        self.tensors[name] = np.ascontiguousarray(array)

    def get(self, name: str) -> np.ndarray:
        if name not in self.tensors:
            raise ManifestMismatchError(f"Tensor '{name}' is missing from the store", tensor_name=name)
        return self.tensors[name]

    def layer(self, layer: int, suffix: str) -> np.ndarray:
        return self.get(layer_key(layer, suffix))

    def names(self) -> List[str]:
        return list(self.tensors.keys())

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self.tensors.items())

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self) -> int:
        return len(self.tensors)

    def copy(self) -> "TensorStore":
        clone = TensorStore(self.variant, json.loads(json.dumps(self.meta)))
        for name, array in self.items():
            clone.put(name, array.copy())
        return clone

    def identical(self, other: "TensorStore") -> bool:
        """Bit-exact equality including order, dtypes and shapes."""
        if self.names() != other.names() or self.variant != other.variant:
            return False
        for name, array in self.items():
            theirs = other.tensors[name]
            if array.dtype != theirs.dtype or array.shape != theirs.shape:
                return False
            if array.tobytes() != theirs.tobytes():
                return False
        return True


def layer_key(layer: int, suffix: str) -> str:
    return f"L{layer}.{suffix}"


def expected_manifest(cfg: ModelConfig, variant: str = "full") -> "OrderedDict[str, Tuple[Tuple[int, ...], str]]":
    """Canonical tensor names, shapes and dtype kinds ('f' float, 'u' index) for a variant."""
    d, d_h, n_h, n_g = cfg.d, cfg.d_h, cfg.n_h, cfg.n_g
    manifest: "OrderedDict[str, Tuple[Tuple[int, ...], str]]" = OrderedDict()
    manifest["embed"] = ((cfg.vocab, d), "f")
    for layer in range(cfg.n_layers):
        key = lambda suffix: layer_key(layer, suffix)  # noqa: E731
        manifest[key("norm1")] = ((1, d), "f")
        if variant == "full":
            manifest[key("Wq")] = ((d, n_h * d_h), "f")
            manifest[key("Wk")] = ((d, n_g * d_h), "f")
            manifest[key("Wv")] = ((d, n_g * d_h), "f")
        elif variant == "mla":
            latent = cfg.latent_width
            manifest[key("Wq_rope")] = ((d, n_h * cfg.d_rope), "f")
            manifest[key("Wq_nope")] = ((d, n_h * cfg.d_nope), "f")
            manifest[key("Wk_rope")] = ((d, n_g * cfg.d_rope), "f")
            manifest[key("Wdkv")] = ((d, latent), "f")
            manifest[key("Wuk")] = ((latent, n_g * cfg.d_nope), "f")
            manifest[key("Wuv")] = ((latent, n_g * d_h), "f")
            manifest[key("Wq_absorbed")] = ((d, n_h * latent), "f")
            manifest[key("Wo_absorbed")] = ((n_h * latent, d), "f")
            manifest[key("S")] = ((n_g, cfg.r), "u")
        else:
            raise FormatError(f"Unknown checkpoint variant '{variant}'")
        manifest[key("Wo")] = ((n_h * d_h, d), "f")
        manifest[key("norm2")] = ((1, d), "f")
        manifest[key("mlp.up")] = ((d, cfg.d_ff), "f")
        manifest[key("mlp.down")] = ((cfg.d_ff, d), "f")
    manifest["lm_head"] = ((d, cfg.vocab), "f")
    return manifest


def check_manifest(cfg: ModelConfig, store: TensorStore) -> None:
    """Raise ManifestMismatchError naming the first missing or misshapen tensor."""
    for name, (shape, kind) in expected_manifest(cfg, store.variant).items():
        if name not in store:
            raise ManifestMismatchError(f"Tensor '{name}' declared by the manifest is missing", tensor_name=name)
        array = store.tensors[name]
        if tuple(array.shape) != shape:
            raise ManifestMismatchError(
                f"Tensor '{name}' has shape {tuple(array.shape)}, manifest declares {shape}",
                tensor_name=name,
            )
        if array.dtype.kind != kind:
            raise ManifestMismatchError(f"Tensor '{name}' has dtype {array.dtype}, expected kind '{kind}'", tensor_name=name)


def _align(offset: int) -> int:
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def _dtype_name(array: np.ndarray) -> str:
    name = _DTYPE_NAMES.get(array.dtype.newbyteorder("<").str)
    if name is None:
        raise FormatError(f"Unsupported tensor dtype {array.dtype}")
    return name


def encode_checkpoint(cfg: ModelConfig, store: TensorStore, validate: bool = True) -> bytes:
    if validate:
        check_manifest(cfg, store)
    entries = []
    offset = 0
    for name, array in store.items():
        dtype = _dtype_name(array)
        entries.append({"name": name, "dtype": dtype, "shape": list(array.shape), "offset": offset})
        offset = _align(offset + array.size * DTYPES[dtype].itemsize)
    header = {
        "config": cfg.model_dump(),
        "variant": store.variant,
        "meta": store.meta,
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    preamble = _PREAMBLE.pack(MAGIC, VERSION, len(header_bytes))
    data_start = _align(len(preamble) + len(header_bytes))

    buffer = bytearray(data_start + offset)
    buffer[: len(preamble)] = preamble
    buffer[len(preamble): len(preamble) + len(header_bytes)] = header_bytes
    for entry, (_, array) in zip(entries, store.items()):
        raw = np.ascontiguousarray(array, dtype=DTYPES[entry["dtype"]]).tobytes()
        start = data_start + entry["offset"]
        buffer[start: start + len(raw)] = raw
    return bytes(buffer)


def _parse_entry(entry: Any) -> Tuple[str, np.dtype, Tuple[int, ...], int]:
    try:
        name = str(entry["name"])
        dtype = DTYPES.get(entry["dtype"])
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"Malformed tensor entry {entry!r}: {exc}") from exc
    if dtype is None:
        raise FormatError(f"Tensor '{name}' has unsupported dtype {entry['dtype']}")
    if offset < 0 or any(s < 0 for s in shape):
        raise FormatError(f"Tensor '{name}' has a negative offset or dimension")
    return name, dtype, shape, offset


def decode_checkpoint(blob: bytes) -> Tuple[ModelConfig, TensorStore]:
    if len(blob) < _PREAMBLE.size:
        raise TruncatedFileError("Checkpoint is shorter than its fixed preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagicError(f"Bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"Unsupported checkpoint version {version} (expected {VERSION})")
    header_end = _PREAMBLE.size + header_len
    if len(blob) < header_end:
        raise TruncatedFileError("Checkpoint header is truncated")
    try:
        header = json.loads(blob[_PREAMBLE.size: header_end].decode("utf-8"))
        cfg = ModelConfig.model_validate(header["config"])
        entries = header["tensors"]
        variant = header["variant"]
        if not isinstance(entries, list):
            raise TypeError("'tensors' must be a list")
    except (ValueError, KeyError, TypeError, ValidationError) as exc:
        raise FormatError(f"Malformed checkpoint header: {exc}") from exc

    data_start = _align(header_end)
    store = TensorStore(variant, header.get("meta") or {})
    for entry in entries:
        name, dtype, shape, offset = _parse_entry(entry)
        count = int(np.prod(shape, dtype=np.int64))
        start = data_start + offset
        end = start + count * dtype.itemsize
        if end > len(blob):
            raise TruncatedFileError(f"Tensor '{name}' runs past the end of the file")
        array = np.frombuffer(blob, dtype=dtype, count=count, offset=start).reshape(shape).copy()
        if dtype.kind == "f":
            array = as_matrix(array, name=name)
        store.put(name, array)
    check_manifest(cfg, store)
    return cfg, store


def save_checkpoint(cfg: ModelConfig, store: TensorStore, path: PathLike, validate: bool = True) -> None:
    blob = encode_checkpoint(cfg, store, validate=validate)
    Path(path).write_bytes(blob)
    logger.info(f"Saved {store.variant} checkpoint with {len(store)} tensors to {path} ({len(blob)} bytes)")


def load_checkpoint(path: PathLike) -> Tuple[ModelConfig, TensorStore]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"Cannot read checkpoint {path}: {exc}") from exc
    cfg, store = decode_checkpoint(blob)
    logger.info(f"Loaded {store.variant} checkpoint {path}: {len(store)} tensors, {cfg.n_layers} layers")
    return cfg, store


def init_toy(cfg: ModelConfig, seed: int, dtype=np.float32) -> TensorStore:
    """Deterministic Gaussian init with standard deviation 1/sqrt(d); norm gains start at one."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(cfg.d)
    store = TensorStore("full", {"seed": int(seed)})
    for name, (shape, _) in expected_manifest(cfg, "full").items():
        if name.endswith("norm1") or name.endswith("norm2"):
            store.put(name, np.ones(shape, dtype=dtype))
        else:
            store.put(name, (rng.standard_normal(shape) * scale).astype(dtype))
    return store


class TokenCorpus(BaseModel):
    """Fixed-length calibration sequences, one row per sequence."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    tokens: np.ndarray

    @property
    def seq_len(self) -> int:
        return int(self.tokens.shape[1])

    @property
    def sequences(self) -> List[np.ndarray]:
        return [row for row in self.tokens]

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    @classmethod
    def from_sequences(cls, sequences: Iterable[Sequence[int]], seq_len: int, pad_id: int = 0) -> "TokenCorpus":
        """Truncate or right-pad every sequence to seq_len."""
        rows = []
        for seq in sequences:
            ids = [int(t) for t in list(seq)[:seq_len]]
            if any(t < 0 for t in ids):
                raise CorpusError("Token ids must be nonnegative")
            rows.append(ids + [pad_id] * (seq_len - len(ids)))
        tokens = np.array(rows, dtype=np.uint32).reshape(len(rows), seq_len)
        return cls(tokens=tokens)

    def head(self, count: int) -> "TokenCorpus":
        return TokenCorpus(tokens=self.tokens[:count].copy())

    def check_vocab(self, vocab: int) -> None:
        if len(self) == 0:
            raise CorpusError("Corpus is empty")
        if self.tokens.size and int(self.tokens.max()) >= vocab:
            raise CorpusError(f"Corpus token id {int(self.tokens.max())} is outside the vocabulary of {vocab}")

    def encode(self) -> bytes:
        header = _CORPUS_HEADER.pack(CORPUS_MAGIC, self.seq_len, len(self))
        return header + np.ascontiguousarray(self.tokens, dtype="<u4").tobytes()

    def digest(self) -> str:
        return hashlib.sha256(self.encode()).hexdigest()


def synth_corpus(vocab: int, n_seqs: int, seq_len: int, seed: int) -> TokenCorpus:
    rng = np.random.default_rng(seed)
    return TokenCorpus(tokens=rng.integers(0, vocab, size=(n_seqs, seq_len)).astype(np.uint32))


def save_corpus(corpus: TokenCorpus, path: PathLike) -> None:
    Path(path).write_bytes(corpus.encode())


def load_corpus(path: PathLike) -> TokenCorpus:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CorpusError(f"Cannot read corpus {path}: {exc}") from exc
    if len(blob) < _CORPUS_HEADER.size:
        raise TruncatedFileError("Corpus file is shorter than its header")
    magic, seq_len, count = _CORPUS_HEADER.unpack_from(blob, 0)
    if magic != CORPUS_MAGIC:
        raise BadMagicError(f"Bad corpus magic 0x{magic:08x}")
    needed = _CORPUS_HEADER.size + 4 * seq_len * count
    if len(blob) < needed:
        raise TruncatedFileError(f"Corpus declares {count}x{seq_len} ids but the file is truncated")
    tokens = np.frombuffer(blob, dtype="<u4", count=seq_len * count, offset=_CORPUS_HEADER.size)
    return TokenCorpus(tokens=tokens.reshape(count, seq_len).astype(np.uint32))
