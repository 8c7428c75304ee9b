"""Binary tensor files and JSON model configs.

Weight files are a single little-endian stream:

    magic "EVIM" | version u32 | tensor count u32 |
    per tensor: name length u32, UTF-8 name, rank u32, extents u64 each,
                dtype tag u32 (0 = f32, 1 = f64), raw payload

Payload length must equal product(extents) * dtype size; names must be
unique. Anything malformed raises `CorruptWeightFile` carrying the byte
offset where parsing failed. Round-trips are bit-exact.

Model checkpoints are just the canonical `stage{S}.block{B}.{sublayer}.{param}`
tensor set from `backbone.walk_weights`; a raw input tensor for inference is
a weight file holding one tensor named "input".
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from .ops import ContractError

MAGIC = b"EVIM"
VERSION = 1

_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CorruptWeightFile(ValueError):
    """Malformed weight file; `offset` is the byte position of the problem."""

    def __init__(self, offset: int, message: str):
        super().__init__(f"corrupt weight file at byte {offset}: {message}")
        self.offset = offset


class ConfigError(ValueError):
    """Config file violates the schema."""


# ---------------------------------------------------------------------------
# tensor codec


def save_tensors(path: str, tensors: dict[str, np.ndarray]) -> None:
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ContractError("tensor names must be unique")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(names))
    for name in names:
        arr = np.asarray(tensors[name])
        if arr.dtype not in _DTYPE_TO_TAG:
            raise ContractError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
        out += struct.pack("<I", arr.ndim)
        for extent in arr.shape:
            out += struct.pack("<Q", extent)
        tag = _DTYPE_TO_TAG[arr.dtype]
        out += struct.pack("<I", tag)
        out += np.ascontiguousarray(arr, dtype=_TAG_TO_DTYPE[tag]).tobytes()
    with open(path, "wb") as f:
        f.write(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise CorruptWeightFile(self.offset, f"truncated while reading {what}")
        chunk = self.blob[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_tensors(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise CorruptWeightFile(0, f"bad magic, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise CorruptWeightFile(4, f"unsupported format version {version}")
    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u32("name length")
        name_at = r.offset
        name = r.take(name_len, "name").decode("utf-8")
        if name in tensors:
            raise CorruptWeightFile(name_at, f"duplicate tensor name {name!r}")
        rank = r.u32("rank")
        shape = tuple(r.u64(f"extent {i} of {name!r}") for i in range(rank))
        tag_at = r.offset
        tag = r.u32("dtype tag")
        if tag not in _TAG_TO_DTYPE:
            raise CorruptWeightFile(tag_at, f"unknown dtype tag {tag}")
        dtype = _TAG_TO_DTYPE[tag]
        n_items = 1
        for extent in shape:
            n_items *= extent
        payload = r.take(n_items * dtype.itemsize, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if r.offset != len(blob):
        raise CorruptWeightFile(r.offset, "trailing bytes after last tensor")
    return tensors


# ---------------------------------------------------------------------------
# model checkpoints


def save_model(path: str, model: bb.ModelWeights) -> None:
    save_tensors(path, bb.named_arrays(model))


def config_from_tensors(
    tensors: dict[str, np.ndarray], resolution: tuple[int, int]
) -> bb.ModelConfig:
    """Reconstruct the structural config from canonical tensor names/shapes."""
    blocks, channels, states = [], [], []
    for s in (1, 2, 3):
        n_blocks = 0
        while f"stage{s}.block{n_blocks}.dw1.k" in tensors:
            n_blocks += 1
        if n_blocks == 0:
            raise ContractError(f"weight set has no blocks for stage {s}")
        blocks.append(n_blocks)
        channels.append(tensors[f"stage{s}.block0.dw1.k"].shape[-1])
        states.append(tensors[f"stage{s}.block0.mixer.k_b"].shape[-1])
    classes = tensors["fusion.final.b_cls"].shape[0]
    return bb.ModelConfig(tuple(blocks), tuple(channels), tuple(states), resolution, classes)


def load_model(path: str, resolution: tuple[int, int] | None = None) -> bb.ModelWeights:
    """Load a checkpoint; the structural config is inferred from the names."""
    tensors = load_tensors(path)
    dtypes = {a.dtype for a in tensors.values()}
    if len(dtypes) != 1:
        raise ContractError(f"mixed dtypes in checkpoint: {sorted(map(str, dtypes))}")
    cfg = config_from_tensors(tensors, resolution or (224, 224))
    model = bb.init_model(cfg, np.random.default_rng(0))
    bb.assign_named(model, tensors)
    return model


# ---------------------------------------------------------------------------
# JSON config files


@dataclass
class RunConfig:
    model: bb.ModelConfig
    dtype: str = "f32"
    seed: int = 0

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


_PRESET_KEYS = {"variant", "input_resolution", "num_classes", "dtype", "seed"}
_CUSTOM_KEYS = {
    "blocks_per_stage", "channels", "states", "input_resolution",
    "num_classes", "variant_name", "dtype", "seed",
}


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    dtype = doc.get("dtype", "f32")
    if dtype not in ("f32", "f64"):
        raise ConfigError(f"dtype must be f32 or f64, got {dtype!r}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    if "variant" in doc:
        unknown = set(doc) - _PRESET_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            model = bb.preset(doc["variant"])
        except ContractError as e:
            raise ConfigError(str(e)) from e
        if "input_resolution" in doc:
            model.input_resolution = tuple(doc["input_resolution"])
        if "num_classes" in doc:
            model.num_classes = int(doc["num_classes"])
        return RunConfig(model, dtype, seed)
    unknown = set(doc) - _CUSTOM_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        model = bb.ModelConfig(
            tuple(doc["blocks_per_stage"]),
            tuple(doc["channels"]),
            tuple(doc["states"]),
            tuple(doc.get("input_resolution", (224, 224))),
            int(doc.get("num_classes", 1000)),
            str(doc.get("variant_name", "custom")),
        )
    except (KeyError, TypeError, ContractError) as e:
        raise ConfigError(f"invalid model config: {e}") from e
    return RunConfig(model, dtype, seed)


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"not valid JSON: {e}") from e
    return parse_config(doc)
