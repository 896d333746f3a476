"""Binary checkpoint container.

Layout (all integers little-endian, arrays little-endian float64, row-major)::

    magic      8 bytes  b"FLXTSFCK"
    version    u32
    n_blocks   u32      text blocks, each: u32 name length, name, u64 length, UTF-8 body
    n_arrays   u32      arrays, each: u32 name length, name, u32 ndim, ndim x u64 shape,
                        prod(shape) x f8 data

Text blocks are ``config`` (``key = repr(value)`` lines), ``standardizer``
and ``rng`` (JSON with sorted keys) and ``meta``. Arrays are written in
sorted name order so identical models give identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import FlexTSF, ModelConfig
from .vtnorm import FeatureStandardizer

MAGIC = b"FLXTSFCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    standardizer: FeatureStandardizer
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: FlexTSF, rng_state: dict | None = None,
                   meta: dict | None = None) -> Checkpoint:
        return cls(model.config, model.state_arrays(), model.standardizer, rng_state,
                   dict(meta or {}, seed=model.seed))

    def to_model(self) -> FlexTSF:
        model = FlexTSF(self.config, int(self.meta.get("seed", 0)), self.standardizer)
        model.load_arrays(self.arrays)
        return model


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": obj.dtype.str, "data": obj.tolist()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _unjson(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["data"], dtype=np.dtype(obj["__array__"]))
        return {k: _unjson(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unjson(v) for v in obj]
    return obj


def config_text(config: ModelConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.to_items())


def parse_config_text(text: str) -> ModelConfig:
    raw = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"config line {n}: expected 'key = value'")
        raw[key.strip()] = value.strip()
    try:
        return ModelConfig.from_mapping(raw)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"config block: {exc}") from None


def _dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def encode(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    std = ckpt.standardizer
    blocks = [
        ("config", config_text(ckpt.config)),
        ("standardizer", _dump_json({"mean": [float(x) for x in std.mean],
                                     "std": [float(x) for x in std.std],
                                     "clip": float(std.clip)})),
        ("rng", _dump_json(ckpt.rng_state)),
        ("meta", _dump_json(ckpt.meta)),
    ]
    out += struct.pack("<I", len(blocks))
    for name, body in blocks:
        nb, bb = name.encode(), body.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb + struct.pack("<Q", len(bb)) + bb
    out += struct.pack("<I", len(ckpt.arrays))
    for name in sorted(ckpt.arrays):
        a = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8")
        nb = name.encode()
        out += struct.pack("<I", len(nb)) + nb + struct.pack("<I", a.ndim)
        out += struct.pack(f"<{a.ndim}Q", *a.shape)
        out += a.tobytes(order="C")
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    blocks = {}
    (n_blocks,) = r.unpack("<I")
    for _ in range(n_blocks):
        (ln,) = r.unpack("<I")
        name = r.take(ln).decode()
        (lb,) = r.unpack("<Q")
        blocks[name] = r.take(lb).decode("utf-8")
    missing = {"config", "standardizer", "rng", "meta"} - set(blocks)
    if missing:
        raise CheckpointError(f"missing blocks: {sorted(missing)}")
    arrays = {}
    (n_arrays,) = r.unpack("<I")
    for _ in range(n_arrays):
        (ln,) = r.unpack("<I")
        name = r.take(ln).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint")
    std = json.loads(blocks["standardizer"])
    return Checkpoint(
        parse_config_text(blocks["config"]),
        arrays,
        FeatureStandardizer(np.array(std["mean"]), np.array(std["std"]), std["clip"]),
        _unjson(json.loads(blocks["rng"])),
        json.loads(blocks["meta"]),
    )


def save(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path: str | Path, expected: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expected`` any differing config key is an error."""
    ckpt = decode(Path(path).read_bytes())
    if expected is not None and expected != ckpt.config:
        diff = [k for (k, a), (_, b) in zip(expected.to_items(), ckpt.config.to_items()) if a != b]
        raise CheckpointError(f"config mismatch on keys: {', '.join(diff)}")
    return ckpt
