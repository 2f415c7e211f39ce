"""Binary checkpoints shared by base weights and projection banks.

Layout (all little-endian)::

    b"NKV1"  kind:u8  n_fields:u32  fields:u32 * n_fields  rope_base:f64
    n_tensors:u32
    repeated: name_len:u32 name:bytes rows:u32 cols:u32 data:f64 * rows*cols
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig

MAGIC = b"NKV1"
KIND_WEIGHTS = 0x01
KIND_BANK = 0x02

_COUNT_FIELDS = ("n_layers", "n_heads", "n_kv_heads", "head_dim", "vocab", "context", "mlp_hidden", "tie_embeddings")


class FormatVersionMismatch(ValueError):
    pass


def encode(kind: int, config: ModelConfig, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<BI", kind, len(_COUNT_FIELDS))]
    parts.append(struct.pack(f"<{len(_COUNT_FIELDS)}I", *(int(getattr(config, f)) for f in _COUNT_FIELDS)))
    parts.append(struct.pack("<d", config.rope_base))
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim != 2:
            raise ValueError(f"tensor {name} is not 2-D")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<II", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(blob: bytes, expected_kind: int) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise FormatVersionMismatch(f"bad magic {blob[:4]!r}")
    kind, n_fields = struct.unpack_from("<BI", blob, 4)
    if kind != expected_kind:
        raise FormatVersionMismatch(f"checkpoint kind {kind:#04x}, expected {expected_kind:#04x}")
    if n_fields != len(_COUNT_FIELDS):
        raise FormatVersionMismatch(f"header has {n_fields} fields, expected {len(_COUNT_FIELDS)}")
    off = 9
    counts = struct.unpack_from(f"<{n_fields}I", blob, off)
    off += 4 * n_fields
    (rope_base,) = struct.unpack_from("<d", blob, off)
    off += 8
    fields = dict(zip(_COUNT_FIELDS, counts))
    fields["tie_embeddings"] = bool(fields["tie_embeddings"])
    config = ModelConfig(**fields, rope_base=rope_base)
    (n_tensors,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        n = rows * cols
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(rows, cols)
        off += 8 * n
    if off != len(blob):
        raise FormatVersionMismatch(f"{len(blob) - off} trailing bytes")
    return config, tensors


def write(path: str | os.PathLike, kind: int, config: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(kind, config, tensors))


def read(path: str | os.PathLike, kind: int) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), kind)


def save_weights(weights, path) -> None:
    write(path, KIND_WEIGHTS, weights.config, weights.tensors)


def load_weights(path):
    from .model import TransformerWeights, weight_shapes

    config, tensors = read(path, KIND_WEIGHTS)
    expected = weight_shapes(config)
    if set(tensors) != set(expected):
        raise FormatVersionMismatch("tensor names do not match the model config")
    return TransformerWeights(config, tensors)
