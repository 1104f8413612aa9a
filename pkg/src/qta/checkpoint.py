"""Binary checkpoint format.

Layout, all integers little-endian u32::

    b"QTAC" | version | meta_len | meta (UTF-8 JSON) | n_tensors
    then per tensor: name_len | name | ndim | dims... | float32 payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import DataError, atomic_write_bytes
from .encoders import Vocab
from .fusion import QuestionTypeSet
from .models import Model, ModelSpec, build_model

MAGIC = b"QTAC"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(DataError):
    pass


def encode_checkpoint(model: Model, extra: dict | None = None) -> bytes:
    meta = {
        "spec": model.spec.to_dict(),
        "vocab": model.vocab.index,
        "vocab_hash": model.vocab.digest(),
        "question_types": list(model.types.names),
        "answers": model.answers,
        "seed": model.spec.seed,
    }
    if extra:
        meta.update(extra)
    meta_bytes = json.dumps(meta, sort_keys=True, ensure_ascii=False).encode("utf-8")
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(meta_bytes)), meta_bytes]
    tensors = model.named_tensors()
    parts.append(_U32.pack(len(tensors)))
    for name, t in tensors.items():
        nb = name.encode("utf-8")
        parts += [_U32.pack(len(nb)), nb, _U32.pack(t.ndim)]
        parts += [_U32.pack(d) for d in t.shape]
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(model, extra))


class _Reader:
    def __init__(self, buf: bytes, where: str):
        self.buf, self.pos, self.where = buf, 0, where

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.where}: truncated at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode_checkpoint(buf: bytes, where: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf, where)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{where}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{where}: unsupported version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{where}: bad metadata: {err}") from err
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
    if r.pos != len(buf):
        raise CheckpointError(f"{where}: {len(buf) - r.pos} trailing bytes")
    return meta, tensors


def load_checkpoint(path) -> tuple[Model, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    meta, tensors = decode_checkpoint(path.read_bytes(), str(path))
    vocab = Vocab.from_json(json.dumps(meta["vocab"]))
    if vocab.digest() != meta["vocab_hash"]:
        raise CheckpointError(f"{path}: vocab hash mismatch")
    model = build_model(
        ModelSpec.from_dict(meta["spec"]), vocab, QuestionTypeSet(tuple(meta["question_types"])), meta["answers"]
    )
    own = model.named_tensors()
    if set(own) != set(tensors):
        raise CheckpointError(f"{path}: tensor names do not match the model spec")
    for name, t in own.items():
        if tensors[name].shape != t.shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, expected {t.shape}")
        t.data = tensors[name].astype(t.dtype)
    return model, meta
