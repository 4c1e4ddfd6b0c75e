"""Binary checkpoint format.

Layout (little-endian)::

    b"CYST"  u32 version
    u32 n_tokens, then per token: u32 byte length + UTF-8 bytes   (ids 4.. of the vocabulary)
    u32 min_frequency
    u32 config length + JSON model config
    u32 n_params, then per parameter:
        u32 name length + UTF-8 name, u32 ndim, u32 dims..., float64 data
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .corpus import RESERVED, Vocabulary
from .models import ModelConfig, TransferModel

MAGIC = b"CYST"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def _u32(buf: io.BytesIO, n: int) -> None:
    buf.write(struct.pack("<I", n))


def _bytes(buf: io.BytesIO, b: bytes) -> None:
    _u32(buf, len(b))
    buf.write(b)


def checkpoint_bytes(model: TransferModel, vocab: Vocabulary) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    _u32(buf, VERSION)
    tokens = vocab.itos[len(RESERVED):]
    _u32(buf, len(tokens))
    for t in tokens:
        _bytes(buf, t.encode("utf-8"))
    _u32(buf, vocab.min_frequency)
    _bytes(buf, json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8"))
    _u32(buf, len(model.params))
    for name, t in model.params.items():
        _bytes(buf, name.encode("utf-8"))
        _u32(buf, t.data.ndim)
        for d in t.data.shape:
            _u32(buf, d)
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: TransferModel, path, vocab: Vocabulary) -> None:
    # write-then-rename so an interrupted save never leaves a half file
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, vocab))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())


def parse_checkpoint(data: bytes) -> tuple[TransferModel, Vocabulary]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    try:
        tokens = [r.blob().decode("utf-8") for _ in range(r.u32())]
        vocab = Vocabulary(tokens, r.u32())
        config = ModelConfig.from_dict(json.loads(r.blob().decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, KeyError) as exc:
        raise CheckpointFormatError(f"corrupt checkpoint header: {exc}") from exc
    arrays = {}
    for _ in range(r.u32()):
        name = r.blob().decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise CheckpointFormatError("trailing bytes after checkpoint")
    model = TransferModel(config)
    if set(arrays) != set(model.params):
        raise CheckpointFormatError("checkpoint parameters do not match the model layout")
    for name, arr in arrays.items():
        if arr.shape != model.params[name].shape:
            raise CheckpointFormatError(f"parameter {name}: shape {arr.shape} != {model.params[name].shape}")
    model.load_arrays(arrays)
    return model, vocab


def load_checkpoint(path) -> tuple[TransferModel, Vocabulary]:
    return parse_checkpoint(Path(path).read_bytes())
