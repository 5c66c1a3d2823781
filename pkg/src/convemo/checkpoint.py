"""Versioned binary checkpoints.

Layout (little-endian)::

    8s   magic  b"CVEMOCKP"
    u32  format version
    u32  metadata length, then that many bytes of UTF-8 JSON {"config", "header"}
    u32  record count, then per record:
         u16 name length, name bytes, u8 ndim, u32 * ndim shape,
         u8 dtype code (0 = float32, 1 = float64), raw data
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import RunConfig
from .data import DatasetHeader
from .errors import DataError
from .model import ModelParams, init_model

MAGIC = b"CVEMOCKP"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(path, params: ModelParams, cfg: RunConfig, header: DatasetHeader) -> None:
    meta = json.dumps({"config": cfg.to_dict(), "header": header.to_dict()}).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta]
    named = list(params.named_parameters())
    chunks.append(struct.pack("<I", len(named)))
    for name, t in named:
        raw = name.encode()
        code = 0 if t.dtype == np.float32 else 1
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape) + struct.pack("<B", code))
        chunks.append(np.ascontiguousarray(t.data, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], RunConfig, DatasetHeader]:
    try:
        r = _Reader(Path(path).read_bytes())
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if r.take(len(MAGIC)) != MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(meta_len))
    cfg = RunConfig.from_dict(meta["config"])
    header = DatasetHeader.from_dict(meta["header"])
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (code,) = r.unpack("<B")
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    return arrays, cfg, header


def load_checkpoint(path) -> tuple[ModelParams, RunConfig, DatasetHeader]:
    arrays, cfg, header = read_checkpoint(path)
    with nx.default_dtype(cfg.dtype):
        params = init_model(cfg, header, np.random.default_rng(0))
    expected = dict(params.named_parameters())
    if set(expected) != set(arrays):
        raise DataError(f"checkpoint parameters do not match config: {sorted(set(expected) ^ set(arrays))}")
    for name, t in expected.items():
        if t.shape != arrays[name].shape:
            raise DataError(f"checkpoint shape mismatch for {name}: {arrays[name].shape} vs {t.shape}")
        t.data[...] = arrays[name]
    return params, cfg, header
