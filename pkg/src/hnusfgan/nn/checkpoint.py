"""Chunked binary checkpoints.

Layout (all little-endian)::

    b"USFC" | version:u32 | n_chunks:u32
    chunk*  = kind:4 bytes | payload_len:u64 | payload
    PARM    = name_len:u16 | name | ndim:u8 | shape:u64*ndim | step:u64
              | values:f64*n | exp_avg:f64*n | exp_avg_sq:f64*n
    META    = UTF-8 JSON object, sorted keys

Parameter names carry a namespace prefix (``generator.``, ``discriminator.``).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .module import Parameter

MAGIC = b"USFC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ParamRecord:
    values: np.ndarray
    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray
    step: int


@dataclass
class Checkpoint:
    params: dict[str, ParamRecord] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _encode_param(name: str, p: Parameter) -> bytes:
    raw = name.encode("utf-8")
    buf = io.BytesIO()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", p.data.ndim))
    buf.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
    buf.write(struct.pack("<Q", p.step))
    for arr in (p.data, p.exp_avg, p.exp_avg_sq):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def _decode_param(payload: bytes) -> tuple[str, ParamRecord]:
    (name_len,) = struct.unpack_from("<H", payload, 0)
    pos = 2
    name = payload[pos:pos + name_len].decode("utf-8")
    pos += name_len
    (ndim,) = struct.unpack_from("<B", payload, pos)
    pos += 1
    shape = struct.unpack_from(f"<{ndim}Q", payload, pos)
    pos += 8 * ndim
    (step,) = struct.unpack_from("<Q", payload, pos)
    pos += 8
    n = int(np.prod(shape)) if shape else 1
    if len(payload) != pos + 3 * 8 * n:
        raise CheckpointError(f"parameter '{name}': payload size mismatch")
    arrays = []
    for _ in range(3):
        arrays.append(np.frombuffer(payload, dtype="<f8", count=n, offset=pos)
                      .reshape(shape).astype(np.float64))
        pos += 8 * n
    return name, ParamRecord(arrays[0], arrays[1], arrays[2], int(step))


def save_checkpoint(path, named_params, meta: dict | None = None) -> None:
    chunks = [(b"PARM", _encode_param(name, p)) for name, p in named_params]
    chunks.append((b"META", json.dumps(meta or {}, sort_keys=True,
                                       separators=(",", ":")).encode("utf-8")))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(chunks)))
        for kind, payload in chunks:
            fh.write(kind)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if len(data) < 12:
        raise CheckpointError("truncated header")
    version, n_chunks = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    ckpt = Checkpoint()
    for _ in range(n_chunks):
        if pos + 12 > len(data):
            raise CheckpointError("truncated chunk header")
        kind = data[pos:pos + 4]
        (size,) = struct.unpack_from("<Q", data, pos + 4)
        pos += 12
        payload = data[pos:pos + size]
        if len(payload) != size:
            raise CheckpointError("truncated chunk payload")
        pos += size
        if kind == b"PARM":
            name, rec = _decode_param(payload)
            ckpt.params[name] = rec
        elif kind == b"META":
            ckpt.meta = json.loads(payload.decode("utf-8"))
        else:
            raise CheckpointError(f"unknown chunk kind {kind!r}")
    if pos != len(data):
        raise CheckpointError("trailing bytes after last chunk")
    return ckpt


def load_into(named_params, ckpt: Checkpoint, strict: bool = True) -> None:
    """Copy values and optimizer moments from ``ckpt`` into live parameters."""
    named = dict(named_params)
    if strict:
        missing = sorted(set(named) - set(ckpt.params))
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
    for name, p in named.items():
        rec = ckpt.params.get(name)
        if rec is None:
            continue
        if rec.values.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': {rec.values.shape} vs {p.data.shape}")
        p.data = rec.values.copy()
        p.exp_avg = rec.exp_avg.copy()
        p.exp_avg_sq = rec.exp_avg_sq.copy()
        p.step = rec.step
