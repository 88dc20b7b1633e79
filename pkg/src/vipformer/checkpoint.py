"""Binary checkpoint container.

Layout::

    b"VIPF1\\n"                     6 bytes, magic + version
    uint64 little-endian            length H of the JSON header in bytes
    header                          H bytes of UTF-8 JSON (sorted keys)
    payload                         raw little-endian tensor bytes

The header holds ``config`` (the model configuration echo), ``meta``
(optimizer/scheduler/rng counters, metric records, anything JSON-able) and
``tensors``: an ordered list of ``{name, shape, dtype, offset, nbytes,
crc32}`` records, offsets relative to the payload start. Saving is
deterministic, so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"VIPF1\n"


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def copy(self) -> "Checkpoint":
        return Checkpoint({k: np.array(v, copy=True) for k, v in self.tensors.items()},
                          json.loads(json.dumps(self.config)), json.loads(json.dumps(self.meta)))

    def subset(self, prefix: str) -> dict:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def to_bytes(ckpt: Checkpoint) -> bytes:
    records, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        records.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": _jsonable(ckpt.config), "meta": _jsonable(ckpt.meta),
                         "tensors": records}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def from_bytes(raw: bytes, source="<bytes>") -> Checkpoint:
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{source}: bad magic, not a VIPF1 checkpoint", offset=0)
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise FormatError(f"{source}: truncated header length", offset=len(raw))
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    if len(raw) < pos + hlen:
        raise FormatError(f"{source}: truncated header ({hlen} bytes declared)", offset=len(raw))
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: unreadable header: {exc}", offset=pos) from None
    pos += hlen
    tensors = {}
    for rec in header["tensors"]:
        start = pos + rec["offset"]
        end = start + rec["nbytes"]
        if end > len(raw):
            raise FormatError(f"{source}: payload of {rec['name']} truncated", offset=len(raw))
        chunk = raw[start:end]
        if zlib.crc32(chunk) != rec["crc32"]:
            raise FormatError(f"{source}: checksum mismatch in {rec['name']}", offset=start)
        arr = np.frombuffer(chunk, dtype=np.dtype(rec["dtype"])).reshape(rec["shape"])
        tensors[rec["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    expected_end = pos + sum(r["nbytes"] for r in header["tensors"])
    if len(raw) != expected_end:
        raise FormatError(f"{source}: {len(raw) - expected_end} trailing bytes", offset=expected_end)
    return Checkpoint(tensors, header["config"], header["meta"])


def save_checkpoint(ckpt: Checkpoint, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), source=str(path))
