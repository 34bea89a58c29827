"""Binary checkpoints: JSON header with a named parameter manifest, f32 payload.

Layout::

    b"OKCK"  u32 format version  u64 header length  header (UTF-8 JSON)  payload

The header holds ``config``, free-form ``meta`` and ``manifest``, a list of
``{name, shape, offset, nbytes}`` records whose byte ranges tile the
little-endian float32 payload exactly, in order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointError

MAGIC = b"OKCK"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: dict[str, Any]
    params: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def manifest(self) -> list[dict[str, Any]]:
        records, offset = [], 0
        for name, arr in self.params.items():
            nbytes = int(np.prod(arr.shape, dtype=np.int64)) * _DTYPE.itemsize
            records.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
            offset += nbytes
        return records

    def to_bytes(self) -> bytes:
        header = json.dumps({"format_version": self.version, "config": self.config, "meta": self.meta,
                             "manifest": self.manifest()}, sort_keys=True).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(a, dtype=_DTYPE).tobytes() for a in self.params.values())
        return MAGIC + struct.pack("<IQ", self.version, len(header)) + header + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        start = 4 + struct.calcsize("<IQ")
        if blob[:4] != MAGIC or len(blob) < start:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack_from("<IQ", blob, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        if len(blob) < start + hlen:
            raise CheckpointError("truncated checkpoint header")
        try:
            header = json.loads(blob[start:start + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        payload = memoryview(blob)[start + hlen:]
        expected = 0
        params = {}
        for rec in header["manifest"]:
            if rec["offset"] != expected:
                raise CheckpointError(f"manifest gap or overlap at {rec['name']!r}")
            count = int(np.prod(rec["shape"], dtype=np.int64))
            if rec["nbytes"] != count * _DTYPE.itemsize:
                raise CheckpointError(f"manifest size mismatch for {rec['name']!r}")
            chunk = payload[rec["offset"]:rec["offset"] + rec["nbytes"]]
            if len(chunk) != rec["nbytes"]:
                raise CheckpointError(f"truncated payload at {rec['name']!r}")
            params[rec["name"]] = np.frombuffer(chunk, dtype=_DTYPE).reshape(rec["shape"]).astype(np.float64)
            expected += rec["nbytes"]
        if expected != len(payload):
            raise CheckpointError(f"payload has {len(payload) - expected} trailing bytes")
        return cls(header["config"], params, header.get("meta", {}), version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
