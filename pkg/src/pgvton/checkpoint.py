"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"PGVTCKPT"                 8-byte magic
    u32 version
    str module_id               (u32 byte length + utf-8)
    str config_hash
    str metadata                JSON object
    u32 n_arrays
    n_arrays x {
        str name
        str dtype               numpy dtype string, always little-endian
        u32 ndim, ndim x u32 shape
        u64 nbytes, payload
    }
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"PGVTCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    module_id: str
    config_hash: str
    arrays: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict:
        """Arrays whose name starts with ``prefix.``, with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}

    def state_dict(self, prefix: str) -> dict:
        return {k: torch.from_numpy(np.array(v)) for k, v in self.group(prefix).items()}


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def add_state_dict(ckpt: Checkpoint, prefix: str, state: dict):
    for k, v in state.items():
        if isinstance(v, torch.Tensor):
            v = v.detach().cpu().numpy()
        ckpt.arrays[f"{prefix}.{k}"] = np.asarray(v)


def save_checkpoint(ckpt: Checkpoint, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(_pack_str(ckpt.module_id))
        fh.write(_pack_str(ckpt.config_hash))
        fh.write(_pack_str(json.dumps(ckpt.metadata, sort_keys=True)))
        fh.write(struct.pack("<I", len(ckpt.arrays)))
        for name, arr in ckpt.arrays.items():
            # ascontiguousarray would promote 0-d arrays to 1-d
            arr = np.require(arr, requirements="C")
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            fh.write(_pack_str(name))
            fh.write(_pack_str(arr.dtype.str))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            payload = arr.tobytes()
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def str(self):
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path, module_id: str | None = None) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    r = _Reader(data, path)
    if r.take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    mid = r.str()
    if module_id is not None and mid != module_id:
        raise CheckpointError(f"{path}: checkpoint is for module {mid!r}, expected {module_id!r}")
    chash = r.str()
    metadata = json.loads(r.str())
    arrays = {}
    for _ in range(r.u32()):
        name = r.str()
        dtype = np.dtype(r.str())
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        payload = r.take(r.u64())
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return Checkpoint(mid, chash, arrays, metadata)
