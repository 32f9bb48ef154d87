"""Versioned binary checkpoints: magic, version, JSON header, raw tensors.

Layout::

    b"PVMT" | uint32 version | uint64 header length | header JSON | tensor bytes

The header lists every tensor with dtype, shape and byte offset.  Keys are
sorted and tensors are written in a fixed order, so saving a loaded
checkpoint reproduces the original file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PVMT"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict
    config: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    rng: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        index, blobs, offset = [], [], 0
        for name, arr in self.tensors.items():
            arr = np.ascontiguousarray(arr)
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            index.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {"version": VERSION, "config": self.config, "epoch": self.epoch, "step": self.step,
                  "rng": self.rng, "extra": self.extra, "tensors": index}
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(blobs)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if len(buf) < _PREFIX.size:
            raise CheckpointError("file too short for a checkpoint")
        magic, version, hlen = _PREFIX.unpack_from(buf)
        if magic != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        start = _PREFIX.size
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
        body = memoryview(buf)[start + hlen:]
        tensors = {}
        for t in header["tensors"]:
            dt = np.dtype("<" + t["dtype"]) if t["dtype"][0] in "fiuc" else np.dtype(t["dtype"])
            chunk = body[t["offset"]:t["offset"] + t["nbytes"]]
            if len(chunk) != t["nbytes"]:
                raise CheckpointError(f"truncated tensor {t['name']}")
            tensors[t["name"]] = np.frombuffer(chunk, dtype=dt).reshape(t["shape"]).astype(dt.newbyteorder("="))
        return cls(tensors, header["config"], header["epoch"], header["step"], header["rng"], header["extra"])

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


def capture(model, optimizer=None, config: dict | None = None, epoch: int = 0, step: int = 0,
            rngs: dict | None = None, extra: dict | None = None) -> Checkpoint:
    """Snapshot model parameters, optimizer moments and RNG states."""
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        st = optimizer.state_dict()
        for i, (m, v) in enumerate(zip(st["m"], st["v"])):
            tensors[f"adam/m/{i:05d}"] = m
            tensors[f"adam/v/{i:05d}"] = v
        extra = dict(extra or {}, adam_step=st["step"])
    rng = {k: rng_state(r) for k, r in (rngs or {}).items()}
    return Checkpoint(tensors, config or {}, epoch, step, rng, extra or {})


def apply(ckpt: Checkpoint, model, optimizer=None, rngs: dict | None = None) -> None:
    """Load a snapshot back into live objects."""
    model.load_state_dict({k[len("param/"):]: v for k, v in ckpt.tensors.items() if k.startswith("param/")})
    if optimizer is not None:
        m = [v for k, v in sorted(ckpt.tensors.items()) if k.startswith("adam/m/")]
        v = [v for k, v in sorted(ckpt.tensors.items()) if k.startswith("adam/v/")]
        optimizer.load_state_dict({"step": ckpt.extra.get("adam_step", 0), "m": m, "v": v})
    for name, r in (rngs or {}).items():
        if name in ckpt.rng:
            restore_rng(r, ckpt.rng[name])
