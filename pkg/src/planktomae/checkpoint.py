"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"MAEM" | version | header length | header JSON (UTF-8)
    repeated: name length | name | rank | extents... | float32 LE values

The header holds the config snapshot, epoch counter, RNG stream state and
optimizer step count. Optimizer moments are stored as records named
``optim.m.<param>`` / ``optim.v.<param>``. Serialization is canonical (sorted
JSON keys, fixed record order), so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MAEM"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, diff: list[dict] | None = None):
        self.diff = diff or []
        super().__init__(message if not self.diff else f"{message}: {json.dumps(self.diff, sort_keys=True)}")


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0
    version: int = VERSION

    def header(self) -> dict:
        return {
            "config": self.config,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "optimizer_step": self.optimizer_step,
        }


def _record(name: str, value: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(value, dtype="<f4")
    raw = name.encode("utf-8")
    return (struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes(order="C"))


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(header)), header]
    parts += [_record(name, ckpt.params[name]) for name in sorted(ckpt.params)]
    parts += [_record(f"optim.{name}", ckpt.optimizer[name]) for name in sorted(ckpt.optimizer)]
    return b"".join(parts)


def from_bytes(blob: bytes) -> Checkpoint:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError("unsupported checkpoint version",
                              [{"key": "version", "file": version, "expected": VERSION}])
    offset = 12
    header = json.loads(blob[offset:offset + hlen].decode("utf-8"))
    offset += hlen
    params, optim = {}, {}
    while offset < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + nlen].decode("utf-8")
        offset += nlen
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        value = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * count
        if name.startswith("optim."):
            optim[name[len("optim."):]] = value
        else:
            params[name] = value
    return Checkpoint(header["config"], params, header["epoch"], header["rng_state"], optim,
                      header["optimizer_step"], version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path, expect_config: dict | None = None, keys=None) -> Checkpoint:
    """Read a checkpoint; with ``expect_config`` mismatching entries raise a structured diff."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    ckpt = from_bytes(path.read_bytes())
    if expect_config is not None:
        diff = config_diff(ckpt.config, expect_config, keys)
        if diff:
            raise CheckpointError("checkpoint config mismatch", diff)
    return ckpt


def config_diff(a: dict, b: dict, keys=None, prefix: str = "") -> list[dict]:
    """Flattened differences between two nested config dicts."""
    out = []
    names = sorted(set(a) | set(b)) if keys is None else keys
    for k in names:
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            out += config_diff(va, vb, None, f"{prefix}{k}.")
        elif va != vb:
            out.append({"key": f"{prefix}{k}", "file": va, "expected": vb})
    return out
