"""Versioned binary checkpoints.

Layout::

    b"MADN" | u32 version | u64 header length | UTF-8 JSON header | payload

The header maps every tensor name to its shape, dtype and byte range inside
the payload (raw little-endian floats), and carries the model config,
optimizer step, epoch, history and free-form metadata.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "Checkpoint",
    "CheckpointError",
    "CorruptCheckpointError",
    "VersionMismatchError",
    "ConfigMismatchError",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"MADN"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    tensors: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    history: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    """Write atomically (temp file + rename) so an interrupted save never
    clobbers the previous checkpoint."""
    entries = {}
    chunks = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"{name}: only float32/float64 tensors are stored, got {arr.dtype}")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = {
        "model_config": ckpt.model_config,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "metadata": ckpt.metadata,
        "tensors": entries,
        "payload_length": offset,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, ckpt.version, len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(data) < _PREFIX.size:
        raise CorruptCheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from None
    payload = memoryview(data)[start + hlen :]
    try:
        if len(payload) < header["payload_length"]:
            raise CorruptCheckpointError(
                f"{path}: truncated payload ({len(payload)} of {header['payload_length']} bytes)"
            )
        tensors = {}
        for name, e in header["tensors"].items():
            lo, n = e["offset"], e["length"]
            if lo + n > len(payload):
                raise CorruptCheckpointError(f"{path}: tensor {name} runs past the payload")
            arr = np.frombuffer(payload[lo : lo + n], dtype=np.dtype(e["dtype"]))
            tensors[name] = arr.reshape(e["shape"]).astype(arr.dtype.newbyteorder("="))
        return Checkpoint(
            model_config=header["model_config"],
            tensors=tensors,
            step=header["step"],
            epoch=header["epoch"],
            history=header["history"],
            metadata=header["metadata"],
            version=version,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"{path}: malformed header ({exc})") from None
