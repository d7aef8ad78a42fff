"""Binary container for model checkpoints and resumable training state.

Layout (all integers little-endian)::

    magic        8 bytes
    version      uint32
    header_len   uint32
    header       JSON, UTF-8, sorted keys; includes an array directory
                 [{"name", "shape", "dtype", "offset", "nbytes"}, ...]
    payload      raw array bytes in directory order
    digest       SHA-256 over every preceding byte

Checkpoints always store parameters as ``<f4``.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IntegrityError, UnsupportedVersionError
from .features import NormStats
from .model import ModelConfig

CHECKPOINT_MAGIC = b"PESQDNN\x00"
STATE_MAGIC = b"PESQSTA\x00"
FORMAT_VERSION = 1
_DIGEST = 32
_PREFIX = struct.Struct("<8sII")


def pack(magic: bytes, header: dict, arrays: dict[str, np.ndarray], version: int = FORMAT_VERSION) -> bytes:
    directory = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        directory.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str,
                          "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "arrays": directory}, sort_keys=True, separators=(",", ":")).encode()
    body = _PREFIX.pack(magic, version, len(head)) + head + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def unpack(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size + _DIGEST:
        raise IntegrityError("file too short to be a checkpoint")
    got_magic, version, head_len = _PREFIX.unpack_from(blob)
    if got_magic != magic:
        raise IntegrityError(f"bad magic {got_magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version} not supported (expected {FORMAT_VERSION})")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("content hash mismatch (truncated or corrupted file)")
    start = _PREFIX.size
    header = json.loads(body[start:start + head_len])
    payload = body[start + head_len:]
    arrays = {}
    for e in header.pop("arrays"):
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise IntegrityError(f"array {e['name']} truncated")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header, arrays


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Checkpoint:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    norm_stats: NormStats | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = {k: np.asarray(v, dtype=np.float32) for k, v in self.weights.items()}

    def to_bytes(self) -> bytes:
        header = {
            "config": self.config.to_dict(),
            "norm_stats": None if self.norm_stats is None else self.norm_stats.to_dict(),
            "meta": self.meta,
        }
        return pack(CHECKPOINT_MAGIC, header, self.weights)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        header, arrays = unpack(blob, CHECKPOINT_MAGIC)
        ns = header.get("norm_stats")
        return cls(ModelConfig.from_dict(header["config"]), arrays,
                   None if ns is None else NormStats.from_dict(ns), header.get("meta", {}))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write(path, ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
