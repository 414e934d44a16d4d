"""Binary checkpoint format.

Layout: ``SSMTCKPT`` magic, u32 format version, u64 manifest length, UTF-8
JSON manifest, then the raw little-endian float64 payload. Offsets in the
manifest are relative to the start of the payload.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import PARAM_NAMES, PRIVATE

MAGIC = b"SSMTCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def transfer_class(name: str) -> str:
    return "city-private" if name in PRIVATE else "shared"


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        entries, offset = [], 0
        for name in PARAM_NAMES:
            arr = self.params[name]
            entries.append(
                {
                    "name": name,
                    "shape": list(arr.shape),
                    "offset": offset,
                    "nbytes": arr.size * 8,
                    "transfer": transfer_class(name),
                }
            )
            offset += arr.size * 8
        return {"format_version": VERSION, "tensors": entries, "config": self.config, "meta": self.meta}

    def to_bytes(self) -> bytes:
        missing = [n for n in PARAM_NAMES if n not in self.params]
        extra = [n for n in self.params if n not in PARAM_NAMES]
        if missing or extra:
            raise CheckpointError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        manifest = json.dumps(self.manifest(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes() for n in PARAM_NAMES)
        return _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < _HEADER.size:
            raise CheckpointError("file too short for header")
        magic, version, mlen = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic bytes {magic!r}")
        if version != VERSION:
            raise CheckpointError(f"unknown format version {version}")
        start = _HEADER.size
        if len(blob) < start + mlen:
            raise CheckpointError("truncated manifest")
        try:
            manifest = json.loads(blob[start : start + mlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt manifest: {exc}") from None
        payload = memoryview(blob)[start + mlen :]
        names = [e["name"] for e in manifest.get("tensors", [])]
        if sorted(names) != sorted(PARAM_NAMES) or len(set(names)) != len(names):
            raise CheckpointError(f"manifest tensor set {names} does not match the model")
        params = {}
        end = 0
        for e in manifest["tensors"]:
            shape = tuple(e["shape"])
            nbytes = int(np.prod(shape)) * 8
            lo = e["offset"]
            if e.get("nbytes", nbytes) != nbytes or lo < 0 or lo + nbytes > len(payload):
                raise CheckpointError(
                    f"tensor {e['name']!r}: needs bytes [{lo}, {lo + nbytes}) but payload has {len(payload)}"
                )
            if e.get("transfer") != transfer_class(e["name"]):
                raise CheckpointError(f"tensor {e['name']!r}: wrong transfer class {e.get('transfer')!r}")
            params[e["name"]] = np.frombuffer(payload[lo : lo + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
            end = max(end, lo + nbytes)
        if end != len(payload):
            raise CheckpointError(f"payload has {len(payload) - end} trailing bytes")
        return cls(params, manifest.get("config", {}), manifest.get("meta", {}))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
