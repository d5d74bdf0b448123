"""Deterministic, versioned checkpoint files.

Layout: an 8-byte magic, a little-endian uint64 header length, a sorted-key
JSON header, then the raw little-endian array bytes in header order.  The
same parameters and metadata always produce the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MCCRSCK\x01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    arrays: dict[str, np.ndarray]
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        entries, blobs, offset = [], [], 0
        for name in sorted(self.arrays):
            a = np.ascontiguousarray(self.arrays[name])
            a = a.astype(a.dtype.newbyteorder("<"), copy=False)
            raw = a.tobytes()
            entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "fingerprint": self.fingerprint,
            "meta": self.meta,
            "arrays": entries,
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[: len(MAGIC)] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        pos = len(MAGIC)
        try:
            (n,) = struct.unpack("<Q", data[pos : pos + 8])
            header = json.loads(data[pos + 8 : pos + 8 + n])
        except (struct.error, ValueError) as e:
            raise CheckpointError(f"corrupt checkpoint header: {e}") from e
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
        body = data[pos + 8 + n :]
        arrays = {}
        for e in header["arrays"]:
            raw = body[e["offset"] : e["offset"] + e["nbytes"]]
            if len(raw) != e["nbytes"]:
                raise CheckpointError(f"truncated checkpoint at array {e['name']!r}")
            arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        return cls(header["kind"], arrays, header["fingerprint"], header["meta"])

    def save(self, path, force: bool = False) -> str:
        """Write to ``path``; returns the sha256 of the bytes written."""
        path = Path(path)
        if path.exists() and not force:
            raise FileExistsError(f"{path} exists; pass force to overwrite")
        data = self.to_bytes()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_checked(path, kind: str, fingerprint: str | None = None) -> Checkpoint:
    """Load and verify kind and, when given, the run fingerprint."""
    ck = Checkpoint.load(path)
    if ck.kind != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {ck.kind!r}")
    if fingerprint is not None and ck.fingerprint != fingerprint:
        raise CheckpointError(
            f"{path}: fingerprint {ck.fingerprint} does not match the current config and corpus ({fingerprint})"
        )
    return ck
