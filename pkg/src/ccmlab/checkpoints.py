"""Versioned binary checkpoints with lineage metadata.

File layout (all integers little-endian)::

    magic      8 bytes  b"CCMCKPT\\0"
    version    u32
    schema     u32 count, then per tensor:
                 u8 kind (0 weight, 1 buffer), u16 name length, utf-8 name,
                 u8 ndim, u32 dims...
    data       float64 little-endian, row-major, tensors in schema order
    metadata   u32 length + canonical JSON (sorted keys)
    trailer    32-byte SHA-256 of every preceding byte

Weights are listed in lexicographic order, then buffers in lexicographic
order. The content hash is SHA-256 over the schema and data blocks, so it
identifies the numbers regardless of lineage annotations.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .weights import SchemaMismatch, WeightSet, flatten, unflatten  # noqa: F401  (re-exported)

MAGIC = b"CCMCKPT\0"
VERSION = 1
ROLES = ("anchor", "endpoint-low", "endpoint-high", "merged", "baseline")


class CheckpointError(ValueError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class LineageError(ValueError):
    pass


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def _encode_payload(weights: WeightSet, buffers: dict) -> tuple[bytes, bytes]:
    entries = [(0, k, weights[k]) for k in weights] + [(1, k, np.asarray(buffers[k], dtype="<f8")) for k in sorted(buffers)]
    schema = [struct.pack("<I", len(entries))]
    for kind, name, arr in entries:
        nb = name.encode()
        schema.append(struct.pack("<BH", kind, len(nb)) + nb + struct.pack("<B", arr.ndim))
        schema.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    data = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, _, arr in entries)
    return b"".join(schema), data


@dataclass(frozen=True)
class Checkpoint:
    weights: WeightSet
    buffers: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    lineage: dict = field(default_factory=dict)

    def __post_init__(self):
        role = self.lineage.get("role")
        if role is not None and role not in ROLES:
            raise CheckpointError(f"unknown role {role!r}")
        if role in ("endpoint-low", "endpoint-high") and not self.lineage.get("parent"):
            raise CheckpointError("endpoint checkpoints need a parent hash")
        if role == "merged" and ("alpha" not in self.lineage or "sources" not in self.lineage):
            raise CheckpointError("merged checkpoints record alpha and their two sources")
        object.__setattr__(self, "buffers", {k: np.asarray(v, dtype=np.float64) for k, v in self.buffers.items()})

    @property
    def content_hash(self) -> str:
        schema, data = _encode_payload(self.weights, self.buffers)
        return hashlib.sha256(schema + data).hexdigest()

    @property
    def role(self):
        return self.lineage.get("role")

    @property
    def anchor_hash(self) -> str:
        """Hash of the anchor this checkpoint descends from (itself for anchors)."""
        if self.role == "anchor" or not self.lineage:
            return self.content_hash
        anchor = self.lineage.get("anchor") or self.lineage.get("parent")
        if not anchor:
            raise LineageError(f"{self.role} checkpoint carries no anchor hash")
        return anchor

    def same_numbers(self, other: "Checkpoint") -> bool:
        return self.content_hash == other.content_hash

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.weights == other.weights and self.buffers.keys() == other.buffers.keys()
                and all(np.array_equal(self.buffers[k], other.buffers[k]) for k in self.buffers)
                and _canonical_json(self.config) == _canonical_json(other.config)
                and _canonical_json(self.lineage) == _canonical_json(other.lineage))


def to_bytes(ckpt: Checkpoint) -> bytes:
    schema, data = _encode_payload(ckpt.weights, ckpt.buffers)
    meta = _canonical_json({"config": ckpt.config, "lineage": ckpt.lineage,
                            "content_hash": hashlib.sha256(schema + data).hexdigest()})
    body = MAGIC + struct.pack("<I", VERSION) + schema + data + struct.pack("<I", len(meta)) + meta
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 4 + 32 or blob[:8] != MAGIC:
        raise CorruptCheckpoint("not a checkpoint file (bad magic or truncated)")
    body, trailer = blob[:-32], blob[-32:]
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    if hashlib.sha256(body).digest() != trailer:
        raise CorruptCheckpoint("checksum mismatch (file truncated or modified)")
    try:
        pos = 12
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        entries = []
        for _ in range(count):
            kind, nlen = struct.unpack_from("<BH", body, pos)
            pos += 3
            name = body[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            entries.append((kind, name, shape))
        weights, buffers = {}, {}
        for kind, name, shape in entries:
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
            (weights if kind == 0 else buffers)[name] = arr
        (mlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(body[pos:pos + mlen].decode())
        if pos + mlen != len(body):
            raise CorruptCheckpoint("trailing bytes after metadata")
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"schema parse failure: {exc}") from None
    ckpt = Checkpoint(WeightSet(weights), buffers, meta.get("config", {}), meta.get("lineage", {}))
    if ckpt.content_hash != meta.get("content_hash"):
        raise CorruptCheckpoint("content hash mismatch")
    return ckpt


def save(ckpt: Checkpoint, path) -> str:
    """Write atomically (temp file + rename); returns the content hash."""
    path = os.fspath(path)
    blob = to_bytes(ckpt)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return ckpt.content_hash


def load(path) -> Checkpoint:
    with open(path, "rb") as f:
        return from_bytes(f.read())


def assert_same_lineage(a: Checkpoint, b: Checkpoint) -> None:
    """Raise ``LineageError`` unless both share schema, normalizer and anchor."""
    if a.weights.schema != b.weights.schema:
        raise LineageError("schemas differ: "
                           f"{a.weights.schema_hash[:12]} vs {b.weights.schema_hash[:12]}")
    if a.buffers.keys() != b.buffers.keys() or any(
            not np.array_equal(a.buffers[k], b.buffers[k]) for k in a.buffers):
        raise LineageError("normalizer buffers differ")
    ha, hb = a.anchor_hash, b.anchor_hash
    if ha != hb:
        raise LineageError(f"different anchors: {a.role or 'checkpoint'} from {ha[:12]}, "
                           f"{b.role or 'checkpoint'} from {hb[:12]}")
