"""Descriptor fusion: per-branch l2 normalization, weighted concatenation,
and the "PANE" embedding file format.

Embedding files store the raw per-branch vectors so that a fusion-weight
sweep never re-runs inference.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InvalidArgumentError

EPS = 1e-12
PANE_MAGIC = b"PANE"
PANE_VERSION = 1


@dataclass
class Descriptor:
    vector: np.ndarray
    meta: dict = field(default_factory=dict)


def l2_normalize(v):
    """v / ||v||2; the zero vector (norm <= 1e-12) is returned unchanged."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm <= EPS:
        return v.copy()
    return v / norm


def fuse(f1, f2, alpha=0.5, meta=None):
    """Concatenate alpha-weighted normalized branch vectors."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgumentError(f"alpha must be in [0, 1], got {alpha}")
    vec = np.concatenate([alpha * l2_normalize(f1), (1.0 - alpha) * l2_normalize(f2)])
    return Descriptor(vec, dict(meta or {}))


@dataclass
class EmbeddingRecord:
    sample_id: int
    identity: int
    camera: int
    branch1: np.ndarray
    branch2: np.ndarray


def save_embeddings(path, records, manifest=None):
    """Write "PANE": magic | u32 version | u32 count | u32 dim1 | u32 dim2,
    then per record u32 sample_id | u32 identity | u16 camera | f32 vectors.

    ``manifest`` is an optional {sample_id: path} mapping written as a
    JSON-lines sidecar next to the binary file.
    """
    records = list(records)
    if not records:
        raise InvalidArgumentError("cannot write an empty embedding file")
    dim1 = len(records[0].branch1)
    dim2 = len(records[0].branch2)
    with open(path, "wb") as f:
        f.write(PANE_MAGIC)
        f.write(struct.pack("<IIII", PANE_VERSION, len(records), dim1, dim2))
        for r in records:
            if len(r.branch1) != dim1 or len(r.branch2) != dim2:
                raise InvalidArgumentError(
                    f"inconsistent dims for sample {r.sample_id}: "
                    f"({len(r.branch1)}, {len(r.branch2)}) vs ({dim1}, {dim2})"
                )
            f.write(struct.pack("<IIH", r.sample_id, r.identity, r.camera))
            f.write(np.asarray(r.branch1, dtype="<f4").tobytes())
            f.write(np.asarray(r.branch2, dtype="<f4").tobytes())
    if manifest is not None:
        with open(str(path) + ".manifest.jsonl", "w") as f:
            for sid, p in manifest.items():
                f.write(json.dumps({"sample_id": int(sid), "path": str(p)}) + "\n")


def load_embeddings(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != PANE_MAGIC:
        raise DataError(f"{path}: bad magic {buf[:4]!r}, expected {PANE_MAGIC!r}")
    version, count, dim1, dim2 = struct.unpack_from("<IIII", buf, 4)
    if version != PANE_VERSION:
        raise DataError(f"{path}: unsupported embedding version {version}")
    off = 20
    rec_bytes = 10 + 4 * (dim1 + dim2)
    if len(buf) - off != count * rec_bytes:
        raise DataError(
            f"{path}: expected {count * rec_bytes} record bytes, got {len(buf) - off}"
        )
    out = []
    for _ in range(count):
        sid, ident, cam = struct.unpack_from("<IIH", buf, off)
        off += 10
        b1 = np.frombuffer(buf, dtype="<f4", count=dim1, offset=off).astype(np.float64)
        off += 4 * dim1
        b2 = np.frombuffer(buf, dtype="<f4", count=dim2, offset=off).astype(np.float64)
        off += 4 * dim2
        out.append(EmbeddingRecord(sid, ident, cam, b1, b2))
    return out


def fuse_records(records, alpha=0.5):
    """Fused descriptors for a list of EmbeddingRecords."""
    return [
        fuse(
            r.branch1,
            r.branch2,
            alpha,
            meta={"sample_id": r.sample_id, "identity": r.identity, "camera": r.camera},
        )
        for r in records
    ]
