"""Binary store of per-pair image embeddings in two encoder spaces.

Layout (all little-endian)::

    header : 8s magic | u32 version | u32 count | u32 clip_dim | u32 dino_dim
    record : u32 id_len | id bytes (utf-8)
             f32[clip_dim] clip_a | f32[clip_dim] clip_b
             f32[dino_dim] dino_a | f32[dino_dim] dino_b
             u8 category
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"MVCEMBED"
VERSION = 1
CATEGORIES = ("object", "attribute", "count", "position")
_HEADER = struct.Struct("<8s4I")


class StoreError(IOError):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    pair_id: str
    clip_a: np.ndarray
    clip_b: np.ndarray
    dino_a: np.ndarray
    dino_b: np.ndarray
    category: str

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        for name in ("clip_a", "clip_b", "dino_a", "dino_b"):
            v = np.asarray(getattr(self, name), dtype=np.float32)
            if v.ndim != 1 or not np.all(np.isfinite(v)) or not np.any(v):
                raise ValueError(f"{self.pair_id}: {name} must be a finite non-zero vector")
            object.__setattr__(self, name, v)
        if self.clip_a.shape != self.clip_b.shape or self.dino_a.shape != self.dino_b.shape:
            raise ValueError(f"{self.pair_id}: vector dims differ within a space")


def write_store(records: Iterable[EmbeddingRecord], path: str | Path) -> None:
    records = list(records)
    clip_dim = records[0].clip_a.size if records else 0
    dino_dim = records[0].dino_a.size if records else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(records), clip_dim, dino_dim))
        for rec in records:
            if rec.clip_a.size != clip_dim or rec.dino_a.size != dino_dim:
                raise ValueError(f"{rec.pair_id}: dims differ from the rest of the store")
            raw = rec.pair_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            for v in (rec.clip_a, rec.clip_b, rec.dino_a, rec.dino_b):
                fh.write(v.astype("<f4").tobytes())
            fh.write(struct.pack("<B", CATEGORIES.index(rec.category)))


def read_store(path: str | Path) -> list[EmbeddingRecord]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise StoreError(f"{path}: cannot read store: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise StoreError(f"{path}: truncated header")
    magic, version, count, clip_dim, dino_dim = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise StoreError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise StoreError(f"{path}: unsupported store version {version}")
    off = _HEADER.size
    records = []
    for k in range(count):
        where = f"{path}: record {k + 1} (byte {off})"
        try:
            (n,) = struct.unpack_from("<I", blob, off)
            pair_id = blob[off + 4: off + 4 + n].decode("utf-8")
            off += 4 + n
            vecs = []
            for dim in (clip_dim, clip_dim, dino_dim, dino_dim):
                if off + 4 * dim > len(blob):
                    raise StoreError("truncated vector")
                vecs.append(np.frombuffer(blob, dtype="<f4", count=dim, offset=off).astype(np.float32))
                off += 4 * dim
            (cat,) = struct.unpack_from("<B", blob, off)
            off += 1
            if cat >= len(CATEGORIES):
                raise StoreError(f"bad category byte {cat}")
            records.append(EmbeddingRecord(pair_id, *vecs, category=CATEGORIES[cat]))
        except (struct.error, UnicodeDecodeError, ValueError, StoreError) as exc:
            raise StoreError(f"{where}: {exc}") from exc
    if off != len(blob):
        raise StoreError(f"{path}: {len(blob) - off} trailing bytes after record {count}")
    return records
