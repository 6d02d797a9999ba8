"""Append-only on-disk embedding store with exact top-k cosine search.

Layout of ``<path>``::

    offset  size  field
    0       4     magic  b"MRWB"
    4       4     u32 format version
    8       4     u32 dimension
    12      8     u64 record count
    20      4     u32 value encoding tag (1 = little-endian float32)
    24      8     zero padding

followed by ``count`` rows of ``dimension`` little-endian float32 values.
The sidecar ``<path>.ids`` holds one ``id<TAB>channel`` line per row, in row
order.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

MAGIC = b"MRWB"
VERSION = 1
ENCODING_F32 = 1
HEADER = struct.Struct("<4sIIQI8x")
assert HEADER.size == 32

CHANNELS = ("action", "object", "text-predicate", "text-argument")
MAX_ID_BYTES = 256
NORM_TOL = 1e-6

# scorer(query, matrix[n, d], ids) -> scores[n]
Scorer = Callable[[np.ndarray, np.ndarray, list], np.ndarray]


class StoreError(ValueError):
    pass


@dataclass(frozen=True)
class StoreHeader:
    magic: bytes
    version: int
    dimension: int
    count: int
    encoding: int

    def pack(self) -> bytes:
        return HEADER.pack(self.magic, self.version, self.dimension, self.count, self.encoding)

    @classmethod
    def unpack(cls, raw: bytes) -> "StoreHeader":
        if len(raw) != HEADER.size:
            raise StoreError("truncated store header")
        magic, version, dim, count, enc = HEADER.unpack(raw)
        if magic != MAGIC:
            raise StoreError(f"bad magic {magic!r}")
        if version != VERSION or enc != ENCODING_F32:
            raise StoreError(f"unsupported store version/encoding {version}/{enc}")
        if dim == 0:
            raise StoreError("store dimension must be positive")
        return cls(magic, version, dim, count, enc)


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    channel: str
    vector: np.ndarray

    def __post_init__(self):
        if not self.id or "\t" in self.id or "\n" in self.id:
            raise StoreError(f"invalid record id {self.id!r}")
        if len(self.id.encode("utf-8")) > MAX_ID_BYTES:
            raise StoreError(f"record id longer than {MAX_ID_BYTES} bytes")
        if self.channel not in CHANNELS:
            raise StoreError(f"unknown channel {self.channel!r}")


def cosine_scorer(query: np.ndarray, matrix: np.ndarray, ids: list) -> np.ndarray:
    # rows are unit norm; only the query needs normalizing
    norm = np.linalg.norm(query)
    if norm == 0.0:
        raise StoreError("zero query vector")
    return matrix @ (query / norm)


class Store:
    """An embedding store bound to ``path``. Use :meth:`create` or :meth:`open`."""

    def __init__(self, path, header: StoreHeader, vectors: np.ndarray,
                 ids: list[str], channels: list[str]):
        self.path = os.fspath(path)
        self.header = header
        self._vectors = vectors
        self._ids = ids
        self._channels = channels
        self._index = {k: i for i, k in enumerate(ids)}

    # -- construction -------------------------------------------------------

    @classmethod
    def create(cls, path, dimension: int) -> "Store":
        if dimension < 1:
            raise StoreError(f"dimension must be >= 1, got {dimension}")
        path = os.fspath(path)
        header = StoreHeader(MAGIC, VERSION, int(dimension), 0, ENCODING_F32)
        if os.path.exists(path):
            existing = cls.open(path)
            if existing.dimension != dimension:
                raise StoreError(
                    f"existing store at {path} has dimension {existing.dimension}, not {dimension}")
            return existing
        with open(path, "wb") as fh:
            fh.write(header.pack())
        with open(path + ".ids", "w", encoding="utf-8"):
            pass
        return cls(path, header, np.zeros((0, dimension), dtype=np.float32), [], [])

    @classmethod
    def open(cls, path) -> "Store":
        path = os.fspath(path)
        with open(path, "rb") as fh:
            header = StoreHeader.unpack(fh.read(HEADER.size))
            body = fh.read()
        expected = header.count * header.dimension * 4
        if len(body) != expected:
            raise StoreError(f"store body has {len(body)} bytes, header implies {expected}")
        vectors = np.frombuffer(body, dtype="<f4").reshape(header.count, header.dimension).copy()
        ids, channels = [], []
        with open(path + ".ids", encoding="utf-8") as fh:
            for line in fh:
                rid, channel = line.rstrip("\n").split("\t")
                ids.append(rid)
                channels.append(channel)
        if len(ids) != header.count:
            raise StoreError(f"sidecar lists {len(ids)} ids, header count is {header.count}")
        return cls(path, header, vectors, ids, channels)

    # -- accessors ----------------------------------------------------------

    @property
    def dimension(self) -> int:
        return self.header.dimension

    def count(self) -> int:
        return self.header.count

    def __len__(self) -> int:
        return self.header.count

    def __contains__(self, rid: str) -> bool:
        return rid in self._index

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    @property
    def vectors(self) -> np.ndarray:
        """Read-only float32 view of all rows."""
        v = self._vectors.view()
        v.flags.writeable = False
        return v

    def get(self, rid: str) -> EmbeddingRecord:
        i = self._index[rid]
        return EmbeddingRecord(rid, self._channels[i], self._vectors[i].copy())

    # -- mutation -----------------------------------------------------------

    def _prepare(self, record: EmbeddingRecord) -> tuple[np.ndarray, bool]:
        vec = np.asarray(record.vector, dtype=np.float64).reshape(-1)
        if vec.shape[0] != self.dimension:
            raise StoreError(f"record {record.id}: dimension {vec.shape[0]} != {self.dimension}")
        if not np.all(np.isfinite(vec)):
            raise StoreError(f"record {record.id}: non-finite values")
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            raise StoreError(f"record {record.id}: zero vector")
        renormalized = bool(abs(norm - 1.0) > NORM_TOL)
        return (vec / norm).astype("<f4"), renormalized

    def append(self, record: EmbeddingRecord) -> bool:
        """Append one record. Returns True if the vector had to be renormalized."""
        return self.extend([record])[0]

    def extend(self, records: Iterable[EmbeddingRecord]) -> list[bool]:
        records = list(records)
        rows, flags, seen = [], [], set()
        for r in records:
            if r.id in self._index or r.id in seen:
                raise StoreError(f"duplicate id {r.id!r}")
            seen.add(r.id)
            row, flag = self._prepare(r)
            rows.append(row)
            flags.append(flag)
        if not rows:
            return []
        block = np.stack(rows)
        with open(self.path, "r+b") as fh:
            fh.seek(0, os.SEEK_END)
            fh.write(block.tobytes())
            new_header = StoreHeader(MAGIC, VERSION, self.dimension,
                                     self.header.count + len(rows), ENCODING_F32)
            fh.seek(0)
            fh.write(new_header.pack())
        with open(self.path + ".ids", "a", encoding="utf-8") as fh:
            for r in records:
                fh.write(f"{r.id}\t{r.channel}\n")
        self.header = new_header
        self._vectors = np.concatenate([self._vectors, block])
        for r in records:
            self._index[r.id] = len(self._ids)
            self._ids.append(r.id)
            self._channels.append(r.channel)
        return flags

    # -- search -------------------------------------------------------------

    def top_k(self, query, k: int, scorer: Scorer | None = None,
              chunk_size: int = 65536) -> list[tuple[str, float]]:
        """Exact top-k by exhaustive scan; ties broken by ascending id.

        The scan is split into chunks whose partial top-k lists are merged, so
        the result is independent of ``chunk_size``.
        """
        if k < 1:
            raise StoreError(f"k must be >= 1, got {k}")
        query = np.asarray(query, dtype=np.float64).reshape(-1)
        if query.shape[0] != self.dimension:
            raise StoreError(f"query dimension {query.shape[0]} != {self.dimension}")
        if self.count() == 0:
            return []
        scorer = scorer or cosine_scorer
        candidates: list[tuple[float, str]] = []
        for start in range(0, self.count(), chunk_size):
            stop = min(start + chunk_size, self.count())
            ids = self._ids[start:stop]
            scores = np.asarray(scorer(query, self._vectors[start:stop].astype(np.float64), ids),
                                dtype=np.float64)
            candidates.extend(_rank(scores, ids, k))
        merged = _rank(np.array([c[0] for c in candidates]), [c[1] for c in candidates], k)
        return [(rid, float(s)) for s, rid in merged]


def _rank(scores: np.ndarray, ids: list[str], k: int) -> list[tuple[float, str]]:
    id_arr = np.array(ids, dtype=str)
    order = np.lexsort((id_arr, -scores))[:k]
    return [(float(scores[i]), ids[i]) for i in order]
