"""Exhaustive-scan dense vector index over knowledge-base chunks.

The index stores one float32 unit vector per chunk and scores queries by
cosine (dot product of unit vectors).  Scanning every entry keeps retrieval
exact: results are always the true top-k under the documented tie-break, and
the on-disk form reloads bit-identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Chunk

__all__ = [
    "RetrieverError",
    "IndexEntry",
    "VectorIndex",
    "RetrievedHit",
    "RetrievedContext",
    "build_index",
    "query_index",
    "save_index",
    "load_index",
]

_MAGIC = b"RVIX"
_VERSION = 1


class RetrieverError(RuntimeError):
    """Raised on embedding failures during indexing or malformed index files."""


@dataclass(frozen=True)
class IndexEntry:
    """One indexed chunk: its reference string and float32 unit vector."""

    chunk_ref: str
    vector: np.ndarray  # shape (dim,), float32


@dataclass
class VectorIndex:
    """An ordered collection of index entries with a fixed dimension."""

    dim: int
    entries: list[IndexEntry]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class RetrievedHit:
    chunk_ref: str
    score: float


@dataclass
class RetrievedContext:
    """Top-k retrieval result, best hit first."""

    query_text: str
    k: int
    hits: list[RetrievedHit]

    @property
    def chunk_refs(self) -> list[str]:
        return [hit.chunk_ref for hit in self.hits]


def build_index(chunks: Sequence[Chunk], embedder) -> VectorIndex:
    """Embed every chunk and assemble the index.

    Vectors are cast to float32 at build time; that cast, not query time, is
    where precision is fixed, so saved and freshly built indexes score
    queries identically.

    Args:
        chunks: Chunks with unique ``chunk_ref`` values.
        embedder: Object with ``embed(text) -> numpy.ndarray`` (unit norm).

    Raises:
        RetrieverError: Naming the chunk whose embedding failed, or on
            duplicate chunk references.
    """
    entries: list[IndexEntry] = []
    seen: set[str] = set()
    for chunk in chunks:
        ref = chunk.chunk_ref
        if ref in seen:
            raise RetrieverError(f"duplicate chunk reference {ref!r}")
        seen.add(ref)
        try:
            vector = np.asarray(embedder.embed(chunk.text), dtype=np.float32)
        except Exception as exc:
            raise RetrieverError(f"embedding failed for chunk {ref!r}: {exc}") from exc
        entries.append(IndexEntry(chunk_ref=ref, vector=vector))
    if not entries:
        raise RetrieverError("no chunks to index")
    dim = entries[0].vector.shape[0]
    for entry in entries:
        if entry.vector.shape != (dim,):
            raise RetrieverError(
                f"dimension mismatch for chunk {entry.chunk_ref!r}: "
                f"{entry.vector.shape[0]} != {dim}"
            )
    return VectorIndex(dim=dim, entries=entries)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of two unit vectors, clamped to the valid cosine range."""
    value = float(np.dot(a, b))
    return max(-1.0, min(1.0, value))


def query_index(index: VectorIndex, query_text: str, k: int, embedder) -> RetrievedContext:
    """Exact top-k retrieval by cosine score.

    Every entry is scored (vectors widened to float64 for the dot product);
    ties break by ascending ``chunk_ref`` so results are deterministic.

    Args:
        index: The index to scan.
        query_text: Non-empty query.
        k: Number of hits wanted (>= 1); fewer are returned only when the
            index is smaller than ``k``.

    Raises:
        RetrieverError: On an empty query, ``k < 1``, or a query embedding
            whose dimension does not match the index.
    """
    if k < 1:
        raise RetrieverError(f"k must be >= 1, got {k}")
    if not query_text.strip():
        raise RetrieverError("empty query text")
    query_vector = np.asarray(embedder.embed(query_text), dtype=np.float64)
    if query_vector.shape != (index.dim,):
        raise RetrieverError(
            f"query dimension {query_vector.shape[0]} does not match index dim {index.dim}"
        )
    scored = [
        (_cosine(entry.vector.astype(np.float64), query_vector), entry.chunk_ref)
        for entry in index.entries
    ]
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    hits = [RetrievedHit(chunk_ref=ref, score=score) for score, ref in scored[:k]]
    return RetrievedContext(query_text=query_text, k=k, hits=hits)


def save_index(index: VectorIndex, path: str | Path) -> None:
    """Serialize an index to one binary file.

    Layout: magic ``RVIX``, version (u16), dim (u32), entry count (u32), then
    all vectors as little-endian float32, then each chunk reference as a
    u32-length-prefixed UTF-8 string.  The float32 payload round-trips
    bit-identically.
    """
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HII", _VERSION, index.dim, len(index.entries)))
        matrix = np.stack([entry.vector for entry in index.entries]).astype("<f4")
        fh.write(matrix.tobytes(order="C"))
        for entry in index.entries:
            encoded = entry.chunk_ref.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)


def load_index(path: str | Path) -> VectorIndex:
    """Load an index written by :func:`save_index`.

    Raises:
        RetrieverError: On a bad magic number, unsupported version, or a
            truncated file.
    """
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != _MAGIC:
        raise RetrieverError(f"{path.name}: not an index file (bad magic)")
    try:
        version, dim, count = struct.unpack_from("<HII", data, 4)
    except struct.error as exc:
        raise RetrieverError(f"{path.name}: truncated header") from exc
    if version != _VERSION:
        raise RetrieverError(f"{path.name}: unsupported index version {version}")
    offset = 4 + struct.calcsize("<HII")
    vector_bytes = dim * 4
    matrix_end = offset + count * vector_bytes
    if len(data) < matrix_end:
        raise RetrieverError(f"{path.name}: truncated vector block")
    matrix = np.frombuffer(data[offset:matrix_end], dtype="<f4").reshape(count, dim)
    entries: list[IndexEntry] = []
    cursor = matrix_end
    for row in range(count):
        if cursor + 4 > len(data):
            raise RetrieverError(f"{path.name}: truncated reference table")
        (length,) = struct.unpack_from("<I", data, cursor)
        cursor += 4
        if cursor + length > len(data):
            raise RetrieverError(f"{path.name}: truncated reference table")
        ref = data[cursor : cursor + length].decode("utf-8")
        cursor += length
        entries.append(IndexEntry(chunk_ref=ref, vector=matrix[row].copy()))
    if cursor != len(data):
        raise RetrieverError(f"{path.name}: trailing bytes after reference table")
    return VectorIndex(dim=dim, entries=entries)
