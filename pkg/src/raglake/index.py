"""Persisted vector index with exact cosine top-k and idempotent upsert.

The on-disk layout is a single compact binary file of little-endian 32-bit
floats (record vectors concatenated in record order) plus a JSON sidecar of
record metadata:

    <dir>/vectors.bin   float32-LE, row i occupies bytes [i*d*4, (i+1)*d*4)
    <dir>/records.json  {"dimension": d, "count": n, "records": [...]}

Records in the sidecar appear in the same order as the binary rows. Both
files are rewritten through a temp-file rename, so readers always see a
complete snapshot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, EmptyIndex, EmptyText, ModelUnavailable

VECTORS_FILE = "vectors.bin"
RECORDS_FILE = "records.json"


@dataclass
class VectorRecord:
    chunk_id: str
    doc_id: str
    vector: np.ndarray
    rendered_text: str
    breadcrumb: tuple[str, ...] = ()
    position: int = 0

    def meta_dict(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "rendered_text": self.rendered_text,
            "breadcrumb": list(self.breadcrumb),
            "position": self.position,
        }


def embed_texts(texts: list[str], embedder) -> list[np.ndarray]:
    """Embed texts order-aligned; batching is transparent to the caller."""
    for text in texts:
        if not text:
            raise EmptyText("cannot embed an empty string")
    out: list[np.ndarray] = []
    batch_size = getattr(embedder, "batch_size", 128)
    for start in range(0, len(texts), batch_size):
        vectors = embedder.embed(texts[start : start + batch_size])
        out.extend(np.asarray(v, dtype=np.float64) for v in vectors)
    if len(out) != len(texts):
        raise ModelUnavailable(f"embedder returned {len(out)} vectors for {len(texts)} texts")
    return out


def _validate_vector(vector: np.ndarray, dimension: int | None) -> np.ndarray:
    array = np.asarray(vector, dtype=np.float64).reshape(-1)
    if dimension is not None and array.shape[0] != dimension:
        raise DimensionMismatch(f"vector has dimension {array.shape[0]}, index holds {dimension}")
    if not np.all(np.isfinite(array)):
        raise DimensionMismatch("vector contains NaN or Inf components")
    # Quantize to the float32 persistence format up front, so scoring is
    # bit-identical before and after a save/reload cycle.
    array = array.astype("<f4").astype(np.float64)
    if float(np.linalg.norm(array)) == 0.0:
        raise DimensionMismatch("zero-norm vector; cosine similarity is undefined")
    return array


class VectorIndex:
    """Exact brute-force cosine index; one writer, any number of readers."""

    def __init__(self, dimension: int | None = None):
        self.dimension = dimension
        self._records: dict[str, VectorRecord] = {}

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> list[VectorRecord]:
        return list(self._records.values())

    def get(self, chunk_id: str) -> VectorRecord | None:
        return self._records.get(chunk_id)

    def upsert(self, records: list[VectorRecord]) -> int:
        """Insert or replace by chunk_id; validates before any mutation."""
        validated: list[tuple[VectorRecord, np.ndarray]] = []
        dimension = self.dimension
        for record in records:
            array = _validate_vector(record.vector, dimension)
            dimension = dimension or array.shape[0]
            validated.append((record, array))
        self.dimension = dimension
        for record, array in validated:
            self._records[record.chunk_id] = replace(record, vector=array)
        return len(validated)

    def top_k(self, query_vector, k: int) -> list[tuple[VectorRecord, float]]:
        """Exact cosine over every record; score descending, ties by chunk_id."""
        if not self._records:
            raise EmptyIndex("index holds no records")
        if k < 1:
            raise ValueError("k must be positive")
        query = _validate_vector(np.asarray(query_vector), self.dimension)
        order = sorted(self._records)
        matrix = np.stack([self._records[cid].vector for cid in order])
        norms = np.linalg.norm(matrix, axis=1) * float(np.linalg.norm(query))
        scores = np.clip((matrix @ query) / norms, -1.0, 1.0)
        ranked = sorted(zip(order, scores), key=lambda pair: (-pair[1], pair[0]))
        return [(self._records[cid], float(score)) for cid, score in ranked[:k]]

    # -- persistence ---------------------------------------------------------

    def save(self, directory: Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        order = list(self._records)
        dimension = self.dimension or 0
        matrix = (
            np.stack([self._records[cid].vector for cid in order]).astype("<f4")
            if order
            else np.zeros((0, dimension), dtype="<f4")
        )
        sidecar = {
            "dimension": dimension,
            "count": len(order),
            "records": [self._records[cid].meta_dict() for cid in order],
        }
        bin_tmp = directory / (VECTORS_FILE + ".tmp")
        bin_tmp.write_bytes(matrix.tobytes())
        bin_tmp.replace(directory / VECTORS_FILE)
        json_tmp = directory / (RECORDS_FILE + ".tmp")
        json_tmp.write_text(json.dumps(sidecar, ensure_ascii=False, indent=2), encoding="utf-8")
        json_tmp.replace(directory / RECORDS_FILE)

    @classmethod
    def load(cls, directory: Path) -> "VectorIndex":
        directory = Path(directory)
        sidecar = json.loads((directory / RECORDS_FILE).read_text(encoding="utf-8"))
        dimension = int(sidecar["dimension"])
        count = int(sidecar["count"])
        raw = (directory / VECTORS_FILE).read_bytes()
        expected = count * dimension * 4
        if len(raw) != expected:
            raise DimensionMismatch(
                f"vectors.bin holds {len(raw)} bytes, sidecar implies {expected}"
            )
        matrix = np.frombuffer(raw, dtype="<f4").reshape(count, dimension).astype(np.float64)
        index = cls(dimension=dimension or None)
        for row, meta in zip(matrix, sidecar["records"]):
            record = VectorRecord(
                chunk_id=meta["chunk_id"],
                doc_id=meta["doc_id"],
                vector=row,
                rendered_text=meta["rendered_text"],
                breadcrumb=tuple(meta.get("breadcrumb", ())),
                position=meta.get("position", 0),
            )
            index._records[record.chunk_id] = record
        return index

    @classmethod
    def load_or_empty(cls, directory: Path) -> "VectorIndex":
        directory = Path(directory)
        if (directory / RECORDS_FILE).is_file():
            return cls.load(directory)
        return cls()


def cosine(u, v) -> float:
    """Plain cosine similarity; used by graph retrieval and tests."""
    a = np.asarray(u, dtype=np.float64)
    b = np.asarray(v, dtype=np.float64)
    denom = float(np.linalg.norm(a)) * float(np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.clip(float(a @ b) / denom, -1.0, 1.0))
