"""Vector index: validation, exact retrieval, persistence round-trip."""

from __future__ import annotations

import math
import random

import numpy as np
import pytest

from conftest import CountingEmbedder

from raglake.clients import DeterministicEmbedder
from raglake.errors import DimensionMismatch, EmptyIndex, EmptyText
from raglake.index import VectorIndex, VectorRecord, cosine, embed_texts


def record(chunk_id: str, vector, doc_id: str = "doc") -> VectorRecord:
    return VectorRecord(chunk_id=chunk_id, doc_id=doc_id, vector=np.asarray(vector, float), rendered_text=chunk_id)


def brute_force_ranking(records: dict[str, list[float]], query: list[float]) -> list[str]:
    """Independent oracle: plain-python cosine plus explicit sort."""
    def cos(u, v):
        dot = sum(a * b for a, b in zip(u, v))
        nu = math.sqrt(sum(a * a for a in u))
        nv = math.sqrt(sum(b * b for b in v))
        return dot / (nu * nv)

    scored = [(cos(vec, query), cid) for cid, vec in records.items()]
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return [cid for _score, cid in scored]


def test_deterministic_embedder_identical_texts():
    embedder = DeterministicEmbedder(24)
    a, b = embedder.embed(["mesmo texto", "mesmo texto"])
    assert a == b
    assert len(a) == 24
    assert abs(np.linalg.norm(a) - 1.0) < 1e-9


def test_embed_texts_empty_list():
    assert embed_texts([], DeterministicEmbedder(8)) == []


def test_embed_texts_rejects_empty_string():
    with pytest.raises(EmptyText):
        embed_texts(["ok", ""], DeterministicEmbedder(8))


def test_embed_texts_batches_transparently():
    embedder = CountingEmbedder(8)
    embedder.inner.batch_size = 0  # not consulted; embed_texts batches by itself
    texts = [f"texto {i}" for i in range(300)]
    vectors = embed_texts(texts, embedder)
    assert len(vectors) == 300
    assert embedder.calls == 3  # 128 + 128 + 44
    assert embedder.texts == texts


def test_upsert_idempotent_by_chunk_id():
    index = VectorIndex()
    records = [record(f"c{i}", [i + 1, 0.5, 0.1]) for i in range(10)]
    assert index.upsert(records) == 10
    assert index.upsert(records) == 10
    assert len(index) == 10


def test_upsert_replaces_vector():
    index = VectorIndex()
    index.upsert([record("c0", [1.0, 0.0])])
    index.upsert([record("c0", [0.0, 1.0])])
    assert len(index) == 1
    top = index.top_k([0.0, 1.0], 1)
    assert top[0][1] == pytest.approx(1.0, abs=1e-9)


def test_nan_vector_rejected_nothing_written():
    index = VectorIndex()
    good = record("good", [1.0, 2.0])
    bad = record("bad", [float("nan"), 1.0])
    with pytest.raises(DimensionMismatch):
        index.upsert([good, bad])
    assert len(index) == 0


def test_zero_norm_rejected():
    with pytest.raises(DimensionMismatch):
        VectorIndex().upsert([record("z", [0.0, 0.0, 0.0])])


def test_dimension_mismatch_rejected():
    index = VectorIndex()
    index.upsert([record("a", [1.0, 0.0])])
    with pytest.raises(DimensionMismatch):
        index.upsert([record("b", [1.0, 0.0, 0.0])])


def test_query_against_stored_unit_vector():
    index = VectorIndex()
    index.upsert([record("unit", [0.0, 1.0, 0.0]), record("other", [1.0, 1.0, 0.0])])
    top = index.top_k([0.0, 1.0, 0.0], 1)
    assert top[0][0].chunk_id == "unit"
    assert abs(top[0][1] - 1.0) <= 1e-9


def test_k_larger_than_index_saturates():
    index = VectorIndex()
    index.upsert([record(f"c{i}", [1.0, float(i)]) for i in range(7)])
    assert len(index.top_k([1.0, 0.0], 100)) == 7


def test_empty_index_raises():
    with pytest.raises(EmptyIndex):
        VectorIndex().top_k([1.0], 5)


def test_oracle_equivalence_and_prefix_property():
    rng = random.Random(4242)
    dim = 8
    vectors = {f"v{i:03d}": [rng.uniform(-1, 1) for _ in range(dim)] for i in range(200)}
    index = VectorIndex()
    index.upsert([record(cid, vec) for cid, vec in vectors.items()])
    for q in range(50):
        query = [rng.uniform(-1, 1) for _ in range(dim)]
        # oracle sees the same f32 quantization the index applies
        quantized = {
            cid: np.asarray(vec, dtype="<f4").astype(float).tolist() for cid, vec in vectors.items()
        }
        qq = np.asarray(query, dtype="<f4").astype(float).tolist()
        expected = brute_force_ranking(quantized, qq)
        got = [rec.chunk_id for rec, _ in index.top_k(query, 200)]
        assert got == expected, f"query {q} ordering diverged"
        for k1, k2 in ((5, 20), (20, 50)):
            assert [r.chunk_id for r, _ in index.top_k(query, k1)] == [
                r.chunk_id for r, _ in index.top_k(query, k2)
            ][:k1]


def test_scale_invariance_of_ranking():
    rng = random.Random(99)
    index = VectorIndex()
    index.upsert([record(f"c{i}", [rng.uniform(-1, 1) for _ in range(6)]) for i in range(40)])
    query = [rng.uniform(-1, 1) for _ in range(6)]
    base = index.top_k(query, 40)
    scaled = index.top_k([3 * x for x in query], 40)
    assert [r.chunk_id for r, _ in base] == [r.chunk_id for r, _ in scaled]
    assert all(abs(a[1] - b[1]) < 1e-6 for a, b in zip(base, scaled))


def test_scores_bounded():
    index = VectorIndex()
    index.upsert([record("a", [1.0, 0.0]), record("b", [-1.0, 0.0])])
    for _rec, score in index.top_k([1.0, 0.0], 2):
        assert -1.0 <= score <= 1.0


def test_tie_break_by_chunk_id():
    index = VectorIndex()
    index.upsert([record("bbb", [1.0, 0.0]), record("aaa", [2.0, 0.0]), record("ccc", [0.5, 0.0])])
    got = [rec.chunk_id for rec, _ in index.top_k([1.0, 0.0], 3)]
    assert got == ["aaa", "bbb", "ccc"]


def test_persistence_round_trip(tmp_path):
    rng = random.Random(11)
    index = VectorIndex()
    index.upsert(
        [record(f"c{i:02d}", [rng.uniform(-1, 1) for _ in range(8)], doc_id=f"d{i % 3}") for i in range(50)]
    )
    query = [rng.uniform(-1, 1) for _ in range(8)]
    before = [(r.chunk_id, s) for r, s in index.top_k(query, 50)]
    index.save(tmp_path / "idx")
    reloaded = VectorIndex.load(tmp_path / "idx")
    after = [(r.chunk_id, s) for r, s in reloaded.top_k(query, 50)]
    assert before == after
    assert reloaded.get("c00").doc_id == "d0"


def test_binary_layout_documented_shape(tmp_path):
    index = VectorIndex()
    index.upsert([record("a", [1.0, 2.0, 3.0]), record("b", [4.0, 5.0, 6.0])])
    index.save(tmp_path / "idx")
    raw = (tmp_path / "idx" / "vectors.bin").read_bytes()
    assert len(raw) == 2 * 3 * 4
    row0 = np.frombuffer(raw[:12], dtype="<f4")
    assert row0.tolist() == [1.0, 2.0, 3.0]


def test_read_your_writes():
    index = VectorIndex()
    index.upsert([record("old", [1.0, 0.0])])
    index.upsert([record("new", [0.0, 1.0])])
    got = [rec.chunk_id for rec, _ in index.top_k([0.0, 1.0], 1)]
    assert got == ["new"]


def test_cosine_helper():
    assert cosine([1, 0], [1, 0]) == pytest.approx(1.0)
    assert cosine([1, 0], [0, 1]) == pytest.approx(0.0)
    assert cosine([0, 0], [1, 0]) == 0.0
