"""Graph construction, MERGE upsert, dedup, stats, and graph retrieval."""

from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import ControlledEmbedder, CountingEmbedder, FailingChat, ScriptedChat

from raglake.errors import EmptyGraph, ModelUnavailable, UnknownChunk
from raglake.kgraph import (
    KnowledgeGraph,
    TextChunkNode,
    Triple,
    build_graph,
    dedup_entities,
    extract_triples,
    format_stats_report,
    graph_stats,
    graphrag_answer,
    merge_upsert,
)
from raglake.split import Chunk


def chunk(i: int, body: str, doc: str = "doc") -> Chunk:
    return Chunk(chunk_id=f"{doc}:{i}", doc_id=doc, position=i, body=body, breadcrumb=(), strategy="recursive")


def graph_with_chunks(n: int = 2) -> KnowledgeGraph:
    graph = KnowledgeGraph()
    embedder = CountingEmbedder(8)
    for i in range(n):
        vec = np.asarray(embedder.embed([f"chunk {i}"])[0])
        graph.add_chunk(TextChunkNode(f"doc:{i}", f"chunk {i}", "doc", "doc.pdf", i, vec))
    return graph


TRIPLE_REPLY = '[["Escola de Sargentos","Organization","LOCATED_IN","Caldas da Rainha","Location"]]'


def test_extract_triples_scripted():
    model = ScriptedChat([TRIPLE_REPLY])
    triples = extract_triples("A Escola de Sargentos fica em Caldas da Rainha.", model)
    assert triples == [Triple("Escola de Sargentos", "Organization", "LOCATED_IN", "Caldas da Rainha", "Location")]


def test_extract_triples_prose_reply_is_empty_with_warning():
    warnings: list[str] = []
    model = ScriptedChat(["I found several interesting entities in this text."])
    assert extract_triples("texto", model, warnings) == []
    assert len(warnings) == 1


def test_extract_triples_empty_chunk_no_model_call():
    model = ScriptedChat([])
    assert extract_triples("   ", model) == []
    assert model.calls == []


def test_extract_triples_drops_malformed_rows():
    warnings: list[str] = []
    model = ScriptedChat(['[["a","T","R","b","T"],["missing","fields"],[" ","T","R","b","T"]]'])
    triples = extract_triples("x", model, warnings)
    assert triples == [Triple("a", "T", "R", "b", "T")]
    assert len(warnings) == 1  # malformed row; empty-name row dropped silently


def test_merge_upsert_idempotent():
    graph = graph_with_chunks(1)
    triple = Triple("Exército", "Organization", "PART_OF", "Estado", "Organization")
    merge_upsert(graph, triple, "doc:0")
    nodes_before = len(graph.entities)
    edges_before = len(graph.edges)
    merge_upsert(graph, triple, "doc:0")
    assert len(graph.entities) == nodes_before == 2
    assert len(graph.edges) == edges_before == 3  # 1 RELATED + 2 MENTIONS


def test_merge_key_casefold():
    graph = graph_with_chunks(1)
    merge_upsert(graph, Triple("Exército", "Organization", "R", "x", "T"), "doc:0")
    merge_upsert(graph, Triple("exército", "Organization", "R2", "y", "T"), "doc:0")
    names = sorted(e.name for e in graph.live_entities())
    assert names == ["Exército", "x", "y"]


def test_two_triples_sharing_one_entity_counting_oracle():
    graph = graph_with_chunks(1)
    merge_upsert(graph, Triple("a", "T", "R1", "b", "T"), "doc:0")
    merge_upsert(graph, Triple("a", "T", "R2", "c", "T"), "doc:0")
    stats = graph_stats(graph)
    assert stats.entity_nodes == 3
    assert len(graph.related_edges()) == 2
    assert len(graph.mention_edges()) == 3  # a, b, c each mentioned once by doc:0


def test_unknown_chunk_rejected():
    graph = KnowledgeGraph()
    with pytest.raises(UnknownChunk):
        merge_upsert(graph, Triple("a", "T", "R", "b", "T"), "ghost:0")


def test_self_loop_triples_add_no_related_edge():
    graph = graph_with_chunks(1)
    merge_upsert(graph, Triple("Mesma", "T", "IS", "mesma", "T"), "doc:0")
    assert graph.related_edges() == []
    assert len(graph.mention_edges()) == 1


def test_type_conflict_keeps_first_records_alternative():
    graph = graph_with_chunks(1)
    merge_upsert(graph, Triple("Porto", "Location", "R", "x", "T"), "doc:0")
    merge_upsert(graph, Triple("Porto", "Organization", "R", "y", "T"), "doc:0")
    porto = next(e for e in graph.live_entities() if e.name == "Porto")
    assert porto.semantic_type == "Location"
    assert porto.alt_types == ["Organization"]


def test_build_graph_empty_chunks():
    _graph, stats = build_graph([], ScriptedChat([]), CountingEmbedder(8))
    assert stats.chunk_nodes == stats.entity_nodes == stats.relationships == 0


def test_build_graph_hand_counted_fixture(tmp_path):
    replies = [
        '[["Escola","Organization","LOCATED_IN","Caldas","Location"]]',
        '[["Escola","Organization","TRAINS","Sargentos","Role"]]',
    ]
    model = ScriptedChat(replies)
    chunks = [chunk(0, "primeiro texto"), chunk(1, "segundo texto")]
    graph, stats = build_graph(chunks, model, CountingEmbedder(8), graph_dir=tmp_path / "g")
    assert stats.chunk_nodes == 2
    assert stats.entity_nodes == 3  # Escola, Caldas, Sargentos
    assert len(graph.related_edges()) == 2
    assert len(graph.mention_edges()) >= 2
    assert (tmp_path / "g" / "nodes.jsonl").is_file()
    assert (tmp_path / "g" / "edges.jsonl").is_file()
    assert json.loads((tmp_path / "g" / "stats.json").read_text())["chunk_nodes"] == 2


def test_build_graph_double_build_identical_stats():
    def run():
        model = ScriptedChat(
            ['[["a","T","R","b","T"]]', '[["b","T","R","c","T"]]']
        )
        _graph, stats = build_graph([chunk(0, "um"), chunk(1, "dois")], model, CountingEmbedder(8))
        return stats

    assert run() == run()


def test_build_graph_skips_failed_chunk_with_warning():
    calls = {"n": 0}

    def reply(messages):
        calls["n"] += 1
        if calls["n"] == 1:
            raise ModelUnavailable("first chunk fails")
        return '[["a","T","R","b","T"]]'

    warnings: list[str] = []
    model = ScriptedChat(reply_fn=reply)
    _graph, stats = build_graph([chunk(0, "um"), chunk(1, "dois")], model, CountingEmbedder(8), warnings=warnings)
    assert stats.chunk_nodes == 2
    assert stats.entity_nodes == 2
    assert any("extraction failed" in w for w in warnings)


def test_build_graph_all_failures_raises():
    with pytest.raises(ModelUnavailable):
        build_graph([chunk(0, "um"), chunk(1, "dois")], FailingChat(), CountingEmbedder(8))


def test_graph_persistence_round_trip(tmp_path):
    model = ScriptedChat(['[["a","T","R","b","T"]]'])
    graph, stats = build_graph([chunk(0, "texto")], model, CountingEmbedder(8), graph_dir=tmp_path / "g")
    reloaded = KnowledgeGraph.load(tmp_path / "g")
    assert graph_stats(reloaded) == stats
    assert reloaded.chunks["doc:0"].text == "texto"


# --- dedup --------------------------------------------------------------------


def test_dedup_merges_planted_pair():
    # cosine(sargento, sargentos) ~ 0.92 by construction; all other pairs far apart
    vec_a = [1.0, 0.0]
    vec_b = [0.92, float(np.sqrt(1 - 0.92**2))]
    graph = graph_with_chunks(1)
    graph.merge_upsert(Triple("sargento", "Role", "R", "alpha", "T"), "doc:0")
    graph.merge_upsert(Triple("sargentos", "Role", "R", "beta", "T"), "doc:0")
    embedder = ControlledEmbedder(
        {"sargento": vec_a, "sargentos": vec_b, "alpha": [0.0, 1.0], "beta": [-1.0, 0.0]}, 2
    )
    before = graph_stats(graph)
    stats = dedup_entities(graph, embedder, 0.85)
    assert stats.entity_nodes == before.entity_nodes - 1
    live_names = {e.name for e in graph.live_entities()}
    assert ("sargento" in live_names) ^ ("sargentos" in live_names)
    merged = next(e for e in graph.entities.values() if not e.live)
    assert graph.entities[merged.merged_into].live


def test_dedup_no_pairs_above_threshold_is_noop():
    graph = graph_with_chunks(1)
    graph.merge_upsert(Triple("norte", "T", "R", "sul", "T"), "doc:0")
    embedder = ControlledEmbedder({"norte": [1.0, 0.0], "sul": [0.0, 1.0]}, 2)
    before = graph_stats(graph)
    stats = dedup_entities(graph, embedder, 0.85)
    assert stats == before


def test_dedup_transitive_chain_union_find_oracle():
    # a~b = 0.9, b~c = 0.9, a~c ~= 0.62: all three merge through the chain.
    angle = np.arccos(0.9)
    vec_a = [1.0, 0.0]
    vec_b = [float(np.cos(angle)), float(np.sin(angle))]
    vec_c = [float(np.cos(2 * angle)), float(np.sin(2 * angle))]
    assert np.dot(vec_a, vec_c) < 0.85
    graph = graph_with_chunks(1)
    graph.merge_upsert(Triple("a", "T", "R", "b", "T"), "doc:0")
    graph.merge_upsert(Triple("b", "T", "R", "c", "T"), "doc:0")
    embedder = ControlledEmbedder({"a": vec_a, "b": vec_b, "c": vec_c}, 2)
    stats = dedup_entities(graph, embedder, 0.85)
    assert stats.entity_nodes == 1
    for entity in graph.entities.values():
        if not entity.live:
            assert graph.entities[entity.merged_into].live  # redirect chains length 1


def test_dedup_counts_monotone_and_no_self_loops():
    graph = graph_with_chunks(1)
    graph.merge_upsert(Triple("forma", "T", "R", "formas", "T"), "doc:0")
    graph.merge_upsert(Triple("formas", "T", "R2", "outra", "T"), "doc:0")
    embedder = ControlledEmbedder({"forma": [1.0, 0.0], "formas": [0.99, float(np.sqrt(1 - 0.99**2))]}, 2)
    before = graph_stats(graph)
    after = dedup_entities(graph, embedder, 0.85)
    assert after.entity_nodes <= before.entity_nodes
    assert after.relationships <= before.relationships
    for edge in graph.related_edges():
        assert edge.src != edge.dst


def test_dedup_at_one_with_distinct_embeddings_is_noop():
    graph = graph_with_chunks(1)
    graph.merge_upsert(Triple("um", "T", "R", "dois", "T"), "doc:0")
    embedder = CountingEmbedder(8)
    before = graph_stats(graph)
    assert dedup_entities(graph, embedder, 1.0) == before


def test_dedup_canonical_highest_degree_then_name():
    graph = graph_with_chunks(2)
    graph.merge_upsert(Triple("alpha", "T", "R", "x", "T"), "doc:0")
    graph.merge_upsert(Triple("alpha", "T", "R", "y", "T"), "doc:1")
    graph.merge_upsert(Triple("alphas", "T", "R", "z", "T"), "doc:0")
    embedder = ControlledEmbedder({"alpha": [1.0, 0.0], "alphas": [1.0, 0.0]}, 2)
    dedup_entities(graph, embedder, 0.85)
    live_names = {e.name for e in graph.live_entities()}
    assert "alpha" in live_names and "alphas" not in live_names


# --- stats ---------------------------------------------------------------------


def test_stats_empty_graph_zero():
    stats = graph_stats(KnowledgeGraph())
    assert stats == type(stats)(0, 0, 0, 0, 0.0)


def test_two_disconnected_triples_two_components():
    graph = graph_with_chunks(1)
    graph.merge_upsert(Triple("a", "T", "R", "b", "T"), "doc:0")
    graph.merge_upsert(Triple("c", "T", "R", "d", "T"), "doc:0")
    assert graph_stats(graph).components == 2


def test_mean_degree_formula():
    graph = graph_with_chunks(1)
    graph.merge_upsert(Triple("a", "T", "R", "b", "T"), "doc:0")
    stats = graph_stats(graph)
    assert stats.mean_degree == pytest.approx(2 * 1 / 2)


def test_report_formatting_paper_scale():
    from raglake.kgraph import GraphStats

    stats = GraphStats(5899, 20055, 26067, 1408, 2.6)
    report = format_stats_report(stats, 0.85)
    assert "5,899 TextChunk nodes, 20,055 Entity nodes, and 26,067 relationships" in report
    assert "0.85" in report.split("\n")[0]


# --- graphrag --------------------------------------------------------------------


def test_graphrag_empty_graph():
    with pytest.raises(EmptyGraph):
        graphrag_answer("q", 5, KnowledgeGraph(), CountingEmbedder(8), ScriptedChat(["x"]))


def test_graphrag_single_chunk_degenerate():
    embedder = CountingEmbedder(8)
    graph = KnowledgeGraph()
    vec = np.asarray(embedder.embed(["o texto"])[0])
    graph.add_chunk(TextChunkNode("d:0", "o texto", "d", "d.pdf", 0, vec))
    graph.merge_upsert(Triple("E", "T", "R", "F", "T"), "d:0")
    llm = ScriptedChat(["resposta final"])
    result = graphrag_answer("o texto", 3, graph, embedder, llm)
    assert result.answer == "resposta final"
    assert result.sources[0].doc_id == "d"
    assert result.k_used == 1


def test_graphrag_bridging_entity_recovers_answer_chunk():
    # Controlled embeddings: the answer chunk shares no vocabulary with the
    # query (cosine 0) and loses to a distractor on pure vector score, but is
    # RELATED-adjacent to the seed via the bridging entity "ponte".
    table = {
        "pergunta": [1.0, 0.0, 0.0, 0.0],
        "texto da semente": [0.95, float(np.sqrt(1 - 0.95**2)), 0.0, 0.0],
        "texto da resposta": [0.0, 0.0, 1.0, 0.0],
        "texto irrelevante": [0.3, 0.0, 0.0, float(np.sqrt(1 - 0.09))],
    }
    embedder = ControlledEmbedder(table, 4)
    graph = KnowledgeGraph()
    for i, text in enumerate(["texto da semente", "texto da resposta", "texto irrelevante"]):
        graph.add_chunk(TextChunkNode(f"d:{i}", text, "d", "d.pdf", i, np.asarray(embedder.embed([text])[0])))
    graph.merge_upsert(Triple("semente", "T", "LIGA", "ponte", "T"), "d:0")
    graph.merge_upsert(Triple("resposta", "T", "LIGA", "ponte", "T"), "d:1")

    llm = ScriptedChat(["ok"])
    # seeds with k=2 are d:0 (0.95) and d:2 (0.3); expansion through "ponte"
    # adds d:1, whose mention bonus lifts it past the distractor.
    result = graphrag_answer("pergunta", 2, graph, embedder, llm, mention_weight=0.5)
    graph_ids = {c for s in result.sources for c, _ in s.chunks}
    assert "d:1" in graph_ids

    vector_only = sorted(
        ((np.dot(table["pergunta"], table[t]), f"d:{i}") for i, t in
         enumerate(["texto da semente", "texto da resposta", "texto irrelevante"])),
        key=lambda p: (-p[0], p[1]),
    )[:2]
    assert "d:1" not in {cid for _s, cid in vector_only}
