"""Double-layer knowledge graph: TextChunk and Entity nodes joined by
MENTIONS and RELATED edges, with create-or-update upsert keyed on a
normalized entity name, cosine-threshold entity deduplication, and a hybrid
graph retrieval path.

The graph persists to an artifact-local file store:

    <dir>/nodes.jsonl   one node per line (chunk or entity)
    <dir>/edges.jsonl   one live edge per line
    <dir>/stats.json    last computed statistics

Clusters are reported as connected components over the entity-entity
subgraph; no community detection is performed.
"""

from __future__ import annotations

import json
import logging
import unicodedata
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyGraph, EmptyQuestion, ModelUnavailable, TripleParse, UnknownChunk
from .index import cosine, embed_texts
from .prompts import fill_prompt
from .service import QueryResult, assemble_messages, format_block, sources_from_hits

logger = logging.getLogger(__name__)

MENTIONS = "MENTIONS"
RELATED = "RELATED"

DEFAULT_DEDUP_THRESHOLD = 0.85
DEFAULT_MENTION_WEIGHT = 0.1


@dataclass
class TextChunkNode:
    chunk_id: str
    text: str
    doc_id: str
    path: str
    position: int
    embedding: np.ndarray


@dataclass
class EntityNode:
    entity_id: str
    name: str
    semantic_type: str
    merge_key: str
    merged_into: str | None = None
    alt_types: list[str] = field(default_factory=list)

    @property
    def live(self) -> bool:
        return self.merged_into is None


@dataclass(frozen=True)
class GraphEdge:
    kind: str
    src: str
    dst: str
    relation_label: str = ""

    @property
    def key(self) -> tuple:
        return (self.kind, self.src, self.dst, self.relation_label)


@dataclass(frozen=True)
class GraphStats:
    chunk_nodes: int
    entity_nodes: int
    relationships: int
    components: int
    mean_degree: float

    def to_dict(self) -> dict:
        return {
            "chunk_nodes": self.chunk_nodes,
            "entity_nodes": self.entity_nodes,
            "relationships": self.relationships,
            "components": self.components,
            "mean_degree": self.mean_degree,
        }


@dataclass(frozen=True)
class Triple:
    head_name: str
    head_type: str
    relation: str
    tail_name: str
    tail_type: str


def merge_key_of(name: str) -> str:
    """Name-level MERGE identity: NFC + case-fold (whitespace collapsed)."""
    return " ".join(unicodedata.normalize("NFC", name).casefold().split())


def _entity_id_of(merge_key: str) -> str:
    return "ent-" + hashlib.sha256(merge_key.encode("utf-8")).hexdigest()[:16]


class _UnionFind:
    def __init__(self, items):
        self.parent = {item: item for item in items}

    def find(self, item):
        root = item
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[item] != root:
            self.parent[item], item = root, self.parent[item]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # deterministic: smaller key becomes the root
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


class KnowledgeGraph:
    def __init__(self):
        self.chunks: dict[str, TextChunkNode] = {}
        self.entities: dict[str, EntityNode] = {}
        self._live_by_key: dict[str, str] = {}
        self.edges: dict[tuple, GraphEdge] = {}

    # -- construction -------------------------------------------------------

    def add_chunk(self, node: TextChunkNode) -> None:
        self.chunks[node.chunk_id] = node

    def _resolve_entity(self, name: str, semantic_type: str) -> EntityNode:
        key = merge_key_of(name)
        entity_id = self._live_by_key.get(key)
        if entity_id is not None:
            entity = self.entities[entity_id]
            # MERGE semantics: update properties rather than duplicating.
            if semantic_type and semantic_type != entity.semantic_type and semantic_type not in entity.alt_types:
                entity.alt_types.append(semantic_type)
            return entity
        entity = EntityNode(
            entity_id=_entity_id_of(key),
            name=name,
            semantic_type=semantic_type,
            merge_key=key,
        )
        self.entities[entity.entity_id] = entity
        self._live_by_key[key] = entity.entity_id
        return entity

    def _add_edge(self, edge: GraphEdge) -> None:
        self.edges.setdefault(edge.key, edge)

    def merge_upsert(self, triple: Triple, source_chunk_id: str) -> "KnowledgeGraph":
        """Create-if-absent / update-if-present upsert of one typed triple."""
        if source_chunk_id not in self.chunks:
            raise UnknownChunk(f"chunk {source_chunk_id} is not in the graph")
        head = self._resolve_entity(triple.head_name, triple.head_type)
        tail = self._resolve_entity(triple.tail_name, triple.tail_type)
        if head.entity_id != tail.entity_id:
            self._add_edge(GraphEdge(RELATED, head.entity_id, tail.entity_id, triple.relation))
        self._add_edge(GraphEdge(MENTIONS, source_chunk_id, head.entity_id))
        self._add_edge(GraphEdge(MENTIONS, source_chunk_id, tail.entity_id))
        return self

    # -- views ---------------------------------------------------------------

    def live_entities(self) -> list[EntityNode]:
        return [e for e in self.entities.values() if e.live]

    def related_edges(self) -> list[GraphEdge]:
        return [e for e in self.edges.values() if e.kind == RELATED]

    def mention_edges(self) -> list[GraphEdge]:
        return [e for e in self.edges.values() if e.kind == MENTIONS]

    def mentions_of_chunk(self, chunk_id: str) -> set[str]:
        return {e.dst for e in self.edges.values() if e.kind == MENTIONS and e.src == chunk_id}

    def degree(self, entity_id: str) -> int:
        return sum(
            1
            for e in self.edges.values()
            if (e.kind == MENTIONS and e.dst == entity_id)
            or (e.kind == RELATED and entity_id in (e.src, e.dst))
        )

    def stats(self) -> GraphStats:
        live = self.live_entities()
        related = self.related_edges()
        uf = _UnionFind([e.entity_id for e in live])
        for edge in related:
            if edge.src in uf.parent and edge.dst in uf.parent:
                uf.union(edge.src, edge.dst)
        components = len({uf.find(e.entity_id) for e in live})
        mean_degree = (2.0 * len(related) / len(live)) if live else 0.0
        return GraphStats(
            chunk_nodes=len(self.chunks),
            entity_nodes=len(live),
            relationships=len(self.edges),
            components=components,
            mean_degree=mean_degree,
        )

    # -- persistence -------------------------------------------------------------

    def save(self, directory: Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)

        def write_jsonl(path: Path, rows) -> None:
            tmp = path.with_suffix(".tmp")
            with open(tmp, "w", encoding="utf-8") as handle:
                for row in rows:
                    handle.write(json.dumps(row, ensure_ascii=False) + "\n")
            tmp.replace(path)

        node_rows = []
        for chunk_id in sorted(self.chunks):
            node = self.chunks[chunk_id]
            node_rows.append(
                {
                    "kind": "chunk",
                    "chunk_id": node.chunk_id,
                    "text": node.text,
                    "doc_id": node.doc_id,
                    "path": node.path,
                    "position": node.position,
                    "embedding": [float(x) for x in np.asarray(node.embedding).reshape(-1)],
                }
            )
        for entity_id in sorted(self.entities):
            entity = self.entities[entity_id]
            node_rows.append(
                {
                    "kind": "entity",
                    "entity_id": entity.entity_id,
                    "name": entity.name,
                    "semantic_type": entity.semantic_type,
                    "merge_key": entity.merge_key,
                    "merged_into": entity.merged_into,
                    "alt_types": entity.alt_types,
                }
            )
        write_jsonl(directory / "nodes.jsonl", node_rows)
        write_jsonl(
            directory / "edges.jsonl",
            (
                {"kind": e.kind, "src": e.src, "dst": e.dst, "relation_label": e.relation_label}
                for _, e in sorted(self.edges.items())
            ),
        )
        stats_tmp = directory / "stats.json.tmp"
        stats_tmp.write_text(
            json.dumps(self.stats().to_dict(), ensure_ascii=False, indent=2), encoding="utf-8"
        )
        stats_tmp.replace(directory / "stats.json")

    @classmethod
    def load(cls, directory: Path) -> "KnowledgeGraph":
        directory = Path(directory)
        graph = cls()
        with open(directory / "nodes.jsonl", encoding="utf-8") as handle:
            for line in handle:
                if not line.strip():
                    continue
                row = json.loads(line)
                if row["kind"] == "chunk":
                    graph.add_chunk(
                        TextChunkNode(
                            chunk_id=row["chunk_id"],
                            text=row["text"],
                            doc_id=row["doc_id"],
                            path=row["path"],
                            position=row["position"],
                            embedding=np.asarray(row["embedding"], dtype=np.float64),
                        )
                    )
                else:
                    entity = EntityNode(
                        entity_id=row["entity_id"],
                        name=row["name"],
                        semantic_type=row["semantic_type"],
                        merge_key=row["merge_key"],
                        merged_into=row.get("merged_into"),
                        alt_types=list(row.get("alt_types", [])),
                    )
                    graph.entities[entity.entity_id] = entity
                    if entity.live:
                        graph._live_by_key[entity.merge_key] = entity.entity_id
        with open(directory / "edges.jsonl", encoding="utf-8") as handle:
            for line in handle:
                if not line.strip():
                    continue
                row = json.loads(line)
                graph._add_edge(
                    GraphEdge(row["kind"], row["src"], row["dst"], row.get("relation_label", ""))
                )
        return graph


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def merge_upsert(graph: KnowledgeGraph, triple: Triple, source_chunk_id: str) -> KnowledgeGraph:
    return graph.merge_upsert(triple, source_chunk_id)


def extract_triples(chunk_text: str, model, warnings: list[str] | None = None) -> list[Triple]:
    """Prompt the chat model for typed triples; malformed output yields an
    empty list plus a warning (the chunk is skipped, never the build)."""
    sink = warnings if warnings is not None else []
    if not chunk_text.strip():
        return []
    prompt = fill_prompt("triples", chunk=chunk_text)
    reply = model.complete([{"role": "user", "content": prompt}], temperature=0.0)
    start, end = reply.find("["), reply.rfind("]")
    if start < 0 or end <= start:
        sink.append("triple extraction returned no JSON array; chunk skipped")
        return []
    try:
        parsed = json.loads(reply[start : end + 1])
    except json.JSONDecodeError:
        sink.append("triple extraction returned invalid JSON; chunk skipped")
        return []
    if not isinstance(parsed, list):
        sink.append("triple extraction returned non-list JSON; chunk skipped")
        return []
    triples = []
    for row in parsed:
        if not isinstance(row, list) or len(row) != 5 or not all(isinstance(v, str) for v in row):
            sink.append(f"dropped malformed triple {row!r}")
            continue
        head, head_type, relation, tail, tail_type = (v.strip() for v in row)
        if not head or not tail:
            continue
        triples.append(Triple(head, head_type, relation, tail, tail_type))
    return triples


def build_graph(
    chunks: list,
    model,
    embedder,
    graph_dir: Path | None = None,
    doc_paths: dict[str, str] | None = None,
    warnings: list[str] | None = None,
) -> tuple[KnowledgeGraph, GraphStats]:
    """One TextChunk node per chunk plus extracted entities and relations.

    A chunk whose extraction fails is skipped with a warning; the build
    raises ModelUnavailable only when every extraction failed that way.
    """
    sink = warnings if warnings is not None else []
    graph = KnowledgeGraph()
    if chunks:
        vectors = embed_texts([chunk.body for chunk in chunks], embedder)
        failures = 0
        model_errors: list[str] = []
        for chunk, vector in zip(chunks, vectors):
            path = (doc_paths or {}).get(chunk.doc_id, chunk.doc_id)
            graph.add_chunk(
                TextChunkNode(
                    chunk_id=chunk.chunk_id,
                    text=chunk.body,
                    doc_id=chunk.doc_id,
                    path=path,
                    position=chunk.position,
                    embedding=vector,
                )
            )
        for chunk in chunks:
            try:
                triples = extract_triples(chunk.body, model, sink)
            except ModelUnavailable as exc:
                failures += 1
                model_errors.append(str(exc))
                sink.append(f"extraction failed for {chunk.chunk_id}: {exc}")
                continue
            for triple in triples:
                graph.merge_upsert(triple, chunk.chunk_id)
        if failures == len(chunks) and failures > 0:
            raise ModelUnavailable(
                f"triple extraction failed for all {failures} chunks: {model_errors[0]}"
            )
    if graph_dir is not None:
        graph.save(graph_dir)
    return graph, graph.stats()


def dedup_entities(
    graph: KnowledgeGraph,
    embedder,
    threshold: float = DEFAULT_DEDUP_THRESHOLD,
    graph_dir: Path | None = None,
) -> GraphStats:
    """Merge entities whose name embeddings reach the cosine threshold.

    Pairs at or above the threshold are unioned transitively; the canonical
    entity per cluster is the one with the highest live degree, ties broken
    by lexicographically smallest name. Edges are rewired onto canonicals,
    rewiring self-loops are dropped and parallel duplicates collapse.
    """
    live = sorted(graph.live_entities(), key=lambda e: e.entity_id)
    if len(live) >= 2:
        vectors = embed_texts([e.name for e in live], embedder)
        matrix = np.stack([v / np.linalg.norm(v) for v in vectors])
        uf = _UnionFind([e.entity_id for e in live])
        sims = matrix @ matrix.T
        for i in range(len(live)):
            for j in range(i + 1, len(live)):
                if sims[i, j] >= threshold - 1e-12:
                    uf.union(live[i].entity_id, live[j].entity_id)

        clusters: dict[str, list[EntityNode]] = {}
        for entity in live:
            clusters.setdefault(uf.find(entity.entity_id), []).append(entity)

        # Canonical choice uses one degree snapshot of the pre-dedup graph.
        degrees = {entity.entity_id: graph.degree(entity.entity_id) for entity in live}
        target_map: dict[str, str] = {}
        for members in clusters.values():
            if len(members) < 2:
                continue
            canonical = min(members, key=lambda e: (-degrees[e.entity_id], e.name))
            for entity in members:
                if entity.entity_id != canonical.entity_id:
                    entity.merged_into = canonical.entity_id
                    graph._live_by_key[entity.merge_key] = canonical.entity_id
                    target_map[entity.entity_id] = canonical.entity_id

        if target_map:
            rewired: dict[tuple, GraphEdge] = {}
            for edge in graph.edges.values():
                src, dst = edge.src, edge.dst
                if edge.kind == MENTIONS:
                    dst = target_map.get(dst, dst)
                else:
                    src = target_map.get(src, src)
                    dst = target_map.get(dst, dst)
                    if src == dst:
                        continue  # self-loop produced by rewiring
                new_edge = GraphEdge(edge.kind, src, dst, edge.relation_label)
                rewired.setdefault(new_edge.key, new_edge)
            graph.edges = rewired
    stats = graph.stats()
    if graph_dir is not None:
        graph.save(graph_dir)
    return stats


def graph_stats(graph: KnowledgeGraph) -> GraphStats:
    return graph.stats()


def format_stats_report(stats: GraphStats, threshold: float = DEFAULT_DEDUP_THRESHOLD) -> str:
    """Human-readable statistics block; counts are comma-grouped."""
    lines = [
        f"knowledge graph statistics (dedup threshold {threshold:g})",
        (
            f"{stats.chunk_nodes:,} TextChunk nodes, {stats.entity_nodes:,} Entity nodes, "
            f"and {stats.relationships:,} relationships"
        ),
        f"components: {stats.components:,}; mean entity degree: {stats.mean_degree:.2f}",
    ]
    return "\n".join(lines)


def graphrag_answer(
    question: str,
    k: int,
    graph: KnowledgeGraph,
    embedder,
    llm,
    mention_weight: float = DEFAULT_MENTION_WEIGHT,
) -> QueryResult:
    """Hybrid retrieval: vector seeds, one hop of RELATED expansion, then
    chunks rescored by cosine plus a mention-overlap bonus."""
    if not question or not question.strip():
        raise EmptyQuestion("question must be non-empty")
    if not graph.chunks:
        raise EmptyGraph("graph holds no chunk nodes")
    query = embed_texts([question], embedder)[0]

    base_scores = {
        chunk_id: cosine(query, node.embedding) for chunk_id, node in graph.chunks.items()
    }
    seeds = sorted(base_scores.items(), key=lambda kv: (-kv[1], kv[0]))[:k]

    mentioned: set[str] = set()
    for chunk_id, _ in seeds:
        mentioned |= graph.mentions_of_chunk(chunk_id)
    expanded = set(mentioned)
    for edge in graph.related_edges():
        if edge.src in mentioned:
            expanded.add(edge.dst)
        if edge.dst in mentioned:
            expanded.add(edge.src)

    candidates = {chunk_id for chunk_id, _ in seeds}
    mention_count: dict[str, int] = {}
    for edge in graph.mention_edges():
        if edge.dst in expanded:
            candidates.add(edge.src)
            mention_count[edge.src] = mention_count.get(edge.src, 0) + 1

    scored = sorted(
        (
            (base_scores[chunk_id] + mention_weight * mention_count.get(chunk_id, 0), chunk_id)
            for chunk_id in candidates
            if chunk_id in base_scores
        ),
        key=lambda pair: (-pair[0], pair[1]),
    )[:k]

    hits = [(graph.chunks[chunk_id], score) for score, chunk_id in scored]
    blocks = [
        format_block(rank, node.path, (), node.text) for rank, (node, _s) in enumerate(hits, start=1)
    ]
    answer = llm.complete(assemble_messages(question, blocks), temperature=0.0)
    path_of = {node.doc_id: node.path for node, _ in hits}
    return QueryResult(
        answer=answer,
        sources=sources_from_hits(hits, lambda doc_id: path_of.get(doc_id, doc_id)),
        k_used=len(hits),
        model=getattr(llm, "model", "unknown"),
    )
