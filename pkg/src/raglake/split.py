"""Three chunking strategies: recursive, Markdown-aware recursive, and
hierarchical recursive with breadcrumb metadata.

All three are pure functions. Separator ladder is paragraph -> line ->
space -> character; chunk bodies are capped at ``chunk_size`` characters and
each chunk is seeded with up to ``overlap`` trailing characters of its
predecessor, taken in whole pieces.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import BadParams

RECURSIVE = "recursive"
MARKDOWN_RECURSIVE = "markdown_recursive"
HIERARCHICAL_RECURSIVE = "hierarchical_recursive"
STRATEGIES = (RECURSIVE, MARKDOWN_RECURSIVE, HIERARCHICAL_RECURSIVE)

BREADCRUMB_SEPARATOR = " > "

_LADDER = ("\n\n", "\n", " ")
_ATX = re.compile(r"^(#{1,6})[ \t](.*)$")
_FENCE = re.compile(r"^(```|~~~)")


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    position: int
    body: str
    breadcrumb: tuple[str, ...]
    strategy: str
    overlap_len: int = 0  # length of the overlap-seeded prefix of `body`

    def to_dict(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "position": self.position,
            "body": self.body,
            "breadcrumb": list(self.breadcrumb),
            "strategy": self.strategy,
            "overlap_len": self.overlap_len,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "Chunk":
        return cls(
            chunk_id=row["chunk_id"],
            doc_id=row["doc_id"],
            position=row["position"],
            body=row["body"],
            breadcrumb=tuple(row.get("breadcrumb", ())),
            strategy=row["strategy"],
            overlap_len=row.get("overlap_len", 0),
        )


def _validate_params(chunk_size: int, overlap: int) -> None:
    if chunk_size < 1:
        raise BadParams(f"chunk_size must be >= 1, got {chunk_size}")
    if overlap < 0 or overlap >= chunk_size:
        raise BadParams(f"need 0 <= overlap < chunk_size, got overlap={overlap} chunk_size={chunk_size}")


def _split_keep(text: str, sep: str) -> list[str]:
    parts = text.split(sep)
    pieces = [part + sep for part in parts[:-1]]
    if parts[-1]:
        pieces.append(parts[-1])
    return pieces


def _atomize(text: str, chunk_size: int, level: int = 0) -> list[str]:
    """Break text into pieces of at most chunk_size chars; concatenation is exact."""
    if not text:
        return []
    if len(text) <= chunk_size:
        return [text]
    if level >= len(_LADDER):
        return [text[i : i + 1] for i in range(len(text))]
    pieces: list[str] = []
    for piece in _split_keep(text, _LADDER[level]):
        if len(piece) <= chunk_size:
            pieces.append(piece)
        else:
            pieces.extend(_atomize(piece, chunk_size, level + 1))
    return pieces


def _pack(pieces: list[str], chunk_size: int, overlap: int) -> list[tuple[str, int]]:
    """Greedily pack pieces into (body, seeded_prefix_len) chunks.

    Every flushed chunk holds at least one piece that is new relative to its
    predecessor, so bodies are never pure overlap.
    """
    chunks: list[tuple[str, int]] = []
    cur: list[str] = []
    cur_len = 0
    seed_len = 0
    for piece in pieces:
        plen = len(piece)
        if cur_len and cur_len + plen > chunk_size:
            chunks.append(("".join(cur), seed_len))
            budget = min(overlap, chunk_size - plen)
            seed: list[str] = []
            slen = 0
            for prev in reversed(cur):
                if slen + len(prev) > budget:
                    break
                seed.append(prev)
                slen += len(prev)
            seed.reverse()
            cur = seed
            cur_len = slen
            seed_len = slen
        cur.append(piece)
        cur_len += plen
    if cur_len > seed_len:
        chunks.append(("".join(cur), seed_len))
    return chunks


def _fence_runs(segment: str) -> list[tuple[bool, str]]:
    """Split a segment into alternating (is_fenced, text) runs, both exact."""
    runs: list[tuple[bool, str]] = []
    cur: list[str] = []
    in_fence = False
    for line in segment.splitlines(keepends=True):
        if _FENCE.match(line):
            if in_fence:
                cur.append(line)
                runs.append((True, "".join(cur)))
                cur = []
                in_fence = False
            else:
                if cur:
                    runs.append((False, "".join(cur)))
                cur = [line]
                in_fence = True
        else:
            cur.append(line)
    if cur:
        runs.append((in_fence, "".join(cur)))
    return runs


def _atomize_markdown(segment: str, chunk_size: int) -> list[str]:
    """Atomize with fenced code blocks kept whole whenever they fit."""
    pieces: list[str] = []
    for fenced, run in _fence_runs(segment):
        if fenced and len(run) <= chunk_size:
            pieces.append(run)
        elif fenced:
            pieces.extend(_atomize(run, chunk_size, level=1))  # never split mid-line
        else:
            pieces.extend(_atomize(run, chunk_size))
    return pieces


def _make_chunks(
    packed: list[tuple[str, int]],
    doc_id: str,
    strategy: str,
    breadcrumb: tuple[str, ...] = (),
    start_position: int = 0,
) -> list[Chunk]:
    chunks = []
    for offset, (body, seed_len) in enumerate(packed):
        position = start_position + offset
        chunks.append(
            Chunk(
                chunk_id=f"{doc_id}:{position}",
                doc_id=doc_id,
                position=position,
                body=body,
                breadcrumb=breadcrumb,
                strategy=strategy,
                overlap_len=seed_len,
            )
        )
    return chunks


def split_recursive(text: str, chunk_size: int = 1000, overlap: int = 200, *, doc_id: str = "") -> list[Chunk]:
    """Sliding-window splitting with no awareness of document structure."""
    _validate_params(chunk_size, overlap)
    packed = _pack(_atomize(text, chunk_size), chunk_size, overlap)
    return _make_chunks(packed, doc_id, RECURSIVE)


def split_markdown_recursive(
    markdown: str, chunk_size: int = 1000, overlap: int = 200, *, doc_id: str = ""
) -> list[Chunk]:
    """Section-aware splitting: segments at ATX headings, fences kept whole."""
    _validate_params(chunk_size, overlap)
    chunks: list[Chunk] = []
    for segment in _segment_at_headings(markdown):
        packed = _pack(_atomize_markdown(segment, chunk_size), chunk_size, overlap)
        chunks.extend(_make_chunks(packed, doc_id, MARKDOWN_RECURSIVE, start_position=len(chunks)))
    return chunks


def _segment_at_headings(markdown: str) -> list[str]:
    segments: list[str] = []
    cur: list[str] = []
    in_fence = False
    for line in markdown.splitlines(keepends=True):
        if _FENCE.match(line):
            cur.append(line)
            in_fence = not in_fence
        elif not in_fence and _ATX.match(line) and cur:
            segments.append("".join(cur))
            cur = [line]
        else:
            cur.append(line)
    if cur:
        segments.append("".join(cur))
    return segments


@dataclass
class _Section:
    title: str
    raw_level: int  # 0 for the document root
    eff_level: int
    body_parts: list[str] = field(default_factory=list)
    children: list["_Section"] = field(default_factory=list)
    parent: "_Section | None" = None


def _build_section_tree(markdown: str, doc_title: str) -> _Section:
    root = _Section(title=doc_title, raw_level=0, eff_level=0)
    stack = [root]
    in_fence = False
    for line in markdown.splitlines(keepends=True):
        if _FENCE.match(line):
            stack[-1].body_parts.append(line)
            in_fence = not in_fence
            continue
        m = None if in_fence else _ATX.match(line)
        if m is None:
            stack[-1].body_parts.append(line)
            continue
        raw_level = len(m.group(1))
        while stack[-1].raw_level >= raw_level:
            stack.pop()
        parent = stack[-1]
        # Converter level noise: a jump deeper than one level is treated as
        # parent + 1.
        eff_level = min(raw_level, parent.eff_level + 1)
        node = _Section(title=m.group(2).strip(), raw_level=raw_level, eff_level=eff_level, parent=parent)
        parent.children.append(node)
        stack.append(node)
    return root


def split_hierarchical(
    markdown: str,
    chunk_size: int = 1000,
    overlap: int = 200,
    *,
    doc_title: str,
    doc_id: str = "",
) -> list[Chunk]:
    """Split along the full section tree, attaching a breadcrumb to every chunk.

    The breadcrumb is [doc_title, h1, h2, ...] along the chunk's tree path;
    the size budget applies to the body only.
    """
    _validate_params(chunk_size, overlap)
    root = _build_section_tree(markdown, doc_title)
    flat_document = not root.children
    chunks: list[Chunk] = []

    def walk(node: _Section, path: tuple[str, ...]) -> None:
        body = "".join(node.body_parts)
        if flat_document:
            keep = bool(body)
        else:
            keep = bool(body.strip())
        if keep:
            packed = _pack(_atomize_markdown(body, chunk_size), chunk_size, overlap)
            chunks.extend(
                _make_chunks(packed, doc_id, HIERARCHICAL_RECURSIVE, breadcrumb=path, start_position=len(chunks))
            )
        for child in node.children:
            walk(child, path + (child.title,))

    walk(root, (doc_title,))
    return chunks


def render_for_embedding(chunk: Chunk, include_breadcrumb: bool) -> str:
    """Text handed to the embedder: optional breadcrumb prefix plus the body."""
    if include_breadcrumb and chunk.breadcrumb:
        return BREADCRUMB_SEPARATOR.join(chunk.breadcrumb) + "\n\n" + chunk.body
    return chunk.body


def split_with_strategy(
    markdown: str,
    strategy: str,
    chunk_size: int = 1000,
    overlap: int = 200,
    *,
    doc_title: str = "",
    doc_id: str = "",
) -> list[Chunk]:
    if strategy == RECURSIVE:
        return split_recursive(markdown, chunk_size, overlap, doc_id=doc_id)
    if strategy == MARKDOWN_RECURSIVE:
        return split_markdown_recursive(markdown, chunk_size, overlap, doc_id=doc_id)
    if strategy == HIERARCHICAL_RECURSIVE:
        return split_hierarchical(markdown, chunk_size, overlap, doc_title=doc_title, doc_id=doc_id)
    raise BadParams(f"unknown splitting strategy {strategy!r}")


def dump_chunks_jsonl(chunks: list[Chunk], path: Path) -> None:
    """Debug/provenance dump: one JSON object per chunk per line."""
    with open(path, "w", encoding="utf-8") as handle:
        for chunk in chunks:
            handle.write(json.dumps(chunk.to_dict(), ensure_ascii=False) + "\n")


def load_chunks_jsonl(path: Path) -> list[Chunk]:
    chunks = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                chunks.append(Chunk.from_dict(json.loads(line)))
    return chunks
