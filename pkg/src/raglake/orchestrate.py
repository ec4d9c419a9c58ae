"""Pipeline configuration loading/validation and end-to-end stage driving.

A single JSON settings file selects the converter, cleaning passes, splitting
strategy, metadata enrichment, retrieval depth, and model endpoints; swapping
any dimension of the pipeline is a one-field edit. Stages re-run from scratch
per invocation, and a failure in one document never aborts the batch.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import convert as convert_mod
from . import prompts, split, transform
from .clients import EndpointConfig, build_captioner, build_chat, build_embedder
from .convert import ConverterSpec, NATIVE_BASELINE
from .errors import (
    ConfigParseError,
    ConfigValidationError,
    NoDocuments,
    RagLakeError,
)
from .index import VectorIndex, VectorRecord, embed_texts
from .lakehouse import CatalogEntry, Lakehouse
from .transform import CaptionCache, TransformPass

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 1000
DEFAULT_OVERLAP = 200
DEFAULT_K = 50
DEFAULT_BENCH_RUNS = 10
DEFAULT_DEDUP_THRESHOLD = 0.85
DEFAULT_MENTION_WEIGHT = 0.1

_ATX = re.compile(r"^#{1,6}[ \t]+(.+?)\s*$", re.MULTILINE)


@dataclass(frozen=True)
class PipelineConfig:
    converter: ConverterSpec = ConverterSpec()
    transforms: tuple[TransformPass, ...] = ()
    splitter: str = split.RECURSIVE
    hierarchical_metadata: bool = False
    chunk_size: int = DEFAULT_CHUNK_SIZE
    overlap: int = DEFAULT_OVERLAP
    k: int = DEFAULT_K
    bench_runs: int = DEFAULT_BENCH_RUNS
    dedup_threshold: float = DEFAULT_DEDUP_THRESHOLD
    graph_mention_weight: float = DEFAULT_MENTION_WEIGHT
    embedding: EndpointConfig = EndpointConfig()
    llm: EndpointConfig = EndpointConfig()
    judge: EndpointConfig = EndpointConfig()
    vlm: EndpointConfig = EndpointConfig()
    lakehouse_root: Path = Path("lakehouse")
    index_path: Path = Path("index")
    graph_path: Path = Path("graph")
    prompt_char_budget: int = 100_000
    prompt_overrides: tuple[tuple[str, str], ...] = ()
    bench_questions: Path | None = None
    webchat_dir: Path | None = None

    def to_dict(self) -> dict:
        return {
            "converter": {
                "kind": self.converter.kind,
                "command_template": self.converter.command_template,
                "timeout_s": self.converter.timeout_s,
            },
            "transforms": [{"name": p.name, "params": dict(p.params)} for p in self.transforms],
            "splitter": self.splitter,
            "hierarchical_metadata": self.hierarchical_metadata,
            "chunk_size": self.chunk_size,
            "overlap": self.overlap,
            "k": self.k,
            "bench_runs": self.bench_runs,
            "dedup_threshold": self.dedup_threshold,
            "graph_mention_weight": self.graph_mention_weight,
            "embedding": self.embedding.to_dict(),
            "llm": self.llm.to_dict(),
            "judge": self.judge.to_dict(),
            "vlm": self.vlm.to_dict(),
            "lakehouse_root": str(self.lakehouse_root),
            "index_path": str(self.index_path),
            "graph_path": str(self.graph_path),
            "prompt_char_budget": self.prompt_char_budget,
            "prompt_overrides": dict(self.prompt_overrides),
            "bench_questions": str(self.bench_questions) if self.bench_questions else None,
            "webchat_dir": str(self.webchat_dir) if self.webchat_dir else None,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        defaults = cls()
        try:
            converter_raw = raw.get("converter", {})
            converter = ConverterSpec(
                kind=converter_raw.get("kind", NATIVE_BASELINE),
                command_template=converter_raw.get("command_template", ""),
                timeout_s=converter_raw.get("timeout_s", 300),
            )
            transforms = []
            for item in raw.get("transforms", []):
                if isinstance(item, str):
                    transforms.append(TransformPass(name=item))
                else:
                    transforms.append(TransformPass(name=item["name"], params=dict(item.get("params", {}))))
            return cls(
                converter=converter,
                transforms=tuple(transforms),
                splitter=raw.get("splitter", defaults.splitter),
                hierarchical_metadata=raw.get("hierarchical_metadata", defaults.hierarchical_metadata),
                chunk_size=raw.get("chunk_size", defaults.chunk_size),
                overlap=raw.get("overlap", defaults.overlap),
                k=raw.get("k", defaults.k),
                bench_runs=raw.get("bench_runs", defaults.bench_runs),
                dedup_threshold=raw.get("dedup_threshold", defaults.dedup_threshold),
                graph_mention_weight=raw.get("graph_mention_weight", defaults.graph_mention_weight),
                embedding=EndpointConfig.from_dict(raw.get("embedding", {})),
                llm=EndpointConfig.from_dict(raw.get("llm", {})),
                judge=EndpointConfig.from_dict(raw.get("judge", {})),
                vlm=EndpointConfig.from_dict(raw.get("vlm", {})),
                lakehouse_root=Path(raw.get("lakehouse_root", defaults.lakehouse_root)),
                index_path=Path(raw.get("index_path", defaults.index_path)),
                graph_path=Path(raw.get("graph_path", defaults.graph_path)),
                prompt_char_budget=raw.get("prompt_char_budget", defaults.prompt_char_budget),
                prompt_overrides=tuple(sorted(raw.get("prompt_overrides", {}).items())),
                bench_questions=Path(raw["bench_questions"]) if raw.get("bench_questions") else None,
                webchat_dir=Path(raw["webchat_dir"]) if raw.get("webchat_dir") else None,
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigValidationError(str(exc)) from exc

    def validate(self) -> None:
        if self.chunk_size < 1:
            raise ConfigValidationError("invariant violated: chunk_size must be >= 1")
        if not (0 <= self.overlap < self.chunk_size):
            raise ConfigValidationError("invariant violated: overlap < chunk_size")
        if self.k < 1:
            raise ConfigValidationError("invariant violated: k >= 1")
        if self.bench_runs < 1:
            raise ConfigValidationError("invariant violated: bench_runs >= 1")
        if not (0.0 <= self.dedup_threshold <= 1.0):
            raise ConfigValidationError("invariant violated: dedup_threshold in [0, 1]")
        if self.splitter not in split.STRATEGIES:
            raise ConfigValidationError(
                f"invariant violated: splitter must be one of {split.STRATEGIES}"
            )
        if self.hierarchical_metadata and self.splitter != split.HIERARCHICAL_RECURSIVE:
            raise ConfigValidationError(
                "invariant violated: hierarchical_metadata requires splitter = hierarchical_recursive"
            )
        try:
            transform.validate_transforms(list(self.transforms))
        except ValueError as exc:
            raise ConfigValidationError(f"invariant violated: {exc}") from exc


def load_config(path: Path) -> PipelineConfig:
    """Parse, default-fill, validate, and echo the effective configuration."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigParseError(f"{path}: top-level JSON value must be an object")
    config = PipelineConfig.from_dict(raw)
    config.validate()
    for name, override in config.prompt_overrides:
        prompts.set_override(name, Path(override))
    logger.info("effective config: %s", json.dumps(config.to_dict(), sort_keys=True))
    return config


# ---------------------------------------------------------------------------
# Stage driving
# ---------------------------------------------------------------------------


@dataclass
class StageSummary:
    stage: str
    processed: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)
    warnings: dict[str, list[str]] = field(default_factory=dict)
    chunk_counts: dict[str, int] = field(default_factory=dict)
    index_size: int | None = None

    @property
    def ok(self) -> bool:
        return not self.failed


def _select_entries(lakehouse: Lakehouse, doc_ids: list[str] | None) -> list[CatalogEntry]:
    if doc_ids:
        return [lakehouse.get_entry(doc_id) for doc_id in doc_ids]
    return lakehouse.entries()


def _doc_title(markdown: str, entry: CatalogEntry) -> str:
    m = _ATX.search(markdown)
    if m:
        return m.group(1)
    return Path(entry.original_filename).stem or entry.doc_id[:12]


def _ordered(passes: tuple[TransformPass, ...]) -> list[TransformPass]:
    return transform.ordered_passes(list(passes))


def _etl_one(lakehouse: Lakehouse, config: PipelineConfig, entry: CatalogEntry, clients: dict) -> list[str]:
    pdf_path = lakehouse.bronze_path(entry.doc_id)
    silver = lakehouse.silver_dir(entry.doc_id)
    result = convert_mod.convert(pdf_path, config.converter)
    warnings = list(result.warnings)
    (silver / "raw.md").write_text(result.markdown, encoding="utf-8")

    spans = None
    pass_names = [p.name for p in _ordered(config.transforms)]
    if "hr_font" in pass_names:
        spans = convert_mod.extract_font_spans(pdf_path)
        (silver / "font_spans.json").write_text(
            json.dumps(spans.to_json(), ensure_ascii=False, indent=2), encoding="utf-8"
        )

    markdown = result.markdown
    for item in _ordered(config.transforms):
        if item.name == "html_tables":
            markdown = transform.clean_html_tables(markdown, warnings)
        elif item.name == "latex":
            markdown = transform.clean_latex(markdown, warnings)
        elif item.name == "hr_font":
            markdown = transform.rebuild_hierarchy_font(markdown, spans, warnings)
        elif item.name == "hr_llm":
            markdown = transform.rebuild_hierarchy_llm(markdown, clients["llm"], warnings)
        elif item.name == "image_desc":
            cache = CaptionCache(silver / "captions.json")
            markdown = transform.describe_images(markdown, result.assets, clients["vlm"], cache, warnings)
        (silver / f"after_{item.name}.md").write_text(markdown, encoding="utf-8")

    enrichment = {
        "title": _doc_title(markdown, entry),
        "category": entry.category,
        "source_filename": entry.original_filename,
        "converter": config.converter.kind,
        "transforms": [p.name for p in _ordered(config.transforms)],
    }
    lakehouse.promote_to_gold(entry.doc_id, markdown, result.assets, enrichment)
    return warnings


def _document_markdown(lakehouse: Lakehouse, config: PipelineConfig, entry: CatalogEntry) -> tuple[str, str]:
    """(markdown, doc_title) for indexing; Bronze is read directly when the
    pipeline is the bare native baseline, bypassing the ETL output."""
    if config.converter.kind == NATIVE_BASELINE and not config.transforms:
        markdown = convert_mod.convert_native(lakehouse.bronze_path(entry.doc_id)).markdown
        return markdown, _doc_title(markdown, entry)
    bundle = lakehouse.resolve_bundle(entry.doc_id)
    markdown = bundle.markdown_path.read_text(encoding="utf-8")
    title = _doc_title(markdown, entry)
    if bundle.enrichment_path.is_file():
        enrichment = json.loads(bundle.enrichment_path.read_text(encoding="utf-8"))
        title = enrichment.get("title", title)
    return markdown, title


def _index_one(
    lakehouse: Lakehouse, config: PipelineConfig, entry: CatalogEntry, embedder
) -> tuple[list[VectorRecord], int]:
    markdown, title = _document_markdown(lakehouse, config, entry)
    chunks = split.split_with_strategy(
        markdown,
        config.splitter,
        config.chunk_size,
        config.overlap,
        doc_title=title,
        doc_id=entry.doc_id,
    )
    if not chunks:
        return [], 0
    rendered = [split.render_for_embedding(c, config.hierarchical_metadata) for c in chunks]
    vectors = embed_texts(rendered, embedder)
    records = [
        VectorRecord(
            chunk_id=chunk.chunk_id,
            doc_id=chunk.doc_id,
            vector=vector,
            rendered_text=text,
            breadcrumb=chunk.breadcrumb,
            position=chunk.position,
        )
        for chunk, vector, text in zip(chunks, vectors, rendered)
    ]
    return records, len(chunks)


def build_clients(config: PipelineConfig) -> dict:
    return {
        "embedder": build_embedder(config.embedding),
        "llm": build_chat(config.llm, "answer"),
        "judge": build_chat(config.judge, "judge"),
        "vlm": build_captioner(config.vlm),
    }


def run_pipeline(
    config: PipelineConfig,
    stage: str,
    doc_ids: list[str] | None = None,
    workers: int = 1,
    clients: dict | None = None,
) -> StageSummary:
    """Drive etl, index, or both over the selected documents."""
    if stage not in ("etl", "index", "all"):
        raise ConfigValidationError(f"unknown stage {stage!r}")
    config.validate()
    clients = clients or build_clients(config)
    lakehouse = Lakehouse(config.lakehouse_root)
    entries = _select_entries(lakehouse, doc_ids)
    if not entries:
        raise NoDocuments("no documents selected; Bronze layer is empty")
    summary = StageSummary(stage=stage)

    if stage in ("etl", "all"):
        def etl_task(entry: CatalogEntry) -> tuple[str, list[str] | None, str]:
            try:
                return entry.doc_id, _etl_one(lakehouse, config, entry, clients), ""
            except RagLakeError as exc:
                return entry.doc_id, None, str(exc)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(etl_task, entries))
        else:
            results = [etl_task(entry) for entry in entries]
        for doc_id, warnings, error in results:
            if error:
                summary.failed[doc_id] = error
            else:
                summary.processed.append(doc_id)
                if warnings:
                    summary.warnings[doc_id] = warnings

    if stage in ("index", "all"):
        embedder = clients["embedder"]
        index = (
            VectorIndex.load_or_empty(config.index_path) if doc_ids else VectorIndex()
        )
        for entry in entries:
            if entry.doc_id in summary.failed:
                continue
            try:
                records, count = _index_one(lakehouse, config, entry, embedder)
            except RagLakeError as exc:
                summary.failed[entry.doc_id] = str(exc)
                continue
            index.upsert(records)
            summary.chunk_counts[entry.doc_id] = count
            if stage == "index":
                summary.processed.append(entry.doc_id)
        index.save(config.index_path)
        summary.index_size = len(index)

    return summary
