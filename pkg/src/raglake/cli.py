"""Command line interface: one verb per pipeline stage.

Exit codes: 0 success, 1 partial failure (some documents failed), 2
configuration error.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import bench as bench_mod
from . import kgraph, split
from .errors import ConfigError, RagLakeError
from .index import VectorIndex
from .lakehouse import Lakehouse
from .orchestrate import PipelineConfig, StageSummary, build_clients, load_config, run_pipeline
from .service import QueryEngine, build_app, serve

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


def _echo_summary(summary: StageSummary) -> None:
    click.echo(f"stage {summary.stage}: {len(summary.processed)} ok, {len(summary.failed)} failed")
    for doc_id, count in sorted(summary.chunk_counts.items()):
        click.echo(f"  {doc_id[:12]}…  {count} chunks")
    for doc_id, warnings in sorted(summary.warnings.items()):
        for warning in warnings:
            click.echo(f"  warn {doc_id[:12]}…  {warning}")
    for doc_id, error in sorted(summary.failed.items()):
        click.echo(f"  FAIL {doc_id[:12]}…  {error}", err=True)
    if summary.index_size is not None:
        click.echo(f"index size: {summary.index_size}")


@click.group()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--verbose", is_flag=True, default=False)
@click.pass_context
def main(ctx: click.Context, config_path: Path, verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        ctx.obj = load_config(config_path)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


@main.command()
@click.argument("pdfs", nargs=-1, required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--category", default="other", show_default=True)
@click.option("--meta", multiple=True, help="user metadata as key=value, repeatable")
@click.pass_obj
def ingest(config: PipelineConfig, pdfs: tuple[Path, ...], category: str, meta: tuple[str, ...]):
    """Hash-name PDFs into the Bronze layer and register them."""
    metadata = {}
    for item in meta:
        key, _, value = item.partition("=")
        metadata[key] = value
    lakehouse = Lakehouse(config.lakehouse_root)
    failures = 0
    for pdf in pdfs:
        try:
            entry = lakehouse.ingest_raw(pdf.read_bytes(), pdf.name, category, metadata)
            click.echo(f"{entry.doc_id}  {entry.original_filename}")
        except (RagLakeError, ValueError, OSError) as exc:
            failures += 1
            click.echo(f"FAIL {pdf}: {exc}", err=True)
    click.echo(f"catalog size: {len(lakehouse)}")
    sys.exit(EXIT_PARTIAL if failures else EXIT_OK)


def _stage_command(config: PipelineConfig, stage: str, docs: str, workers: int) -> None:
    doc_ids = [d for d in docs.split(",") if d] if docs else None
    try:
        summary = run_pipeline(config, stage, doc_ids=doc_ids, workers=workers)
    except RagLakeError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_PARTIAL)
    _echo_summary(summary)
    sys.exit(EXIT_OK if summary.ok else EXIT_PARTIAL)


@main.command()
@click.option("--docs", default="", help="comma-separated doc_ids (default: all)")
@click.option("--workers", default=1, show_default=True, type=int)
@click.pass_obj
def etl(config: PipelineConfig, docs: str, workers: int):
    """Convert + transform + promote selected Bronze documents to Gold."""
    _stage_command(config, "etl", docs, workers)


@main.command(name="index")
@click.option("--docs", default="", help="comma-separated doc_ids (default: all)")
@click.option("--workers", default=1, show_default=True, type=int)
@click.pass_obj
def index_cmd(config: PipelineConfig, docs: str, workers: int):
    """Split, embed, and upsert documents into the vector index."""
    _stage_command(config, "index", docs, workers)


def build_engine(config: PipelineConfig, clients: dict | None = None) -> QueryEngine:
    clients = clients or build_clients(config)
    return QueryEngine(
        index=VectorIndex.load_or_empty(config.index_path),
        embedder=clients["embedder"],
        llm=clients["llm"],
        lakehouse=Lakehouse(config.lakehouse_root),
        default_k=config.k,
        prompt_char_budget=config.prompt_char_budget,
    )


def make_bench_runner(config: PipelineConfig, engine: QueryEngine, judge):
    """HTTP benchmark hook: runs the configured question set against the live
    engine, labelling the result with the requested config name."""
    if config.bench_questions is None:
        return None
    items = bench_mod.load_items(config.bench_questions)

    def runner(config_name: str) -> dict:
        result = bench_mod.run_benchmark(
            items,
            answerer=lambda question: engine.answer_query(question).answer,
            judge=judge,
            runs=config.bench_runs,
            config_label=config_name,
        )
        return result.to_dict()

    return runner


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
@click.pass_obj
def serve_cmd(config: PipelineConfig, host: str, port: int):
    """Serve the query REST API (and the webchat app when built)."""
    clients = build_clients(config)
    engine = build_engine(config, clients)
    app = build_app(
        engine,
        lakehouse=engine.lakehouse,
        bench_runner=make_bench_runner(config, engine, clients["judge"]),
        webchat_dir=config.webchat_dir,
    )
    try:
        serve(app, host=host, port=port)
    except OSError as exc:
        click.echo(f"cannot bind {host}:{port}: {exc}", err=True)
        sys.exit(EXIT_PARTIAL)


main.add_command(serve_cmd, name="serve")


@main.group()
def bench():
    """Benchmark commands."""


@bench.command(name="run")
@click.option("--questions", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--runs", default=None, type=int, help="defaults to the configured bench_runs")
@click.option("--out", "out_dir", default=None, type=click.Path(path_type=Path))
@click.option("--label", default="current", show_default=True)
@click.pass_obj
def bench_run(config: PipelineConfig, questions: Path, runs: int | None, out_dir: Path | None, label: str):
    """Run the LLM-as-judge benchmark against the current index."""
    clients = build_clients(config)
    engine = build_engine(config, clients)
    items = bench_mod.load_items(questions)
    transcripts = out_dir / "transcripts" if out_dir else None
    try:
        result = bench_mod.run_benchmark(
            items,
            answerer=lambda question: engine.answer_query(question).answer,
            judge=clients["judge"],
            runs=runs or config.bench_runs,
            config_label=label,
            transcript_dir=transcripts,
        )
    except RagLakeError as exc:
        click.echo(f"benchmark failed: {exc}", err=True)
        sys.exit(EXIT_PARTIAL)
    descriptor = {
        "data_preparation": config.converter.kind,
        "k": config.k,
        "transformations": [p.name for p in config.transforms],
        "splitting": config.splitter,
        "hierarchical_metadata": config.hierarchical_metadata,
    }
    report = bench_mod.render_report([(descriptor, result)])
    click.echo(report)
    click.echo(f"mean accuracy: {result.mean_accuracy * 100:.1f}%")
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "result.json").write_text(
            json.dumps(result.to_dict(), ensure_ascii=False, indent=2), encoding="utf-8"
        )
        (out_dir / "report.md").write_text(report + "\n", encoding="utf-8")


@main.group()
def kg():
    """Knowledge graph commands."""


def _graph_chunks(config: PipelineConfig) -> tuple[list, dict]:
    """Sliding-window chunks over every document, for graph construction."""
    from .orchestrate import _document_markdown

    lakehouse = Lakehouse(config.lakehouse_root)
    chunks: list = []
    doc_paths: dict[str, str] = {}
    for entry in lakehouse.entries():
        markdown, _title = _document_markdown(lakehouse, config, entry)
        chunks.extend(
            split.split_recursive(markdown, config.chunk_size, config.overlap, doc_id=entry.doc_id)
        )
        doc_paths[entry.doc_id] = entry.original_filename
    return chunks, doc_paths


@kg.command(name="build")
@click.pass_obj
def kg_build(config: PipelineConfig):
    """Extract triples from every chunk and build the persisted graph."""
    clients = build_clients(config)
    chunks, doc_paths = _graph_chunks(config)
    warnings: list[str] = []
    try:
        _graph, stats = kgraph.build_graph(
            chunks,
            clients["llm"],
            clients["embedder"],
            graph_dir=config.graph_path,
            doc_paths=doc_paths,
            warnings=warnings,
        )
    except RagLakeError as exc:
        click.echo(f"graph build failed: {exc}", err=True)
        sys.exit(EXIT_PARTIAL)
    for warning in warnings:
        click.echo(f"warn: {warning}", err=True)
    click.echo(kgraph.format_stats_report(stats, config.dedup_threshold))


@kg.command(name="dedup")
@click.option("--threshold", default=None, type=float, help="defaults to the configured dedup_threshold")
@click.pass_obj
def kg_dedup(config: PipelineConfig, threshold: float | None):
    """Merge semantically duplicate entities into canonical forms."""
    clients = build_clients(config)
    graph = kgraph.KnowledgeGraph.load(config.graph_path)
    effective = threshold if threshold is not None else config.dedup_threshold
    stats = kgraph.dedup_entities(graph, clients["embedder"], effective, graph_dir=config.graph_path)
    click.echo(kgraph.format_stats_report(stats, effective))


@kg.command(name="stats")
@click.pass_obj
def kg_stats(config: PipelineConfig):
    """Report node/edge/component statistics of the persisted graph."""
    graph = kgraph.KnowledgeGraph.load(config.graph_path)
    click.echo(kgraph.format_stats_report(kgraph.graph_stats(graph), config.dedup_threshold))


if __name__ == "__main__":
    main()
