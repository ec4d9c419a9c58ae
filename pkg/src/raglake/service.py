"""Grounded question answering over the vector index, exposed as a REST API.

``POST /query`` embeds the question, retrieves top-K chunks, assembles a
grounded prompt (numbered context blocks carrying breadcrumb, source filename
and body), calls the configured chat model, and returns the answer plus the
source documents behind it. Request handling is stateless over a read-only
index snapshot; every response carries an ``X-Request-ID`` header.
"""

from __future__ import annotations

import logging
import threading
import uuid
from dataclasses import dataclass
from email.parser import BytesParser
from email.policy import HTTP
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .errors import (
    EmptyQuestion,
    ModelUnavailable,
    NoIndex,
    RagLakeError,
)
from .index import VectorIndex, embed_texts
from .lakehouse import Lakehouse
from .prompts import load_prompt

logger = logging.getLogger(__name__)

DEFAULT_PROMPT_CHAR_BUDGET = 100_000


@dataclass(frozen=True)
class SourceRef:
    doc_id: str
    original_filename: str
    chunks: tuple[tuple[str, float], ...]

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "original_filename": self.original_filename,
            "chunks": [{"chunk_id": cid, "score": score} for cid, score in self.chunks],
        }


@dataclass(frozen=True)
class QueryResult:
    answer: str
    sources: tuple[SourceRef, ...]
    k_used: int
    model: str

    def to_dict(self) -> dict:
        return {
            "answer": self.answer,
            "sources": [source.to_dict() for source in self.sources],
            "k_used": self.k_used,
            "model": self.model,
        }


def assemble_messages(question: str, blocks: list[str]) -> list[dict]:
    """The grounded prompt shared by vector and graph retrieval paths."""
    system = load_prompt("answer")
    user = "\n\n".join(blocks) + f"\n\nQuestion: {question}"
    return [
        {"role": "system", "content": system},
        {"role": "user", "content": user},
    ]


def format_block(rank: int, filename: str, breadcrumb: tuple[str, ...], body: str) -> str:
    header = f"[{rank}] file: {filename}"
    if breadcrumb:
        header += " | section: " + " > ".join(breadcrumb)
    return f"{header}\n{body}"


def sources_from_hits(hits, filename_of) -> tuple[SourceRef, ...]:
    """Deduplicate by doc_id, ordered by each document's best chunk score."""
    per_doc: dict[str, list[tuple[str, float]]] = {}
    for record, score in hits:
        per_doc.setdefault(record.doc_id, []).append((record.chunk_id, score))
    ranked = sorted(per_doc.items(), key=lambda kv: (-max(s for _, s in kv[1]), kv[0]))
    return tuple(
        SourceRef(doc_id=doc_id, original_filename=filename_of(doc_id), chunks=tuple(chunks))
        for doc_id, chunks in ranked
    )


class QueryEngine:
    """Stateless answerer over an index snapshot plus configured clients."""

    def __init__(
        self,
        index: VectorIndex,
        embedder,
        llm,
        lakehouse: Lakehouse | None = None,
        default_k: int = 50,
        prompt_char_budget: int = DEFAULT_PROMPT_CHAR_BUDGET,
    ):
        self.index = index
        self.embedder = embedder
        self.llm = llm
        self.lakehouse = lakehouse
        self.default_k = default_k
        self.prompt_char_budget = prompt_char_budget

    def _filename_of(self, doc_id: str) -> str:
        if self.lakehouse is not None:
            try:
                return self.lakehouse.get_entry(doc_id).original_filename
            except RagLakeError:
                pass
        return doc_id

    def answer_query(self, question: str, k: int | None = None) -> QueryResult:
        if not question or not question.strip():
            raise EmptyQuestion("question must be non-empty")
        if len(self.index) == 0:
            raise NoIndex("vector index holds no records")
        k = k if k is not None else self.default_k
        if k < 1:
            raise EmptyQuestion("k must be a positive integer")
        query_vector = embed_texts([question], self.embedder)[0]
        hits = self.index.top_k(query_vector, k)

        blocks = []
        for rank, (record, _score) in enumerate(hits, start=1):
            blocks.append(
                format_block(rank, self._filename_of(record.doc_id), record.breadcrumb, record.rendered_text)
            )
        # Budget enforcement: drop lowest-ranked blocks whole, never truncate
        # mid-block; k_used reflects the drop.
        kept = list(blocks)
        while kept and sum(len(b) + 2 for b in kept) > self.prompt_char_budget:
            kept.pop()
        if not kept:
            kept = blocks[:1]
        hits = hits[: len(kept)]

        messages = assemble_messages(question, kept)
        answer = self.llm.complete(messages, temperature=0.0)
        return QueryResult(
            answer=answer,
            sources=sources_from_hits(hits, self._filename_of),
            k_used=len(kept),
            model=getattr(self.llm, "model", "unknown"),
        )


# ---------------------------------------------------------------------------
# REST API
# ---------------------------------------------------------------------------


@dataclass
class BenchJob:
    run_id: str
    config_name: str
    status: str = "running"  # running | completed | failed
    result: dict | None = None
    error: str = ""


class BenchRegistry:
    """In-memory registry of benchmark runs started over the API."""

    def __init__(self):
        self._jobs: dict[str, BenchJob] = {}
        self._lock = threading.Lock()

    def create(self, config_name: str) -> BenchJob:
        job = BenchJob(run_id=uuid.uuid4().hex, config_name=config_name)
        with self._lock:
            self._jobs[job.run_id] = job
        return job

    def get(self, run_id: str) -> BenchJob | None:
        with self._lock:
            return self._jobs.get(run_id)

    def finish(self, run_id: str, result: dict | None = None, error: str = "") -> None:
        with self._lock:
            job = self._jobs[run_id]
            job.status = "failed" if error else "completed"
            job.result = result
            job.error = error


def _parse_multipart(content_type: str, body: bytes) -> list[tuple[str, str, bytes]]:
    """Parse multipart/form-data into (field_name, filename, payload) rows."""
    header = f"Content-Type: {content_type}\r\n\r\n".encode("latin-1")
    message = BytesParser(policy=HTTP).parsebytes(header + body)
    parts = []
    if message.is_multipart():
        for part in message.iter_parts():
            name = part.get_param("name", header="content-disposition") or ""
            filename = part.get_filename() or ""
            parts.append((name, filename, part.get_payload(decode=True) or b""))
    return parts


def build_app(
    engine: QueryEngine,
    lakehouse: Lakehouse | None = None,
    bench_runner=None,
    webchat_dir: Path | None = None,
):
    """Assemble the FastAPI application.

    ``bench_runner`` is a callable (config_name) -> RunResult-shaped dict,
    executed on a worker thread per benchmark request.
    """
    app = FastAPI(title="raglake", docs_url=None, redoc_url=None)
    registry = BenchRegistry()
    app.state.engine = engine
    app.state.bench_registry = registry

    @app.middleware("http")
    async def request_id_middleware(request: Request, call_next):
        response = await call_next(request)
        response.headers["X-Request-ID"] = uuid.uuid4().hex
        return response

    def error_response(status: int, code: str, detail: str):
        return JSONResponse(status_code=status, content={"error": code, "detail": detail})

    @app.get("/health")
    async def health():
        return {"status": "ok"}

    @app.post("/query")
    async def query(request: Request):
        try:
            payload = await request.json()
        except Exception:
            payload = {}
        if not isinstance(payload, dict):
            payload = {}
        question = payload.get("question", "")
        k = payload.get("k")
        if not isinstance(question, str) or not question.strip():
            return error_response(400, "empty_question", "question must be a non-empty string")
        if k is not None and (not isinstance(k, int) or isinstance(k, bool) or k < 1):
            return error_response(400, "bad_k", "k must be a positive integer")
        try:
            result = app.state.engine.answer_query(question, k)
        except NoIndex as exc:
            return error_response(409, "no_index", str(exc))
        except ModelUnavailable as exc:
            return error_response(502, "model_unavailable", str(exc))
        return result.to_dict()

    @app.get("/documents")
    async def documents():
        if lakehouse is None:
            return {"documents": []}
        return {"documents": [entry.to_dict() for entry in lakehouse.entries()]}

    @app.post("/documents")
    async def upload_document(request: Request):
        if lakehouse is None:
            return error_response(503, "no_lakehouse", "service is running without a lakehouse")
        content_type = request.headers.get("content-type", "")
        if "multipart/form-data" not in content_type:
            return error_response(400, "not_multipart", "expected a multipart/form-data PDF upload")
        body = await request.body()
        parts = _parse_multipart(content_type, body)
        file_part = next((p for p in parts if p[0] == "file" or p[1]), None)
        if file_part is None or not file_part[2]:
            return error_response(400, "empty_upload", "multipart body carries no file payload")
        fields = {name: payload.decode("utf-8", "replace") for name, filename, payload in parts if not filename}
        category = fields.get("category", "other")
        try:
            entry = lakehouse.ingest_raw(
                file_part[2],
                filename=file_part[1] or "upload.pdf",
                category=category,
                user_metadata={k: v for k, v in fields.items() if k not in ("category",)},
            )
        except ValueError as exc:
            return error_response(400, "bad_category", str(exc))
        except RagLakeError as exc:
            return error_response(400, "ingest_failed", str(exc))
        return entry.to_dict()

    @app.post("/benchmark/run")
    async def benchmark_run(request: Request):
        if bench_runner is None:
            return error_response(503, "bench_disabled", "benchmark execution is not configured")
        try:
            payload = await request.json()
        except Exception:
            payload = {}
        config_name = payload.get("config_name", "") if isinstance(payload, dict) else ""
        if not isinstance(config_name, str) or not config_name:
            return error_response(400, "missing_config_name", "config_name is required")
        job = registry.create(config_name)

        def work():
            try:
                result = bench_runner(config_name)
                registry.finish(job.run_id, result=result)
            except Exception as exc:  # surfaced through the status endpoint
                logger.exception("benchmark run %s failed", job.run_id)
                registry.finish(job.run_id, error=str(exc))

        threading.Thread(target=work, name=f"bench-{job.run_id}", daemon=True).start()
        return {"run_id": job.run_id}

    @app.get("/benchmark/{run_id}")
    async def benchmark_status(run_id: str):
        job = registry.get(run_id)
        if job is None:
            return error_response(404, "unknown_run", f"no benchmark run {run_id}")
        return {
            "run_id": job.run_id,
            "config_name": job.config_name,
            "status": job.status,
            "result": job.result,
            "error": job.error,
        }

    if webchat_dir is not None and Path(webchat_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/app", StaticFiles(directory=str(webchat_dir), html=True), name="webchat")

    return app


def serve(app, host: str = "127.0.0.1", port: int = 8000) -> None:
    """Run the service; raises OSError when the port is unavailable."""
    import uvicorn

    uvicorn.run(app, host=host, port=port, log_level="warning")
