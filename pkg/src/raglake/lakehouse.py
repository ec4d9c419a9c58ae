"""Layered document repository: Bronze (raw PDFs + catalog), Silver
(per-document processing scratch), Gold (RAG-ready bundles).

Layout under the configured root:

    bronze/<doc_id>.pdf         raw bytes, named by SHA-256
    bronze/<doc_id>.meta.json   per-document sidecar (same content as catalog row)
    silver/<doc_id>/...         converter output, font spans, intermediates
    gold/<doc_id>/document.md   finalized Markdown
    gold/<doc_id>/assets/       extracted images
    gold/<doc_id>/enrichment.json
    catalog.json                single JSON document, replaced atomically

One writer mutates the catalog at a time; Bronze and Gold files are immutable
once written except via atomic replace.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import threading
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .errors import EmptyInput, NotFound, StorageFailure, UnknownDocument

# Seed allowlist: the eight document categories this corpus style uses.
DEFAULT_CATEGORIES = (
    "legal consolidations",
    "manuals",
    "procedures",
    "brochures",
    "information notes",
    "guides",
    "legal decrees",
    "other",
)

_HEX_ID = frozenset("0123456789abcdef")


@dataclass(frozen=True)
class CatalogEntry:
    doc_id: str
    original_filename: str
    byte_size: int
    category: str
    user_metadata: tuple[tuple[str, str], ...] = ()
    ingested_at: str = ""

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "original_filename": self.original_filename,
            "byte_size": self.byte_size,
            "category": self.category,
            "user_metadata": dict(self.user_metadata),
            "ingested_at": self.ingested_at,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "CatalogEntry":
        return cls(
            doc_id=row["doc_id"],
            original_filename=row["original_filename"],
            byte_size=row["byte_size"],
            category=row["category"],
            user_metadata=tuple(sorted(row.get("user_metadata", {}).items())),
            ingested_at=row.get("ingested_at", ""),
        )


@dataclass(frozen=True)
class GoldBundle:
    doc_id: str
    markdown_path: Path
    assets_dir: Path
    enrichment_path: Path


def normalize_doc_id(doc_id: str, error_cls: type[Exception] = NotFound) -> str:
    normalized = doc_id.strip().lower()
    if len(normalized) != 64 or not set(normalized) <= _HEX_ID:
        raise error_cls(f"not a 64-char hex document id: {doc_id!r}")
    return normalized


def _write_atomic(path: Path, payload: bytes) -> None:
    tmp = path.with_name(f".{path.name}.{uuid.uuid4().hex}.tmp")
    try:
        tmp.write_bytes(payload)
        tmp.replace(path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise StorageFailure(f"cannot write {path}: {exc}") from exc


def _dump_json(payload: dict) -> bytes:
    return (json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n").encode("utf-8")


class Lakehouse:
    def __init__(self, root: Path, categories: tuple[str, ...] | None = DEFAULT_CATEGORIES):
        self.root = Path(root)
        self.categories = categories
        self.bronze = self.root / "bronze"
        self.silver = self.root / "silver"
        self.gold = self.root / "gold"
        self.catalog_path = self.root / "catalog.json"
        for directory in (self.bronze, self.silver, self.gold):
            directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._catalog: dict[str, CatalogEntry] = {}
        if self.catalog_path.is_file():
            payload = json.loads(self.catalog_path.read_text(encoding="utf-8"))
            for row in payload.get("documents", []):
                entry = CatalogEntry.from_dict(row)
                self._catalog[entry.doc_id] = entry

    # -- catalog ----------------------------------------------------------

    def entries(self) -> list[CatalogEntry]:
        return [self._catalog[k] for k in sorted(self._catalog)]

    def get_entry(self, doc_id: str) -> CatalogEntry:
        doc_id = normalize_doc_id(doc_id, UnknownDocument)
        entry = self._catalog.get(doc_id)
        if entry is None:
            raise UnknownDocument(f"doc_id {doc_id} not in catalog")
        return entry

    def __len__(self) -> int:
        return len(self._catalog)

    def _persist_catalog(self) -> None:
        payload = {"documents": [entry.to_dict() for entry in self.entries()]}
        _write_atomic(self.catalog_path, _dump_json(payload))

    # -- paths --------------------------------------------------------------

    def bronze_path(self, doc_id: str) -> Path:
        return self.bronze / f"{normalize_doc_id(doc_id)}.pdf"

    def silver_dir(self, doc_id: str) -> Path:
        directory = self.silver / normalize_doc_id(doc_id)
        directory.mkdir(parents=True, exist_ok=True)
        return directory

    # -- operations -----------------------------------------------------------

    def ingest_raw(
        self,
        pdf_bytes: bytes,
        filename: str,
        category: str,
        user_metadata: dict[str, str] | None = None,
    ) -> CatalogEntry:
        """Hash-name the PDF into Bronze and register it; idempotent over bytes."""
        if not pdf_bytes:
            raise EmptyInput("refusing to ingest zero bytes")
        if self.categories is not None and category not in self.categories:
            raise ValueError(f"category {category!r} not in allowlist {sorted(self.categories)}")
        doc_id = hashlib.sha256(pdf_bytes).hexdigest()
        with self._lock:
            existing = self._catalog.get(doc_id)
            if existing is not None:
                return existing
            entry = CatalogEntry(
                doc_id=doc_id,
                original_filename=filename,
                byte_size=len(pdf_bytes),
                category=category,
                user_metadata=tuple(sorted((user_metadata or {}).items())),
                ingested_at=datetime.now(timezone.utc).isoformat(),
            )
            _write_atomic(self.bronze_path(doc_id), pdf_bytes)
            _write_atomic(self.bronze / f"{doc_id}.meta.json", _dump_json(entry.to_dict()))
            self._catalog[doc_id] = entry
            self._persist_catalog()
            return entry

    def promote_to_gold(
        self,
        doc_id: str,
        markdown: str,
        assets: list[tuple[str, bytes]] | None = None,
        enrichment: dict | None = None,
    ) -> GoldBundle:
        """Create or atomically replace the Gold bundle for a catalogued document."""
        doc_id = normalize_doc_id(doc_id, UnknownDocument)
        if doc_id not in self._catalog:
            raise UnknownDocument(f"doc_id {doc_id} not in catalog")
        if not markdown:
            raise EmptyInput("gold markdown must be non-empty")
        target = self.gold / doc_id
        staging = self.gold / f".staging-{doc_id}-{uuid.uuid4().hex}"
        try:
            assets_dir = staging / "assets"
            assets_dir.mkdir(parents=True)
            (staging / "document.md").write_text(markdown, encoding="utf-8")
            for name, payload in assets or []:
                parts = Path(name).parts
                if Path(name).is_absolute() or ".." in parts:
                    raise ValueError(f"unsafe asset name {name!r}")
                destination = assets_dir.joinpath(*parts)
                destination.parent.mkdir(parents=True, exist_ok=True)
                destination.write_bytes(payload)
            (staging / "enrichment.json").write_bytes(_dump_json(enrichment or {}))
            with self._lock:
                if target.exists():
                    trash = self.gold / f".trash-{doc_id}-{uuid.uuid4().hex}"
                    os.rename(target, trash)
                    os.rename(staging, target)
                    shutil.rmtree(trash, ignore_errors=True)
                else:
                    os.rename(staging, target)
        except OSError as exc:
            shutil.rmtree(staging, ignore_errors=True)
            raise StorageFailure(f"cannot promote {doc_id}: {exc}") from exc
        finally:
            shutil.rmtree(staging, ignore_errors=True)
        return self.resolve_bundle(doc_id)

    def resolve_bundle(self, doc_id: str) -> GoldBundle:
        doc_id = normalize_doc_id(doc_id)
        bundle_dir = self.gold / doc_id
        markdown_path = bundle_dir / "document.md"
        if not markdown_path.is_file():
            raise NotFound(f"no gold bundle for {doc_id}")
        return GoldBundle(
            doc_id=doc_id,
            markdown_path=markdown_path,
            assets_dir=bundle_dir / "assets",
            enrichment_path=bundle_dir / "enrichment.json",
        )

    # -- integrity ---------------------------------------------------------------

    def verify_store(self) -> list[str]:
        """Full-store scan; returns human-readable problems (empty = healthy)."""
        problems = []
        for entry in self.entries():
            path = self.bronze_path(entry.doc_id)
            if not path.is_file():
                problems.append(f"{entry.doc_id}: bronze file missing")
                continue
            data = path.read_bytes()
            if hashlib.sha256(data).hexdigest() != entry.doc_id:
                problems.append(f"{entry.doc_id}: bronze bytes do not match doc_id")
            if len(data) != entry.byte_size:
                problems.append(f"{entry.doc_id}: byte_size {entry.byte_size} != file size {len(data)}")
        for bundle_dir in sorted(self.gold.iterdir() if self.gold.is_dir() else []):
            if bundle_dir.name.startswith("."):
                continue
            if bundle_dir.name not in self._catalog:
                problems.append(f"gold bundle {bundle_dir.name} has no catalog entry")
        return problems
