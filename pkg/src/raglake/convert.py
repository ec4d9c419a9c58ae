"""Silver-layer conversion: native PDF text extraction, the external-converter
contract, and per-span font metadata for hierarchy rebuilding."""

from __future__ import annotations

import logging
import os
import shlex
import subprocess
import tempfile
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path

from . import pdfio
from .errors import (
    ContractViolation,
    ConverterFailed,
    ConverterTimeout,
    UnreadablePdf,
)

logger = logging.getLogger(__name__)

NATIVE_BASELINE = "native_baseline"
EXTERNAL_COMMAND = "external_command"

# Baseline distance between consecutive text items that still counts as the
# same visual line, in points.
_LINE_TOLERANCE = 2.0


@dataclass(frozen=True)
class ConverterSpec:
    """Which converter to run; swappable through configuration alone."""

    kind: str = NATIVE_BASELINE
    command_template: str = ""
    timeout_s: int = 300

    def __post_init__(self):
        if self.kind not in (NATIVE_BASELINE, EXTERNAL_COMMAND):
            raise ValueError(f"unknown converter kind {self.kind!r}")
        if self.kind == EXTERNAL_COMMAND:
            for placeholder in ("{input}", "{outdir}"):
                if placeholder not in self.command_template:
                    raise ValueError(f"command_template must contain {placeholder}")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")


@dataclass
class ConversionResult:
    markdown: str
    assets: list[tuple[str, bytes]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    source_doc: str = ""


@dataclass(frozen=True)
class FontSpan:
    page: int
    order_index: int
    text: str
    font_size: float
    bold: bool


@dataclass
class FontSpanTable:
    spans: list[FontSpan] = field(default_factory=list)

    def to_json(self) -> list[dict]:
        return [vars(s) | {} for s in self.spans]

    @classmethod
    def from_json(cls, rows: list[dict]) -> "FontSpanTable":
        return cls([FontSpan(**row) for row in rows])


def normalize_text(text: str) -> str:
    """Boundary normalization: NFC, no NULs. Applied once per converter output."""
    return unicodedata.normalize("NFC", text).replace("\x00", "")


# ---------------------------------------------------------------------------
# Line assembly over raw text items
# ---------------------------------------------------------------------------


def _estimated_width(text: str, size: float) -> float:
    # No reliable glyph metrics without embedded width tables; half an em per
    # character is close enough to decide whether to insert a space.
    return 0.5 * size * len(text)


def _assemble_lines(items: list[pdfio.TextItem]) -> list[list[pdfio.TextItem]]:
    """Group one page's items into visual lines, top-to-bottom then left-to-right."""
    lines: list[list[pdfio.TextItem]] = []
    for item in sorted(items, key=lambda it: -it.y):
        if lines and abs(lines[-1][0].y - item.y) <= _LINE_TOLERANCE:
            lines[-1].append(item)
        else:
            lines.append([item])
    for line in lines:
        line.sort(key=lambda it: it.x)
    return lines


def _line_text(line: list[pdfio.TextItem]) -> str:
    parts: list[str] = []
    prev: pdfio.TextItem | None = None
    for item in line:
        if prev is not None and not item.joins_previous:
            gap = item.x - (prev.x + _estimated_width(prev.text, prev.size))
            if gap > 0.25 * max(prev.size, 1.0) and not prev.text.endswith(" "):
                parts.append(" ")
        parts.append(item.text)
        prev = item
    return "".join(parts)


def _detect_column_gaps(lines: list[list[pdfio.TextItem]]) -> bool:
    gapped = 0
    measured = 0
    for line in lines:
        if len(line) < 2:
            continue
        measured += 1
        xs = [it.x for it in line]
        span = max(xs) - min(xs)
        if span <= 0:
            continue
        for a, b in zip(line, line[1:]):
            if b.x - (a.x + _estimated_width(a.text, a.size)) > 0.35 * span:
                gapped += 1
                break
    return measured >= 4 and gapped / measured > 0.5


def _read_items(pdf_path: Path) -> list[list[pdfio.TextItem]]:
    try:
        data = Path(pdf_path).read_bytes()
    except OSError as exc:
        raise UnreadablePdf(f"cannot read {pdf_path}: {exc}") from exc
    try:
        return pdfio.read_pages(data)
    except pdfio.PdfError as exc:
        raise UnreadablePdf(f"{pdf_path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def convert_native(pdf_path: Path) -> ConversionResult:
    """Direct text extraction, no structure: the no-preprocessing baseline.

    Page texts are concatenated in page order with a blank line between
    pages. No heading markers are synthesized; diacritics pass through
    exactly as encoded (modulo NFC normalization at the boundary).
    """
    pages = _read_items(pdf_path)
    warnings: list[str] = []
    page_texts: list[str] = []
    for number, items in enumerate(pages, start=1):
        lines = _assemble_lines(items)
        if _detect_column_gaps(lines):
            warnings.append(f"page {number}: column-like gaps detected; reading order may interleave columns")
        text = "\n".join(_line_text(line) for line in lines).strip("\n")
        if text:
            page_texts.append(text)
    markdown = normalize_text("\n\n".join(page_texts))
    if not markdown:
        warnings.append("no extractable text")
    return ConversionResult(markdown=markdown, warnings=warnings)


def run_external_converter(pdf_path: Path, spec: ConverterSpec) -> ConversionResult:
    """Run a third-party converter under the file-based contract.

    The command template is invoked with ``{input}`` = absolute PDF path and
    ``{outdir}`` = a fresh temporary directory; it must create
    ``<outdir>/out.md`` and may create ``<outdir>/assets/*``.
    """
    if spec.kind != EXTERNAL_COMMAND:
        raise ValueError("run_external_converter requires an external_command spec")
    pdf_path = Path(pdf_path).resolve()
    with tempfile.TemporaryDirectory(prefix="raglake-conv-") as outdir:
        command = spec.command_template.replace("{input}", shlex.quote(str(pdf_path))).replace(
            "{outdir}", shlex.quote(outdir)
        )
        try:
            proc = subprocess.run(
                command,
                shell=True,
                capture_output=True,
                timeout=spec.timeout_s,
            )
        except subprocess.TimeoutExpired as exc:
            raise ConverterTimeout(f"converter exceeded {spec.timeout_s}s: {command}") from exc
        stderr = proc.stderr.decode("utf-8", errors="replace").strip()
        if proc.returncode != 0:
            raise ConverterFailed(
                f"converter exited {proc.returncode}", exit_code=proc.returncode, stderr=stderr
            )
        out_md = Path(outdir) / "out.md"
        if not out_md.is_file():
            raise ContractViolation("converter exited 0 but wrote no out.md")
        markdown = normalize_text(out_md.read_text(encoding="utf-8", errors="replace"))
        warnings = [f"converter stderr: {stderr}"] if stderr else []
        assets: list[tuple[str, bytes]] = []
        seen: set[str] = set()
        assets_dir = Path(outdir) / "assets"
        if assets_dir.is_dir():
            for path in sorted(assets_dir.rglob("*")):
                if not path.is_file():
                    continue
                name = path.relative_to(assets_dir).as_posix()
                if ".." in name.split("/") or name in seen:
                    warnings.append(f"skipped unsafe or duplicate asset name {name!r}")
                    continue
                seen.add(name)
                assets.append((name, path.read_bytes()))
        return ConversionResult(markdown=markdown, assets=assets, warnings=warnings)


def convert(pdf_path: Path, spec: ConverterSpec) -> ConversionResult:
    """Dispatch on the configured converter kind."""
    if spec.kind == NATIVE_BASELINE:
        return convert_native(pdf_path)
    return run_external_converter(pdf_path, spec)


def extract_font_spans(pdf_path: Path) -> FontSpanTable:
    """One span per contiguous run of uniform font size/weight, in reading order.

    Reading order is page by page, top-to-bottom, left-to-right; a span may
    cross line breaks (a paragraph set in one size is a single span).
    """
    pages = _read_items(pdf_path)
    spans: list[FontSpan] = []
    for number, items in enumerate(pages, start=1):
        lines = _assemble_lines(items)
        order_index = 0
        run_text: list[str] = []
        run_size = 0.0
        run_bold = False

        def flush():
            nonlocal order_index, run_text
            text = normalize_text("".join(run_text)).strip()
            if text:
                spans.append(FontSpan(number, order_index, text, run_size, run_bold))
                order_index += 1
            run_text = []

        prev_item: pdfio.TextItem | None = None
        for line in lines:
            for item in line:
                size = item.size
                if run_text and (abs(size - run_size) > 0.05 or item.bold != run_bold):
                    flush()
                if not run_text:
                    run_size, run_bold = size, item.bold
                elif prev_item is not None:
                    same_line = abs(prev_item.y - item.y) <= _LINE_TOLERANCE
                    if not same_line:
                        run_text.append(" ")
                    elif not item.joins_previous:
                        gap = item.x - (prev_item.x + _estimated_width(prev_item.text, prev_item.size))
                        if gap > 0.25 * max(prev_item.size, 1.0):
                            run_text.append(" ")
                run_text.append(item.text)
                prev_item = item
        flush()
    return FontSpanTable(spans)
