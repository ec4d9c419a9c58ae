"""Shared fixtures: generated PDF documents and scripted model clients."""

from __future__ import annotations

import hashlib
from pathlib import Path

import pytest
from reportlab.pdfgen import canvas

from raglake.clients import DeterministicEmbedder
from raglake.errors import ModelUnavailable

PAGE_WIDTH, PAGE_HEIGHT = 595, 842
TOP_Y = 780
LINE_STEP = 24
LEFT_X = 72


def make_pdf(path: Path, pages: list[list[tuple[str, float, bool]]]) -> Path:
    """Write a PDF whose pages hold the given (text, size, bold) lines."""
    page_canvas = canvas.Canvas(str(path), pagesize=(PAGE_WIDTH, PAGE_HEIGHT))
    for lines in pages:
        y = TOP_Y
        for text, size, bold in lines:
            page_canvas.setFont("Helvetica-Bold" if bold else "Helvetica", size)
            page_canvas.drawString(LEFT_X, y, text)
            y -= max(LINE_STEP, size * 1.4)
        page_canvas.showPage()
    page_canvas.save()
    return path


@pytest.fixture
def pdf_factory(tmp_path):
    counter = {"n": 0}

    def factory(pages: list[list[tuple[str, float, bool]]], name: str | None = None) -> Path:
        counter["n"] += 1
        return make_pdf(tmp_path / (name or f"doc{counter['n']}.pdf"), pages)

    return factory


class ScriptedChat:
    """Chat client replaying canned replies (or a reply function)."""

    model = "scripted"

    def __init__(self, replies=None, reply_fn=None):
        self.replies = list(replies or [])
        self.reply_fn = reply_fn
        self.calls: list[list[dict]] = []

    def complete(self, messages, *, temperature: float = 0.0) -> str:
        self.calls.append(messages)
        if self.reply_fn is not None:
            return self.reply_fn(messages)
        if not self.replies:
            raise AssertionError("ScriptedChat ran out of replies")
        if len(self.replies) == 1:
            return self.replies[0]
        return self.replies.pop(0)


class FailingChat:
    model = "failing"

    def complete(self, messages, *, temperature: float = 0.0) -> str:
        raise ModelUnavailable("scripted transport failure")


class CountingEmbedder:
    """Deterministic embedder that counts embed() calls and texts."""

    def __init__(self, dimension: int = 16):
        self.inner = DeterministicEmbedder(dimension)
        self.dimension = dimension
        self.model = self.inner.model
        self.calls = 0
        self.texts: list[str] = []

    def embed(self, texts):
        self.calls += 1
        self.texts.extend(texts)
        return self.inner.embed(texts)


class ControlledEmbedder:
    """Maps chosen texts to chosen vectors; everything else is deterministic."""

    model = "controlled"

    def __init__(self, table: dict[str, list[float]], dimension: int):
        self.table = table
        self.dimension = dimension
        self.fallback = DeterministicEmbedder(dimension)

    def embed(self, texts):
        out = []
        for text in texts:
            if text in self.table:
                out.append(list(self.table[text]))
            else:
                out.append(self.fallback.embed([text])[0])
        return out


class CountingVlm:
    model = "counting-vlm"

    def __init__(self):
        self.calls = 0

    def caption(self, image_bytes: bytes, name: str = "") -> str:
        self.calls += 1
        return f"picture {hashlib.sha256(image_bytes).hexdigest()[:8]}"


class FailingVlm:
    model = "failing-vlm"

    def caption(self, image_bytes: bytes, name: str = "") -> str:
        raise ModelUnavailable("vlm offline")
