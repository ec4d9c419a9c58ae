"""Model-endpoint clients: OpenAI-compatible HTTP chat/embeddings, a
deterministic offline embedder, and deterministic offline chat stand-ins.

A client retries a failed transport exactly once before raising
:class:`ModelUnavailable`; everything above this layer treats clients as
reliable or failed, never flaky.
"""

from __future__ import annotations

import hashlib
import os
import re
import unicodedata
from dataclasses import dataclass
from typing import Protocol

import httpx
import numpy as np

from .errors import ModelUnavailable

DEFAULT_TIMEOUT_S = 60.0
DEFAULT_EMBED_BATCH = 128
DETERMINISTIC_DIMENSION = 32


class ChatClient(Protocol):
    model: str

    def complete(self, messages: list[dict], *, temperature: float = 0.0) -> str: ...


class EmbeddingClient(Protocol):
    model: str

    def embed(self, texts: list[str]) -> list[list[float]]: ...


class CaptionClient(Protocol):
    def caption(self, image_bytes: bytes, name: str = "") -> str: ...


@dataclass(frozen=True)
class EndpointConfig:
    """One model endpoint; empty endpoint selects the offline deterministic stand-in."""

    endpoint: str = ""
    model: str = ""
    api_key_env: str = ""
    dimension: int | None = None

    def to_dict(self) -> dict:
        out: dict = {"endpoint": self.endpoint, "model": self.model, "api_key_env": self.api_key_env}
        if self.dimension is not None:
            out["dimension"] = self.dimension
        return out

    @classmethod
    def from_dict(cls, row: dict) -> "EndpointConfig":
        return cls(
            endpoint=row.get("endpoint", ""),
            model=row.get("model", ""),
            api_key_env=row.get("api_key_env", ""),
            dimension=row.get("dimension"),
        )


def _headers(config: EndpointConfig) -> dict:
    headers = {"Content-Type": "application/json"}
    if config.api_key_env:
        key = os.environ.get(config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
    return headers


def _route(endpoint: str, suffix: str) -> str:
    if endpoint.rstrip("/").endswith(suffix.strip("/")):
        return endpoint
    return endpoint.rstrip("/") + suffix


def _post_with_retry(url: str, payload: dict, headers: dict, timeout: float) -> dict:
    last: Exception | None = None
    for _ in range(2):  # one retry
        try:
            response = httpx.post(url, json=payload, headers=headers, timeout=timeout)
            response.raise_for_status()
            return response.json()
        except (httpx.HTTPError, ValueError) as exc:
            last = exc
    raise ModelUnavailable(f"{url}: {last}") from last


class HttpChatClient:
    """POSTs the widely used chat-completions JSON shape."""

    def __init__(self, config: EndpointConfig, timeout_s: float = DEFAULT_TIMEOUT_S):
        self.config = config
        self.model = config.model
        self.timeout_s = timeout_s

    def complete(self, messages: list[dict], *, temperature: float = 0.0) -> str:
        payload = {"model": self.config.model, "messages": messages, "temperature": temperature}
        url = _route(self.config.endpoint, "/chat/completions")
        data = _post_with_retry(url, payload, _headers(self.config), self.timeout_s)
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ModelUnavailable(f"{url}: malformed completion payload") from exc


class HttpEmbeddingClient:
    """POSTs the widely used embeddings JSON shape ({model, input[]})."""

    def __init__(self, config: EndpointConfig, timeout_s: float = DEFAULT_TIMEOUT_S):
        self.config = config
        self.model = config.model
        self.timeout_s = timeout_s
        self.dimension: int | None = config.dimension

    def embed(self, texts: list[str]) -> list[list[float]]:
        if not texts:
            return []
        payload = {"model": self.config.model, "input": list(texts)}
        url = _route(self.config.endpoint, "/embeddings")
        data = _post_with_retry(url, payload, _headers(self.config), self.timeout_s)
        try:
            rows = sorted(data["data"], key=lambda row: row.get("index", 0))
            vectors = [row["embedding"] for row in rows]
        except (KeyError, TypeError) as exc:
            raise ModelUnavailable(f"{url}: malformed embeddings payload") from exc
        if len(vectors) != len(texts):
            raise ModelUnavailable(f"{url}: expected {len(texts)} embeddings, got {len(vectors)}")
        # The dimension is probed once from the endpoint and pinned afterwards.
        if self.dimension is None:
            self.dimension = len(vectors[0])
        for vector in vectors:
            if len(vector) != self.dimension:
                raise ModelUnavailable(f"{url}: embedding dimension drifted from {self.dimension}")
        return vectors


class DeterministicEmbedder:
    """Offline embedder: per-text seed = SHA-256(text), driving a fixed
    pseudo-random unit vector. Identical text always embeds identically,
    which makes every end-to-end test reproducible."""

    def __init__(self, dimension: int = DETERMINISTIC_DIMENSION):
        if dimension < 2:
            raise ValueError("dimension must be >= 2")
        self.dimension = dimension
        self.model = f"deterministic-{dimension}"

    def embed(self, texts: list[str]) -> list[list[float]]:
        out = []
        for text in texts:
            digest = hashlib.sha256(unicodedata.normalize("NFC", text).encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
            vector = rng.standard_normal(self.dimension)
            vector /= np.linalg.norm(vector)
            out.append(vector.tolist())
        return out


class StubChatClient:
    """Offline deterministic chat stand-in, selected when no endpoint is
    configured. ``answer`` mode echoes the body of the first context block;
    ``judge`` mode verdicts by normalized containment of the reference."""

    def __init__(self, mode: str = "answer"):
        if mode not in ("answer", "judge"):
            raise ValueError(f"unknown stub mode {mode!r}")
        self.mode = mode
        self.model = f"stub-{mode}"

    def complete(self, messages: list[dict], *, temperature: float = 0.0) -> str:
        text = "\n".join(m.get("content", "") for m in messages)
        if self.mode == "judge":
            return self._judge(text)
        return self._answer(text)

    @staticmethod
    def _normalize(value: str) -> str:
        return " ".join(unicodedata.normalize("NFC", value).casefold().split())

    def _judge(self, text: str) -> str:
        expected = re.search(r"Reference answer:\n(.*?)\n\nAnswer under evaluation:", text, re.DOTALL)
        actual = re.search(r"Answer under evaluation:\n(.*?)\n\nCriteria:", text, re.DOTALL)
        if expected and actual and self._normalize(expected.group(1)) in self._normalize(actual.group(1)):
            return "Reference content present. CORRECT"
        return "Reference content missing. INCORRECT"

    def _answer(self, text: str) -> str:
        block = re.search(r"^\[1\][^\n]*\n(.*?)(?=\n\n\[2\]|\n\nQuestion:)", text, re.DOTALL | re.MULTILINE)
        if block:
            return block.group(1).strip()
        return "I do not know."


class HttpCaptionClient:
    """Captions images through a multimodal chat-completions endpoint."""

    def __init__(self, config: EndpointConfig, timeout_s: float = DEFAULT_TIMEOUT_S):
        self.config = config
        self.model = config.model
        self.timeout_s = timeout_s

    def caption(self, image_bytes: bytes, name: str = "") -> str:
        import base64

        encoded = base64.b64encode(image_bytes).decode("ascii")
        payload = {
            "model": self.config.model,
            "temperature": 0.0,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": "Describe this image in one factual sentence."},
                        {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{encoded}"}},
                    ],
                }
            ],
        }
        url = _route(self.config.endpoint, "/chat/completions")
        data = _post_with_retry(url, payload, _headers(self.config), self.timeout_s)
        try:
            return data["choices"][0]["message"]["content"].strip()
        except (KeyError, IndexError, TypeError, AttributeError) as exc:
            raise ModelUnavailable(f"{url}: malformed caption payload") from exc


class StubCaptionClient:
    """Offline caption stand-in: a deterministic digest-based description."""

    model = "stub-caption"

    def caption(self, image_bytes: bytes, name: str = "") -> str:
        digest = hashlib.sha256(image_bytes).hexdigest()[:12]
        label = name.rsplit("/", 1)[-1] or "image"
        return f"embedded image {label} (content {digest})"


def build_embedder(config: EndpointConfig):
    if config.endpoint:
        return HttpEmbeddingClient(config)
    return DeterministicEmbedder(config.dimension or DETERMINISTIC_DIMENSION)


def build_chat(config: EndpointConfig, stub_mode: str = "answer"):
    if config.endpoint:
        return HttpChatClient(config)
    return StubChatClient(stub_mode)


def build_captioner(config: EndpointConfig):
    if config.endpoint:
        return HttpCaptionClient(config)
    return StubCaptionClient()
