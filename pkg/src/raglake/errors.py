"""Exception types shared across the package."""

from __future__ import annotations


class RagLakeError(Exception):
    """Base class for all errors raised by this package."""


# --- lakehouse ---------------------------------------------------------------


class EmptyInput(RagLakeError):
    """Zero-byte payload where content is required."""


class StorageFailure(RagLakeError):
    """A store write could not be completed atomically."""


class UnknownDocument(RagLakeError):
    """doc_id is not present in the catalog."""


class NotFound(RagLakeError):
    """Requested artifact does not exist (never ingested or never promoted)."""


# --- convert ------------------------------------------------------------------


class UnreadablePdf(RagLakeError):
    """The input is not a PDF we can parse (corrupt, truncated, or encrypted)."""


class ConverterFailed(RagLakeError):
    """External converter exited nonzero."""

    def __init__(self, message: str, exit_code: int, stderr: str = ""):
        super().__init__(message)
        self.exit_code = exit_code
        self.stderr = stderr


class ContractViolation(RagLakeError):
    """External converter exited 0 but did not produce out.md."""


class ConverterTimeout(RagLakeError):
    """External converter exceeded its configured timeout."""


# --- model clients ------------------------------------------------------------


class ModelUnavailable(RagLakeError):
    """Model endpoint unreachable or failing after one retry."""


class EmptyText(RagLakeError):
    """Empty string passed where embeddable text is required."""


# --- split --------------------------------------------------------------------


class BadParams(RagLakeError):
    """Invalid chunking parameters (e.g. overlap >= chunk_size)."""


# --- index --------------------------------------------------------------------


class DimensionMismatch(RagLakeError):
    """Vector failed validation against the index contract.

    Raised for wrong dimensionality, non-finite components, and zero-norm
    vectors (cosine is undefined for those).
    """


class EmptyIndex(RagLakeError):
    """Query against an index holding no records."""


# --- service ------------------------------------------------------------------


class NoIndex(RagLakeError):
    """Query service has no usable vector index."""


class EmptyQuestion(RagLakeError):
    """Blank question submitted to the query service."""


# --- kgraph -------------------------------------------------------------------


class TripleParse(RagLakeError):
    """Extraction model output could not be parsed as triples."""


class UnknownChunk(RagLakeError):
    """Graph upsert referenced a chunk node that was never added."""


class EmptyGraph(RagLakeError):
    """GraphRAG query against a graph with no chunk nodes."""


# --- orchestrate ---------------------------------------------------------------


class ConfigError(RagLakeError):
    """Base class for configuration problems."""


class ConfigParseError(ConfigError):
    """Configuration file is not valid JSON."""


class ConfigValidationError(ConfigError):
    """Configuration violates an invariant; message names the invariant."""


class NoDocuments(RagLakeError):
    """Pipeline stage invoked with an empty Bronze layer / selection."""
