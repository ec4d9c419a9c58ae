"""Versioned prompt templates, overridable per deployment.

Each template ships as a plain text file next to this module so operators can
pin, diff, and replace the exact wording without touching code.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

_OVERRIDES: dict[str, Path] = {}


def set_override(name: str, path: Path | None) -> None:
    """Point a named template at a file on disk (None removes the override)."""
    if path is None:
        _OVERRIDES.pop(name, None)
    else:
        _OVERRIDES[name] = Path(path)


def load_prompt(name: str) -> str:
    override = _OVERRIDES.get(name)
    if override is not None:
        return override.read_text(encoding="utf-8")
    return resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")


def fill_prompt(name: str, **values: str) -> str:
    """Substitute {placeholder} slots literally; templates may contain braces."""
    text = load_prompt(name)
    for key, value in values.items():
        text = text.replace("{" + key + "}", value)
    return text
