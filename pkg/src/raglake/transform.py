"""Configurable Silver-layer cleaning passes.

Pass order is fixed as html_tables -> latex -> hierarchy -> image_desc:
hierarchy rebuilding must see final prose and image captions must not be
table-mangled. Every pass is idempotent and records problems into a caller
supplied warnings sink instead of raising.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import unicodedata
from dataclasses import dataclass, field
from html.parser import HTMLParser
from pathlib import Path

from .convert import FontSpanTable
from .errors import ModelUnavailable

logger = logging.getLogger(__name__)

PASS_NAMES = ("html_tables", "latex", "hr_font", "hr_llm", "image_desc")

HEADING_CANDIDATE_MAX_CHARS = 120
SIZE_MERGE_TOLERANCE = 0.5


@dataclass
class TransformPass:
    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in PASS_NAMES:
            raise ValueError(f"unknown transform pass {self.name!r}")


def validate_transforms(passes: list[TransformPass]) -> None:
    names = [p.name for p in passes]
    if len(set(names)) != len(names):
        raise ValueError("duplicate transform passes in pipeline")
    if "hr_font" in names and "hr_llm" in names:
        raise ValueError("hr_font and hr_llm are mutually exclusive within one pipeline")


def ordered_passes(passes: list[TransformPass]) -> list[TransformPass]:
    return sorted(passes, key=lambda p: PASS_NAMES.index(p.name))


# ---------------------------------------------------------------------------
# HTML tables -> pipe tables
# ---------------------------------------------------------------------------


class _TableParser(HTMLParser):
    """Parses one <table> block; nested tables flatten into the host cell."""

    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.rows: list[list[dict]] = []
        self.depth = 0
        self.saw_nested = False
        self._row: list[dict] | None = None
        self._cell: dict | None = None

    def handle_starttag(self, tag, attrs):
        tag = tag.lower()
        if tag == "table":
            self.depth += 1
            if self.depth > 1:
                self.saw_nested = True
            return
        if self.depth != 1:
            if tag in ("tr", "td", "th", "br") and self._cell is not None:
                self._cell["text"] += " "
            return
        if tag == "tr":
            self._row = []
        elif tag in ("td", "th"):
            if self._row is None:
                self._row = []
            attrs_map = dict(attrs)
            self._cell = {
                "text": "",
                "header": tag == "th",
                "rowspan": _span_attr(attrs_map.get("rowspan")),
                "colspan": _span_attr(attrs_map.get("colspan")),
            }
        elif tag == "br" and self._cell is not None:
            self._cell["text"] += " "

    def handle_endtag(self, tag):
        tag = tag.lower()
        if tag == "table":
            self.depth -= 1
            return
        if self.depth != 1:
            return
        if tag in ("td", "th") and self._cell is not None and self._row is not None:
            self._row.append(self._cell)
            self._cell = None
        elif tag == "tr" and self._row is not None:
            self.rows.append(self._row)
            self._row = None

    def handle_data(self, data):
        if self._cell is not None:
            self._cell["text"] += data

    def close(self):
        super().close()
        if self._cell is not None and self._row is not None:
            self._row.append(self._cell)
            self._cell = None
        if self._row:
            self.rows.append(self._row)
            self._row = None


def _span_attr(value) -> int:
    try:
        return max(1, int(str(value)))
    except (TypeError, ValueError):
        return 1


def _cell_text(raw: str) -> str:
    return " ".join(raw.split()).replace("|", "\\|")


def _expand_grid(rows: list[list[dict]]) -> list[list[str]]:
    grid: list[list[str]] = []
    carry: dict[tuple[int, int], str] = {}
    for r, row in enumerate(rows):
        values: list[str] = []
        col = 0
        while (r, col) in carry:
            values.append(carry.pop((r, col)))
            col += 1
        for cell in row:
            text = _cell_text(cell["text"])
            colspan, rowspan = cell["colspan"], cell["rowspan"]
            for c_off in range(colspan):
                values.append(text)
                if rowspan > 1:
                    for r_off in range(1, rowspan):
                        carry[(r + r_off, col + c_off)] = text
            col += colspan
            while (r, col) in carry:
                values.append(carry.pop((r, col)))
                col += 1
        grid.append(values)
    # leftover rowspans that point past the last parsed row are dropped
    width = max((len(row) for row in grid), default=0)
    for row in grid:
        row.extend([""] * (width - len(row)))
    return grid


def _render_pipe_table(rows: list[list[dict]]) -> str:
    grid = _expand_grid(rows)
    if not grid or not any(any(v for v in row) for row in grid):
        raise ValueError("empty table")
    header_idx = next((i for i, row in enumerate(rows) if any(c["header"] for c in row)), 0)
    width = len(grid[0])
    lines = ["| " + " | ".join(grid[header_idx]) + " |"]
    lines.append("| " + " | ".join(["---"] * width) + " |")
    for i, row in enumerate(grid):
        if i != header_idx:
            lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines)


def _table_blocks(markdown: str) -> list[tuple[int, int]]:
    """(start, end) extents of top-level <table>..</table> blocks."""
    lower = markdown.lower()
    events = [(m.start(), 1, m.start()) for m in re.finditer(r"<table\b", lower)]
    events += [(m.start(), -1, m.end()) for m in re.finditer(r"</table\s*>", lower)]
    events.sort()
    blocks = []
    depth = 0
    start = -1
    for pos, kind, end in events:
        if kind == 1:
            if depth == 0:
                start = pos
            depth += 1
        elif depth > 0:
            depth -= 1
            if depth == 0:
                blocks.append((start, end))
    if depth > 0:
        blocks.append((start, -1))  # unterminated
    return blocks


def clean_html_tables(markdown: str, warnings: list[str] | None = None) -> str:
    """Replace each well-formed <table> block with a pipe-delimited table.

    The first row (or the <th> row) becomes the header; rowspan/colspan are
    expanded by duplicating cell content into each spanned position. All
    other text is untouched; malformed tables stay in place with a warning.
    """
    sink = warnings if warnings is not None else []
    blocks = _table_blocks(markdown)
    if not blocks:
        return markdown
    out = []
    pos = 0
    for start, end in blocks:
        out.append(markdown[pos:start])
        if end < 0:
            sink.append("unterminated <table> left in place")
            out.append(markdown[start:])
            pos = len(markdown)
            break
        block = markdown[start:end]
        parser = _TableParser()
        try:
            parser.feed(block)
            parser.close()
            rendered = _render_pipe_table(parser.rows)
        except Exception:
            sink.append("malformed HTML table left in place")
            out.append(block)
            pos = end
            continue
        if parser.saw_nested:
            sink.append("nested table flattened into host cell")
        out.append(rendered)
        pos = end
    out.append(markdown[pos:])
    return "".join(out)


# ---------------------------------------------------------------------------
# LaTeX -> plain text
# ---------------------------------------------------------------------------

_GREEK = {
    "alpha": "α", "beta": "β", "gamma": "γ", "delta": "δ", "epsilon": "ε",
    "varepsilon": "ε", "zeta": "ζ", "eta": "η", "theta": "θ", "vartheta": "θ",
    "iota": "ι", "kappa": "κ", "lambda": "λ", "mu": "μ", "nu": "ν", "xi": "ξ",
    "omicron": "ο", "pi": "π", "rho": "ρ", "sigma": "σ", "varsigma": "ς",
    "tau": "τ", "upsilon": "υ", "phi": "φ", "varphi": "φ", "chi": "χ",
    "psi": "ψ", "omega": "ω",
    "Gamma": "Γ", "Delta": "Δ", "Theta": "Θ", "Lambda": "Λ", "Xi": "Ξ",
    "Pi": "Π", "Sigma": "Σ", "Upsilon": "Υ", "Phi": "Φ", "Psi": "Ψ",
    "Omega": "Ω",
}

_COMMAND_MAP = {
    "times": "×", "leq": "≤", "geq": "≥", "le": "≤", "ge": "≥", "neq": "≠",
    "ne": "≠", "cdot": "·", "pm": "±", "mp": "∓", "div": "÷", "infty": "∞",
    "approx": "≈", "rightarrow": "→", "to": "→", "leftarrow": "←",
    "sum": "∑", "prod": "∏", "int": "∫", "sqrt": "√", "partial": "∂",
    **_GREEK,
}

_FRAC = re.compile(r"\\frac\s*\{([^{}]*)\}\s*\{([^{}]*)\}")
_COMMAND = re.compile(r"\\([A-Za-z]+)")


def _convert_math(body: str) -> str:
    while True:
        replaced = _FRAC.sub(r"\1/\2", body)
        if replaced == body:
            break
        body = replaced

    def sub_command(m: re.Match) -> str:
        name = m.group(1)
        return _COMMAND_MAP.get(name, name)  # unknown commands lose the backslash

    body = _COMMAND.sub(sub_command, body)
    body = body.replace("{", "").replace("}", "")
    return body.strip()


def clean_latex(markdown: str, warnings: list[str] | None = None) -> str:
    """Strip math delimiters and map a fixed command set to plain text.

    Unbalanced delimiters are left untouched with a warning recorded.
    """
    sink = warnings if warnings is not None else []
    out: list[str] = []
    i = 0
    n = len(markdown)
    while i < n:
        nxt_dollar = markdown.find("$", i)
        nxt_slash = markdown.find("\\", i)
        candidates = [p for p in (nxt_dollar, nxt_slash) if p >= 0]
        if not candidates:
            out.append(markdown[i:])
            break
        pos = min(candidates)
        out.append(markdown[i:pos])
        i = pos
        ch = markdown[i]
        if ch == "\\":
            follower = markdown[i + 1] if i + 1 < n else ""
            if follower in "([":
                closer = "\\)" if follower == "(" else "\\]"
                end = markdown.find(closer, i + 2)
                if end < 0:
                    sink.append(f"unbalanced {markdown[i:i+2]} left untouched")
                    out.append(markdown[i:])
                    break
                out.append(_convert_math(markdown[i + 2 : end]))
                i = end + 2
            else:
                out.append(markdown[i : i + 2])
                i += 2
        else:  # '$'
            if markdown.startswith("$$", i):
                end = markdown.find("$$", i + 2)
                if end < 0:
                    sink.append("unbalanced $$ left untouched")
                    out.append(markdown[i:])
                    break
                out.append(_convert_math(markdown[i + 2 : end]))
                i = end + 2
            else:
                end = i + 1
                while True:
                    end = markdown.find("$", end)
                    if end < 0 or markdown[end - 1] != "\\":
                        break
                    end += 1
                if end < 0:
                    sink.append("unbalanced $ left untouched")
                    out.append(markdown[i:])
                    break
                out.append(_convert_math(markdown[i + 1 : end]))
                i = end + 1
    return "".join(out)


# ---------------------------------------------------------------------------
# Hierarchy rebuilding
# ---------------------------------------------------------------------------

_ATX_PREFIX = re.compile(r"^#{1,6}[ \t]+")
_FENCE = re.compile(r"^(```|~~~)")


def _match_key(text: str) -> str:
    """NFC + case-fold + whitespace-collapse; deterministic heading matching."""
    return " ".join(unicodedata.normalize("NFC", text).casefold().split())


def _strip_atx(line: str) -> str:
    return _ATX_PREFIX.sub("", line.strip())


def _repair_levels(assignments: dict[int, int]) -> dict[int, int]:
    """A heading may never sit more than one level below its predecessor."""
    repaired: dict[int, int] = {}
    prev: int | None = None
    for idx in sorted(assignments):
        level = assignments[idx]
        if prev is not None and level > prev + 1:
            level = prev + 1
        repaired[idx] = level
        prev = level
    return repaired


def _apply_heading_assignments(markdown: str, assignments: dict[int, int]) -> str:
    if not assignments:
        return markdown
    repaired = _repair_levels(assignments)
    lines = markdown.split("\n")
    for idx, level in repaired.items():
        if 0 <= idx < len(lines):
            content = _strip_atx(lines[idx])
            lines[idx] = "#" * level + " " + content
    return "\n".join(lines)


def rebuild_hierarchy_font(
    markdown: str, spans: FontSpanTable, warnings: list[str] | None = None
) -> str:
    """HR-F: assign heading levels from font-size ranks in the source PDF.

    Body size is the character-count-weighted mode of span sizes. Candidate
    spans are larger than body + 0.5 pt, or bold and short; distinct candidate
    sizes (merged within 0.5 pt) map, descending, to levels 1..6.
    """
    sink = warnings if warnings is not None else []
    if not spans.spans:
        sink.append("no font spans available; markdown unchanged")
        return markdown

    weight: dict[float, int] = {}
    for span in spans.spans:
        size = round(span.font_size, 1)
        weight[size] = weight.get(size, 0) + len(span.text)
    body_size = max(weight, key=lambda s: (weight[s], -s))

    candidates = [
        span
        for span in spans.spans
        if round(span.font_size, 1) > body_size + SIZE_MERGE_TOLERANCE
        or (span.bold and len(span.text) <= HEADING_CANDIDATE_MAX_CHARS)
    ]
    if not candidates:
        return markdown

    level_of_size: dict[float, int] = {}
    anchor: float | None = None
    level = 0
    for size in sorted({round(c.font_size, 1) for c in candidates}, reverse=True):
        if anchor is None or anchor - size > SIZE_MERGE_TOLERANCE:
            level += 1
            anchor = size
        level_of_size[size] = min(level, 6)

    lookup: dict[str, int] = {}
    for span in candidates:
        key = _match_key(span.text)
        if key and key not in lookup:
            lookup[key] = level_of_size[round(span.font_size, 1)]

    assignments: dict[int, int] = {}
    for idx, line in enumerate(markdown.split("\n")):
        key = _match_key(_strip_atx(line))
        if key and key in lookup:
            assignments[idx] = lookup[key]
    return _apply_heading_assignments(markdown, assignments)


def _candidate_lines(markdown: str) -> list[tuple[int, str]]:
    out = []
    in_fence = False
    for idx, line in enumerate(markdown.split("\n")):
        if _FENCE.match(line):
            in_fence = not in_fence
            continue
        if in_fence:
            continue
        text = _strip_atx(line)
        if text and len(text) <= HEADING_CANDIDATE_MAX_CHARS:
            out.append((idx, text))
    return out


def rebuild_hierarchy_llm(markdown: str, model, warnings: list[str] | None = None) -> str:
    """HR-LLM: ask a chat model which candidate lines are headings.

    The model must return a JSON array of {"line_index", "level"} objects;
    anything else leaves the document unchanged with a warning.
    """
    sink = warnings if warnings is not None else []
    candidates = _candidate_lines(markdown)
    if not candidates:
        return markdown
    from .prompts import fill_prompt

    listing = "\n".join(f"{idx}: {text}" for idx, text in candidates)
    prompt = fill_prompt("hierarchy", lines=listing)
    reply = model.complete(
        [{"role": "user", "content": prompt}],
        temperature=0.0,
    )
    start, end = reply.find("["), reply.rfind("]")
    if start < 0 or end <= start:
        sink.append("hierarchy model returned no JSON array; markdown unchanged")
        return markdown
    try:
        parsed = json.loads(reply[start : end + 1])
    except json.JSONDecodeError:
        sink.append("hierarchy model returned invalid JSON; markdown unchanged")
        return markdown
    candidate_indices = {idx for idx, _ in candidates}
    assignments: dict[int, int] = {}
    for entry in parsed if isinstance(parsed, list) else []:
        if not isinstance(entry, dict):
            sink.append(f"dropped malformed hierarchy entry {entry!r}")
            continue
        idx, level = entry.get("line_index"), entry.get("level")
        if isinstance(idx, int) and isinstance(level, int) and idx in candidate_indices and 1 <= level <= 6:
            assignments[idx] = level
        else:
            sink.append(f"dropped invalid hierarchy entry {entry!r}")
    return _apply_heading_assignments(markdown, assignments)


# ---------------------------------------------------------------------------
# VLM image descriptions
# ---------------------------------------------------------------------------

_IMAGE_REF = re.compile(r"!\[[^\]]*\]\(\s*<?([^)>\s]+)>?(?:\s+\"[^\"]*\")?\s*\)")
_CAPTION_LINE = re.compile(r"^\*Image description: .*\*$")

CAPTION_TEMPLATE = "*Image description: {text}*"


class CaptionCache:
    """Single-writer keyed store mapping image SHA-256 -> caption text."""

    def __init__(self, path: Path | None = None):
        self.path = Path(path) if path is not None else None
        self._data: dict[str, str] = {}
        if self.path is not None and self.path.is_file():
            self._data = json.loads(self.path.read_text(encoding="utf-8"))

    def get(self, digest: str) -> str | None:
        return self._data.get(digest)

    def put(self, digest: str, caption: str) -> None:
        self._data[digest] = caption

    def save(self) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self._data, ensure_ascii=False, indent=2, sort_keys=True), encoding="utf-8")
        tmp.replace(self.path)


def describe_images(
    markdown: str,
    assets: list[tuple[str, bytes]],
    vlm,
    cache: CaptionCache,
    warnings: list[str] | None = None,
) -> str:
    """Insert a caption paragraph after every image reference.

    Images are content-hashed; byte-identical images produce exactly one
    model call, with the cache consulted first.
    """
    sink = warnings if warnings is not None else []
    by_name = {name: payload for name, payload in assets}
    by_basename: dict[str, bytes] = {}
    for name, payload in assets:
        by_basename.setdefault(name.rsplit("/", 1)[-1], payload)

    def resolve(target: str) -> bytes | None:
        clean = target.split("#")[0]
        if clean in by_name:
            return by_name[clean]
        return by_basename.get(clean.rsplit("/", 1)[-1])

    lines = markdown.split("\n")
    captions: dict[str, str] = {}
    out: list[str] = []
    for i, line in enumerate(lines):
        out.append(line)
        targets = _IMAGE_REF.findall(line)
        if not targets:
            continue
        existing: set[str] = set()
        j = i + 1
        while j < len(lines) and (not lines[j].strip() or _CAPTION_LINE.match(lines[j].strip())):
            if lines[j].strip():
                existing.add(lines[j].strip())
            j += 1
        for target in targets:
            payload = resolve(target)
            if payload is None:
                sink.append(f"image reference {target!r} has no matching asset")
                continue
            digest = hashlib.sha256(payload).hexdigest()
            caption = captions.get(digest) or cache.get(digest)
            if caption is None:
                try:
                    caption = vlm.caption(payload, name=target)
                except ModelUnavailable as exc:
                    sink.append(f"caption skipped for {target!r}: {exc}")
                    continue
                cache.put(digest, caption)
            captions[digest] = caption
            caption_line = CAPTION_TEMPLATE.format(text=caption)
            if caption_line not in existing:
                out.extend(["", caption_line])
                existing.add(caption_line)
    cache.save()
    return "\n".join(out)


def apply_passes(
    markdown: str,
    passes: list[TransformPass],
    *,
    spans: FontSpanTable | None = None,
    assets: list[tuple[str, bytes]] | None = None,
    hierarchy_model=None,
    vlm=None,
    caption_cache: CaptionCache | None = None,
    warnings: list[str] | None = None,
) -> str:
    """Run the configured passes in canonical order over one document."""
    validate_transforms(passes)
    sink = warnings if warnings is not None else []
    text = markdown
    for item in ordered_passes(passes):
        if item.name == "html_tables":
            text = clean_html_tables(text, sink)
        elif item.name == "latex":
            text = clean_latex(text, sink)
        elif item.name == "hr_font":
            text = rebuild_hierarchy_font(text, spans or FontSpanTable(), sink)
        elif item.name == "hr_llm":
            if hierarchy_model is None:
                raise ModelUnavailable("hr_llm pass configured but no hierarchy model supplied")
            text = rebuild_hierarchy_llm(text, hierarchy_model, sink)
        elif item.name == "image_desc":
            if vlm is None:
                raise ModelUnavailable("image_desc pass configured but no VLM supplied")
            text = describe_images(text, assets or [], vlm, caption_cache or CaptionCache(), sink)
    return text
