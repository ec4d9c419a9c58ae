"""LLM-as-judge benchmark: repeated batch evaluation with averaged accuracy
and a fixed-layout comparison report.

Verdicts are binary (no partial credit) and the judge prompt is a versioned
template; accuracy for a configuration is the arithmetic mean over all runs.
Per-run accuracies are preserved so significance testing can happen outside
this package.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .errors import ModelUnavailable
from .prompts import fill_prompt

logger = logging.getLogger(__name__)

VALID_TAGS = frozenset({"table", "merged_cells", "ocr_failure", "hierarchy", "image"})

_VERDICT = re.compile(r"\b(INCORRECT|CORRECT)\b")

REPORT_COLUMNS = ("#", "Data Preparation", "K", "Transformations", "Splitting", "Hier. Meta.", "Accuracy (%)")


@dataclass(frozen=True)
class BenchmarkItem:
    question_id: int
    question: str
    expected_answer: str
    tags: frozenset = frozenset()

    def __post_init__(self):
        if not self.question or not self.expected_answer:
            raise ValueError(f"question {self.question_id}: question and expected_answer must be non-empty")
        unknown = set(self.tags) - VALID_TAGS
        if unknown:
            raise ValueError(f"question {self.question_id}: unknown tags {sorted(unknown)}")


def load_items(path: Path) -> list[BenchmarkItem]:
    """Benchmark file format: a JSON array of item objects."""
    rows = json.loads(Path(path).read_text(encoding="utf-8"))
    items = [
        BenchmarkItem(
            question_id=row["question_id"],
            question=row["question"],
            expected_answer=row["expected_answer"],
            tags=frozenset(row.get("tags", [])),
        )
        for row in rows
    ]
    ids = [item.question_id for item in items]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate question_id in benchmark file")
    return items


@dataclass(frozen=True)
class RunResult:
    config_label: str
    per_run_accuracy: tuple[float, ...]
    verdicts: tuple[tuple[bool, ...], ...]  # runs x questions
    mean_accuracy: float
    judge_model: str

    def to_dict(self) -> dict:
        return {
            "config_label": self.config_label,
            "per_run_accuracy": list(self.per_run_accuracy),
            "verdicts": [list(run) for run in self.verdicts],
            "mean_accuracy": self.mean_accuracy,
            "judge_model": self.judge_model,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "RunResult":
        return cls(
            config_label=row["config_label"],
            per_run_accuracy=tuple(row["per_run_accuracy"]),
            verdicts=tuple(tuple(run) for run in row["verdicts"]),
            mean_accuracy=row["mean_accuracy"],
            judge_model=row.get("judge_model", ""),
        )


def judge_answer(question: str, expected: str, actual: str, judge) -> tuple[bool, str]:
    """One binary verdict; the first CORRECT/INCORRECT token decides.

    Unparseable judge output is retried once, then counted INCORRECT with a
    warning in the rationale.
    """
    prompt = fill_prompt("judge", question=question, expected=expected, actual=actual)
    messages = [{"role": "user", "content": prompt}]
    reply = judge.complete(messages, temperature=0.0)
    match = _VERDICT.search(reply)
    if match is None:
        reply = judge.complete(messages, temperature=0.0)
        match = _VERDICT.search(reply)
    if match is None:
        logger.warning("judge produced no verdict token; counting INCORRECT")
        return False, f"[unparseable judge output counted INCORRECT] {reply}"
    return match.group(1) == "CORRECT", reply


def run_benchmark(
    items: list[BenchmarkItem],
    answerer: Callable[[str], str],
    judge,
    runs: int = 10,
    config_label: str = "",
    transcript_dir: Path | None = None,
) -> RunResult:
    """Answer and judge every item once per run; average over runs.

    Partial runs are discarded, never averaged: any failure aborts the whole
    benchmark call.
    """
    if not items:
        raise ValueError("benchmark needs at least one item")
    if runs < 1:
        raise ValueError("runs must be positive")
    ordered = sorted(items, key=lambda item: item.question_id)
    verdict_matrix: list[tuple[bool, ...]] = []
    per_run: list[float] = []
    if transcript_dir is not None:
        Path(transcript_dir).mkdir(parents=True, exist_ok=True)
    for run in range(runs):
        verdicts: list[bool] = []
        transcript: list[dict] = []
        for item in ordered:
            actual = answerer(item.question)
            verdict, rationale = judge_answer(item.question, item.expected_answer, actual, judge)
            verdicts.append(verdict)
            transcript.append(
                {
                    "question_id": item.question_id,
                    "question": item.question,
                    "expected_answer": item.expected_answer,
                    "actual_answer": actual,
                    "verdict": verdict,
                    "rationale": rationale,
                }
            )
        verdict_matrix.append(tuple(verdicts))
        per_run.append(sum(verdicts) / len(ordered))  # integer count / n, exact
        if transcript_dir is not None:
            path = Path(transcript_dir) / f"run-{run:02d}.jsonl"
            with open(path, "w", encoding="utf-8") as handle:
                for row in transcript:
                    handle.write(json.dumps(row, ensure_ascii=False) + "\n")
    return RunResult(
        config_label=config_label,
        per_run_accuracy=tuple(per_run),
        verdicts=tuple(verdict_matrix),
        mean_accuracy=math.fsum(per_run) / runs,  # order-independent summation
        judge_model=getattr(judge, "model", "unknown"),
    )


def render_report(rows: list[tuple[dict, RunResult]]) -> str:
    """Markdown comparison table, one row per configuration, input order.

    Descriptor keys: data_preparation, k, transformations, splitting,
    hierarchical_metadata. Accuracy prints to one decimal place
    (round-half-even).
    """
    lines = [
        "| " + " | ".join(REPORT_COLUMNS) + " |",
        "| " + " | ".join(["---"] * len(REPORT_COLUMNS)) + " |",
    ]
    for number, (descriptor, result) in enumerate(rows, start=1):
        transformations = descriptor.get("transformations", "")
        if isinstance(transformations, (list, tuple)):
            transformations = ", ".join(transformations)
        cells = (
            str(descriptor.get("number", number)),
            str(descriptor.get("data_preparation", result.config_label or "—")),
            str(descriptor.get("k", "")),
            transformations or "—",
            str(descriptor.get("splitting", "")),
            "Yes" if descriptor.get("hierarchical_metadata") else "No",
            f"{result.mean_accuracy * 100:.1f}",
        )
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)
