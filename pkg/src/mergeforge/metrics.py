"""Evaluation aggregates over externally produced score tables.

Scores are whatever the evaluator emits (accuracies, pass rates, ...); the
engine never interprets task semantics. Normalized performance is the mean
over tasks of merged/finetuned, reported as a percentage; the forgetting
score is the same ratio against the base model on held-out generalization
tasks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import ValidationError


class ZeroFinetunedScoreError(ValidationError):
    def __init__(self, task: str):
        super().__init__(f"finetuned score for task {task!r} must be positive")
        self.task = task


@dataclass
class ScoreTable:
    tasks: list[str]
    merged: dict[str, float]
    finetuned: dict[str, float]
    base: dict[str, float] = field(default_factory=dict)
    generalization_tasks: list[str] = field(default_factory=list)
    generalization_merged: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.tasks:
            raise ValidationError("score table has no tasks")
        if len(set(self.tasks)) != len(self.tasks):
            raise ValidationError("duplicate task names in score table")
        for task in self.tasks:
            if task not in self.merged:
                raise ValidationError(f"missing merged score for task {task!r}")
            if task not in self.finetuned:
                raise ValidationError(f"missing finetuned score for task {task!r}")
            if not float(self.finetuned[task]) > 0:
                raise ZeroFinetunedScoreError(task)
        for task in self.generalization_tasks:
            if task not in self.generalization_merged:
                raise ValidationError(f"missing merged score for generalization task {task!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "ScoreTable":
        if not isinstance(doc, dict):
            raise ValidationError("score table must be a JSON object")
        known = {"tasks", "merged", "finetuned", "base", "generalization"}
        extra = set(doc) - known
        if extra:
            raise ValidationError(f"unknown score table fields: {sorted(extra)}")
        gen = doc.get("generalization") or {}
        if gen and (not isinstance(gen, dict) or set(gen) - {"tasks", "merged"}):
            raise ValidationError("generalization block must be {'tasks': [...], 'merged': {...}}")
        try:
            return cls(
                tasks=[str(t) for t in doc["tasks"]],
                merged={str(k): float(v) for k, v in doc["merged"].items()},
                finetuned={str(k): float(v) for k, v in doc["finetuned"].items()},
                base={str(k): float(v) for k, v in (doc.get("base") or {}).items()},
                generalization_tasks=[str(t) for t in gen.get("tasks", [])],
                generalization_merged={str(k): float(v) for k, v in gen.get("merged", {}).items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed score table: {exc}") from exc

    @classmethod
    def from_json_file(cls, path: str | Path) -> "ScoreTable":
        try:
            doc = json.loads(Path(path).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read score table {path}: {exc}") from exc
        return cls.from_dict(doc)

    def average_merged(self) -> float:
        """Plain mean of the merged model's per-task scores."""
        return sum(float(self.merged[t]) for t in self.tasks) / len(self.tasks)


def normalized_performance(table: ScoreTable) -> float:
    """Mean over tasks of merged/finetuned, as a percentage (100 = merging
    lost nothing relative to the specialized models)."""
    ratios = [float(table.merged[t]) / float(table.finetuned[t]) for t in table.tasks]
    return 100.0 * sum(ratios) / len(ratios)


def forgetting_score(table: ScoreTable) -> float:
    """Mean over generalization tasks of merged/base, as a percentage
    (100 = pretrained capability fully retained)."""
    if not table.generalization_tasks:
        raise ValidationError("no generalization tasks in score table")
    ratios = []
    for task in table.generalization_tasks:
        if task not in table.base:
            raise ValidationError(f"missing base score for generalization task {task!r}")
        if not float(table.base[task]) > 0:
            raise ValidationError(f"base score for generalization task {task!r} must be positive")
        ratios.append(float(table.generalization_merged[task]) / float(table.base[task]))
    return 100.0 * sum(ratios) / len(ratios)


@dataclass(frozen=True)
class TimingRecord:
    method: str
    phase: str  # "algorithm" | "validation"
    label: str
    seconds: float

    def __post_init__(self):
        if self.phase not in ("algorithm", "validation"):
            raise ValidationError(f"unknown timing phase {self.phase!r}")


@dataclass
class RuntimeReport:
    rows: list[dict]

    def format_table(self) -> str:
        lines = [f"{'method':<16} {'algorithm (s)':>14} {'validation (s)':>15} {'val entries':>12}"]
        for row in self.rows:
            lines.append(
                f"{row['method']:<16} {row['algorithm_seconds']:>14.3f} "
                f"{row['validation_seconds']:>15.3f} {row['validation_entries']:>12d}"
            )
        return "\n".join(lines)


def runtime_report(timings: Sequence[TimingRecord]) -> RuntimeReport:
    """Wall-clock split into algorithm time (running merges) and validation
    time (evaluating hyperparameter candidates), per method."""
    by_method: dict[str, dict] = {}
    for record in timings:
        row = by_method.setdefault(
            record.method,
            {"method": record.method, "algorithm_seconds": 0.0, "validation_seconds": 0.0,
             "validation_entries": 0},
        )
        if record.phase == "algorithm":
            row["algorithm_seconds"] += record.seconds
        else:
            row["validation_seconds"] += record.seconds
            row["validation_entries"] += 1
    return RuntimeReport(rows=[by_method[m] for m in sorted(by_method)])
