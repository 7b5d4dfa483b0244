"""Metric tables, latency reports, and their file formats.

Metrics are written as both CSV (2-decimal percentages, plot-ready) and
JSON (full-precision, sorted keys); identical inputs produce byte-identical
files. Latency reports carry measured wall times and are kept in separate
files so determinism checks can ignore them.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .simulator import ActivityClass

__all__ = [
    "LatencyReport",
    "MetricsTable",
    "events_to_jsonl",
    "read_metrics_json",
    "write_latency_json",
    "write_metrics_csv",
    "write_metrics_json",
]

CLASS_NAMES = {
    ActivityClass.LIE_DOWN: "lie down",
    ActivityClass.FALL: "fall",
    ActivityClass.WALK: "walk",
    ActivityClass.PICKUP: "pickup",
    ActivityClass.RUN: "run",
    ActivityClass.SIT_DOWN: "sit down",
    ActivityClass.STAND_UP: "stand up",
    ActivityClass.PRESENCE: "presence",
}

# reported-against (not enforced) real-time budget per inference, ms
REALTIME_BUDGET_MS = 50.0


@dataclass(frozen=True)
class MetricsTable:
    """Per-class accuracy rows plus the class-averaged overall accuracy."""

    phase: str  # baseline | shifted | recovered
    seed: int
    per_class: tuple
    overall: float

    def __post_init__(self):
        if self.phase not in ("baseline", "shifted", "recovered"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if len(self.per_class) != len(ActivityClass):
            raise ValueError("per_class must cover all classes")
        for a in tuple(self.per_class) + (self.overall,):
            if not (0.0 <= a <= 1.0):
                raise ValueError("accuracies must lie in [0, 1]")

    def rows(self) -> list[dict]:
        out = []
        for cls in ActivityClass:
            out.append(
                {
                    "phase": self.phase,
                    "seed": self.seed,
                    "class": CLASS_NAMES[cls],
                    "accuracy_pct": round(100.0 * self.per_class[int(cls)], 2),
                }
            )
        out.append(
            {
                "phase": self.phase,
                "seed": self.seed,
                "class": "overall",
                "accuracy_pct": round(100.0 * self.overall, 2),
            }
        )
        return out


@dataclass(frozen=True)
class LatencyReport:
    """Wall time per pipeline stage; total is the exact sum of the stages."""

    stage_seconds: dict
    windows: int

    @property
    def total_seconds(self) -> float:
        return sum(self.stage_seconds.values())

    def to_dict(self) -> dict:
        per_window_ms = None
        if self.windows:
            per_window_ms = {
                k: 1000.0 * v / self.windows for k, v in self.stage_seconds.items()
            }
        return {
            "stage_seconds": dict(self.stage_seconds),
            "total_seconds": self.total_seconds,
            "windows": self.windows,
            "per_window_ms": per_window_ms,
            "realtime_budget_ms": REALTIME_BUDGET_MS,
        }


def _ensure_dir(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_metrics_csv(path: str, tables: list[MetricsTable]) -> None:
    _ensure_dir(path)
    lines = ["phase,seed,class,accuracy_pct"]
    for table in tables:
        for row in table.rows():
            lines.append(
                f"{row['phase']},{row['seed']},{row['class']},{row['accuracy_pct']:.2f}"
            )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_metrics_json(path: str, tables: list[MetricsTable], extra: dict | None = None) -> None:
    _ensure_dir(path)
    doc = {
        "tables": [
            {
                "phase": t.phase,
                "seed": t.seed,
                "per_class": {CLASS_NAMES[c]: t.per_class[int(c)] for c in ActivityClass},
                "overall": t.overall,
            }
            for t in tables
        ]
    }
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_metrics_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_latency_json(path: str, report: LatencyReport) -> None:
    _ensure_dir(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def events_to_jsonl(events) -> str:
    lines = []
    for ev in events:
        lines.append(
            json.dumps(
                {"kind": ev.kind, "timestamp_ns": ev.timestamp_ns, "metrics": ev.metrics},
                sort_keys=True,
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")
