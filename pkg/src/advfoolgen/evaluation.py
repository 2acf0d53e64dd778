"""Fooling-ratio metrics and report assembly.

The fooling ratio counts label changes against the model's own predictions on
the clean images, not against ground truth; a misclassified clean image only
counts when the attack changes the predicted label.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classifier import Predictions


def fooling_ratio(clean_preds: Predictions, adv_preds: Predictions) -> float:
    """Fraction of samples whose adversarial top label differs from the clean one."""
    if len(clean_preds) != len(adv_preds):
        raise ValueError(
            f"prediction sets differ in length: {len(clean_preds)} vs {len(adv_preds)}"
        )
    if len(clean_preds) == 0:
        raise ValueError("cannot compute a fooling ratio on empty predictions")
    return float(np.mean(clean_preds.top_labels != adv_preds.top_labels))


def fooling_ratio_extra_class(adv_preds: Predictions, extra_class: int) -> float:
    """Fraction of attack samples not assigned to the defense's extra class."""
    if not 0 <= extra_class < adv_preds.num_classes:
        raise ValueError(
            f"extra_class {extra_class} outside [0, {adv_preds.num_classes})"
        )
    if len(adv_preds) == 0:
        raise ValueError("cannot compute a fooling ratio on empty predictions")
    return float(np.mean(adv_preds.top_labels != extra_class))


def topk_fooling_ratio(clean_preds: Predictions, adv_preds: Predictions, k: int) -> float:
    """Fraction of samples whose clean top-1 label is absent from the
    adversarial top-k set."""
    if len(clean_preds) != len(adv_preds):
        raise ValueError(
            f"prediction sets differ in length: {len(clean_preds)} vs {len(adv_preds)}"
        )
    if not 1 <= k <= adv_preds.num_classes:
        raise ValueError(f"k must lie in [1, {adv_preds.num_classes}], got {k}")
    if len(clean_preds) == 0:
        raise ValueError("cannot compute a fooling ratio on empty predictions")
    topk = np.argsort(-adv_preds.probs, axis=1, kind="stable")[:, :k]
    present = (topk == clean_preds.top_labels[:, None]).any(axis=1)
    return float(np.mean(~present))


def _round4(value: float | None) -> float | None:
    return None if value is None else round(float(value), 4)


@dataclass(frozen=True)
class ReportRow:
    attack: str
    defense: str
    fooling_top1: float
    fooling_top5: float | None
    clean_acc: float
    n: int

    def __post_init__(self):
        for name in ("fooling_top1", "clean_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.fooling_top5 is not None and not 0.0 <= self.fooling_top5 <= 1.0:
            raise ValueError(f"fooling_top5 must lie in [0, 1], got {self.fooling_top5}")
        if self.n <= 0:
            raise ValueError("row sample count must be positive")
        # quantize at construction so CSV round-trips are exact
        object.__setattr__(self, "fooling_top1", _round4(self.fooling_top1))
        object.__setattr__(self, "fooling_top5", _round4(self.fooling_top5))
        object.__setattr__(self, "clean_acc", _round4(self.clean_acc))


@dataclass(frozen=True)
class FoolingReport:
    """Attack x defense fooling table with deterministic row order."""

    rows: tuple[ReportRow, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["attack", "defense", "fooling_top1", "fooling_top5",
                         "clean_acc", "n"])
        for r in self.rows:
            top5 = "" if r.fooling_top5 is None else f"{r.fooling_top5:.4f}"
            writer.writerow([r.attack, r.defense, f"{r.fooling_top1:.4f}", top5,
                             f"{r.clean_acc:.4f}", r.n])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "FoolingReport":
        reader = csv.DictReader(io.StringIO(text))
        rows = [
            ReportRow(
                attack=line["attack"],
                defense=line["defense"],
                fooling_top1=float(line["fooling_top1"]),
                fooling_top5=float(line["fooling_top5"]) if line["fooling_top5"] else None,
                clean_acc=float(line["clean_acc"]),
                n=int(line["n"]),
            )
            for line in reader
        ]
        return build_report(rows)

    @classmethod
    def load(cls, path: str | Path) -> "FoolingReport":
        return cls.from_csv(Path(path).read_text())


def build_report(entries) -> FoolingReport:
    """Assemble rows into a report ordered by (attack, defense); duplicates error."""
    rows = list(entries)
    if not rows:
        raise ValueError("cannot build a report from no evaluation entries")
    keys = [(r.attack, r.defense) for r in rows]
    if len(set(keys)) != len(keys):
        dupes = sorted({k for k in keys if keys.count(k) > 1})
        raise ValueError(f"duplicate report rows for {dupes}")
    ordered = tuple(sorted(rows, key=lambda r: (r.attack, r.defense)))
    return FoolingReport(rows=ordered)
