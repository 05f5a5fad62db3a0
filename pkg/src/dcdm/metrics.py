"""Confusion matrix accumulation and multiclass evaluation metrics.

Rows are true classes, columns are predicted classes. Each class is
scored one-vs-rest: tp is its diagonal cell, fp the rest of its column,
fn the rest of its row, tn everything else. Precision, recall, per-class
accuracy, and F1 follow the textbook ratios; macro aggregates are
unweighted means over classes, except macro_f1 which is the harmonic
combination of macro precision and macro recall. Global accuracy is
trace over total.

Ratios with a zero denominator report 0.0 and carry an explicit
"undefined" marker instead of NaN so downstream consumers stay
machine-friendly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class ConfusionMatrix:
    """k x k count matrix supporting single updates and cell-wise merge."""

    def __init__(self, k: int):
        if k < 2:
            raise ValueError(f"need at least 2 classes, got {k}")
        self.k = k
        self.counts = np.zeros((k, k), dtype=np.int64)

    def update(self, true_class: int, predicted_class: int) -> None:
        if not (0 <= true_class < self.k and 0 <= predicted_class < self.k):
            raise IndexError(
                f"class pair ({true_class}, {predicted_class}) outside 0..{self.k - 1}")
        self.counts[true_class, predicted_class] += 1

    def update_batch(self, true_classes, predicted_classes) -> None:
        for t, p in zip(true_classes, predicted_classes, strict=True):
            self.update(int(t), int(p))

    def merge(self, other: "ConfusionMatrix") -> None:
        """Cell-wise add, so parallel evaluators can accumulate privately."""
        if other.k != self.k:
            raise ValueError(f"cannot merge {other.k}-class into {self.k}-class")
        self.counts += other.counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def trace(self) -> int:
        return int(np.trace(self.counts))


@dataclass
class ClassMetrics:
    class_index: int
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    accuracy: float
    undefined: list = field(default_factory=list)  # metric names with 0/0


@dataclass
class MetricsReport:
    k: int
    total: int
    per_class: list
    macro_precision: float
    macro_recall: float
    macro_f1: float
    global_accuracy: float
    undefined: list = field(default_factory=list)


def _ratio(num: int, den: int, name: str, flags: list) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def compute(cm: ConfusionMatrix) -> MetricsReport:
    """Score a confusion matrix; raises ValueError when it is empty."""
    total = cm.total
    if total == 0:
        raise ValueError("cannot compute metrics for an empty confusion matrix")
    per_class = []
    col_sums = cm.counts.sum(axis=0)
    row_sums = cm.counts.sum(axis=1)
    for c in range(cm.k):
        tp = int(cm.counts[c, c])
        fp = int(col_sums[c]) - tp
        fn = int(row_sums[c]) - tp
        tn = total - tp - fp - fn
        flags = []
        precision = _ratio(tp, tp + fp, "precision", flags)
        recall = _ratio(tp, tp + fn, "recall", flags)
        if precision + recall == 0.0:
            flags.append("f1")
            f1 = 0.0
        else:
            f1 = 2.0 * precision * recall / (precision + recall)
        per_class.append(ClassMetrics(
            class_index=c, tp=tp, fp=fp, fn=fn, tn=tn,
            precision=precision, recall=recall, f1=f1,
            accuracy=(tp + tn) / total, undefined=flags))
    # plain left-to-right sums: keeps the macro means bit-identical to the
    # textbook formula regardless of numpy's pairwise summation order
    macro_p = sum(m.precision for m in per_class) / cm.k
    macro_r = sum(m.recall for m in per_class) / cm.k
    report_flags = []
    if macro_p + macro_r == 0.0:
        report_flags.append("macro_f1")
        macro_f1 = 0.0
    else:
        macro_f1 = 2.0 * macro_p * macro_r / (macro_p + macro_r)
    return MetricsReport(
        k=cm.k, total=total, per_class=per_class,
        macro_precision=macro_p, macro_recall=macro_r, macro_f1=macro_f1,
        global_accuracy=cm.trace / total, undefined=report_flags)


def macro_f1_of(precision: float, recall: float) -> float:
    """The aggregate F1 formula on its own, for arithmetic cross-checks."""
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# -- rendering -------------------------------------------------------------------


def _report_dict(report: MetricsReport) -> dict:
    return {
        "k": report.k,
        "total": report.total,
        "global_accuracy": report.global_accuracy,
        "macro_precision": report.macro_precision,
        "macro_recall": report.macro_recall,
        "macro_f1": report.macro_f1,
        "undefined": sorted(report.undefined),
        "per_class": [
            {
                "class_index": m.class_index,
                "tp": m.tp, "fp": m.fp, "fn": m.fn, "tn": m.tn,
                "precision": m.precision, "recall": m.recall,
                "f1": m.f1, "accuracy": m.accuracy,
                "undefined": sorted(m.undefined),
            }
            for m in report.per_class
        ],
    }


def render_report(report: MetricsReport, format: str = "json",
                  labels: Optional[list] = None) -> bytes:
    """Serialize a report. JSON is canonical (sorted keys, no spaces) so
    parse -> re-render is byte-identical; text is for terminals."""
    if format == "json":
        return (json.dumps(_report_dict(report), sort_keys=True,
                           separators=(",", ":")) + "\n").encode()
    if format != "text":
        raise ValueError(f"unknown report format {format!r}")
    lines = [
        f"classes {report.k}  samples {report.total}",
        f"global accuracy  {report.global_accuracy * 100:.2f}%",
        f"macro precision  {report.macro_precision * 100:.2f}%",
        f"macro recall     {report.macro_recall * 100:.2f}%",
        f"macro f1         {report.macro_f1 * 100:.2f}%",
        "",
        "class  precision  recall     f1         accuracy   tp     fp     fn",
    ]
    for m in report.per_class:
        name = labels[m.class_index] if labels else f"{m.class_index:02d}"
        mark = "*" if m.undefined else " "
        lines.append(
            f"{name:<6} {m.precision * 100:8.2f}% {m.recall * 100:8.2f}% "
            f"{m.f1 * 100:8.2f}% {m.accuracy * 100:8.2f}% "
            f"{m.tp:6d} {m.fp:6d} {m.fn:6d}{mark}")
    if any(m.undefined for m in report.per_class):
        lines.append("* has zero-denominator metrics reported as 0")
    return ("\n".join(lines) + "\n").encode()


def from_json(data: bytes) -> MetricsReport:
    obj = json.loads(data)
    per_class = [
        ClassMetrics(
            class_index=m["class_index"], tp=m["tp"], fp=m["fp"],
            fn=m["fn"], tn=m["tn"], precision=m["precision"],
            recall=m["recall"], f1=m["f1"], accuracy=m["accuracy"],
            undefined=list(m["undefined"]))
        for m in obj["per_class"]
    ]
    return MetricsReport(
        k=obj["k"], total=obj["total"], per_class=per_class,
        macro_precision=obj["macro_precision"],
        macro_recall=obj["macro_recall"], macro_f1=obj["macro_f1"],
        global_accuracy=obj["global_accuracy"],
        undefined=list(obj["undefined"]))
