"""Classification metrics and stratified k-fold assignment.

Zero denominators yield 0 for precision, recall, F1 and MCC, which keeps the
metrics defined on tiny validation folds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValidationError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> ConfusionCounts:
        t = np.asarray(y_true).astype(bool).ravel()
        p = np.asarray(y_pred).astype(bool).ravel()
        if t.shape != p.shape:
            raise ValidationError("prediction and target lengths differ")
        return cls(int(np.sum(t & p)), int(np.sum(~t & p)),
                   int(np.sum(~t & ~p)), int(np.sum(t & ~p)))


class BinaryMetrics(NamedTuple):
    accuracy: float
    precision: float
    recall: float
    f1: float
    mcc: float


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def f1_score(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def binary_metrics(c: ConfusionCounts) -> BinaryMetrics:
    if c.total == 0:
        raise ValidationError("metrics need at least one evaluated item")
    accuracy = (c.tp + c.tn) / c.total
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    denom = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    mcc = (c.tp * c.tn - c.fp * c.fn) / math.sqrt(denom) if denom else 0.0
    return BinaryMetrics(accuracy, precision, recall, f1_score(c), mcc)


def macro_f1(per_label_counts: Sequence[ConfusionCounts]) -> float:
    if not per_label_counts:
        raise ValidationError("macro-F1 over an empty label set")
    return math.fsum(f1_score(c) for c in per_label_counts) / len(per_label_counts)


def per_class_counts(y_true, y_pred, n_classes: int) -> list[ConfusionCounts]:
    """One-vs-rest confusion counts for each class id in ``range(n_classes)``."""
    t = np.asarray(y_true).ravel()
    p = np.asarray(y_pred).ravel()
    return [ConfusionCounts.from_predictions(t == k, p == k) for k in range(n_classes)]


def per_column_counts(y_true, y_pred) -> list[ConfusionCounts]:
    """Confusion counts for each column of multi-label 0/1 matrices."""
    t = np.asarray(y_true)
    p = np.asarray(y_pred)
    return [ConfusionCounts.from_predictions(t[:, j], p[:, j]) for j in range(t.shape[1])]


def multiclass_mcc(y_true, y_pred, n_classes: int) -> float:
    """Matthews correlation generalised to K classes (Gorodkin's R_K)."""
    t = np.asarray(y_true).ravel().astype(np.int64)
    p = np.asarray(y_pred).ravel().astype(np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.float64)
    np.add.at(cm, (t, p), 1)
    s = cm.sum()
    c = np.trace(cm)
    t_k = cm.sum(axis=1)
    p_k = cm.sum(axis=0)
    num = c * s - t_k @ p_k
    den = math.sqrt((s * s - p_k @ p_k) * (s * s - t_k @ t_k))
    return float(num / den) if den else 0.0


def multiclass_summary(y_true, y_pred, n_classes: int) -> BinaryMetrics:
    """Accuracy, macro precision/recall/F1 and multi-class MCC."""
    counts = per_class_counts(y_true, y_pred, n_classes)
    per = [binary_metrics(c) for c in counts]
    accuracy = float(np.mean(np.asarray(y_true).ravel() == np.asarray(y_pred).ravel()))
    return BinaryMetrics(
        accuracy,
        math.fsum(m.precision for m in per) / n_classes,
        math.fsum(m.recall for m in per) / n_classes,
        macro_f1(counts),
        multiclass_mcc(y_true, y_pred, n_classes),
    )


@dataclass(frozen=True)
class FoldAssignment:
    folds: np.ndarray
    k: int

    def splits(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """``(train_indices, validation_indices)`` for each fold in order."""
        return [(np.flatnonzero(self.folds != f), np.flatnonzero(self.folds == f))
                for f in range(self.k)]


def stratified_kfold(labels: Sequence[int], k: int, seed: int) -> FoldAssignment:
    """Shuffle, then deal each class round-robin across the folds.

    The dealing position carries over from one class to the next, so overall
    fold sizes also differ by at most one.
    """
    y = np.asarray(labels).ravel()
    if k < 2:
        raise ValidationError(f"need at least 2 folds, got {k}")
    if k > len(y):
        raise ValidationError(f"{k} folds requested for {len(y)} items")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF,
                                                        int(seed) >> 32, 0x5F01D]))
    order = rng.permutation(len(y))
    folds = np.empty(len(y), dtype=np.int64)
    cursor = 0
    for cls in np.unique(y):
        members = order[y[order] == cls]
        folds[members] = (cursor + np.arange(len(members))) % k
        cursor = (cursor + len(members)) % k
    return FoldAssignment(folds, k)


def multilabel_strata(targets: np.ndarray) -> np.ndarray:
    """Stratum per row: its rarest positive label, or -1 for all-negative rows."""
    y = np.asarray(targets).astype(bool)
    freq = y.sum(axis=0)
    masked = np.where(y, freq[None, :], np.iinfo(np.int64).max)
    strata = masked.argmin(axis=1)
    return np.where(y.any(axis=1), strata, -1)


REPORT_HEADER = ("class", "model", "accuracy", "precision", "recall", "f1", "mcc")
COMPARISON_METRICS = ("accuracy", "precision", "recall", "f1", "mcc")


def write_metrics_csv(path, rows: Iterable[tuple[str, str, BinaryMetrics]]) -> None:
    """Per-class report: one row per (class name, winning config label, metrics)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for name, model, m in rows:
            writer.writerow([name, model] + [f"{v:.4f}" for v in m])


def write_comparison_csv(path, columns: dict[str, BinaryMetrics]) -> None:
    """Metric-by-model table, one column per model."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("metric",) + tuple(columns))
        for metric in COMPARISON_METRICS:
            writer.writerow([metric] + [f"{getattr(m, metric):.4f}" for m in columns.values()])
