"""Confusion matrix, accuracy and macro-F1 over the expression classes."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .labels import LABELS, N_CLASSES


def _check_label(value: int, n: int) -> int:
    if not 0 <= value < n:
        raise ValueError(f"label {value} outside [0, {n - 1}]")
    return int(value)


@dataclass
class ConfusionMatrix:
    """Counts with rows indexed by true class and columns by predicted class."""

    n_classes: int = N_CLASSES
    counts: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.counts is None:
            self.counts = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, true_label: int, predicted_label: int) -> "ConfusionMatrix":
        t = _check_label(true_label, self.n_classes)
        p = _check_label(predicted_label, self.n_classes)
        self.counts[t, p] += 1
        return self

    def update(self, true_labels, predicted_labels) -> "ConfusionMatrix":
        t = np.asarray(true_labels, dtype=np.int64)
        p = np.asarray(predicted_labels, dtype=np.int64)
        if t.shape != p.shape:
            raise ValueError(f"label arrays differ in shape: {t.shape} vs {p.shape}")
        for arr in (t, p):
            if arr.size and (arr.min() < 0 or arr.max() >= self.n_classes):
                raise ValueError(f"labels outside [0, {self.n_classes - 1}]")
        np.add.at(self.counts, (t, p), 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)

    def _require_samples(self) -> None:
        if self.total == 0:
            raise ValueError("confusion matrix is empty")

    def per_class(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Precision, recall and F1 per class; undefined ratios score 0."""
        self._require_samples()
        tp = np.diag(self.counts).astype(float)
        col = self.counts.sum(axis=0).astype(float)
        row = self.counts.sum(axis=1).astype(float)
        precision = np.divide(tp, col, out=np.zeros_like(tp), where=col > 0)
        recall = np.divide(tp, row, out=np.zeros_like(tp), where=row > 0)
        denom = precision + recall
        f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
        return precision, recall, f1


def accuracy(cm: ConfusionMatrix) -> float:
    cm._require_samples()
    return float(np.trace(cm.counts) / cm.total)


def macro_f1(cm: ConfusionMatrix) -> float:
    """Unweighted mean of per-class F1 over every class, present or not."""
    return float(cm.per_class()[2].mean())


def confusion_from_labels(true_labels, predicted_labels, n_classes: int = N_CLASSES) -> ConfusionMatrix:
    return ConfusionMatrix(n_classes).update(true_labels, predicted_labels)


def format_report(cm: ConfusionMatrix, names=LABELS) -> str:
    precision, recall, f1 = cm.per_class()
    support = cm.counts.sum(axis=1)
    width = max(len(n) for n in names)
    lines = [
        f"samples   {cm.total}",
        f"accuracy  {accuracy(cm):.4f}",
        f"macro-F1  {macro_f1(cm):.4f}  (unweighted mean over {cm.n_classes} classes; empty classes score 0)",
        "",
        f"{'class':<{width}}  precision  recall     f1  support",
    ]
    for i, name in enumerate(names):
        lines.append(
            f"{name:<{width}}  {precision[i]:9.4f}  {recall[i]:6.4f}  {f1[i]:5.4f}  {support[i]:7d}"
        )
    lines += ["", "confusion matrix (rows = true, columns = predicted)"]
    col = max(width, len(str(cm.counts.max(initial=0))))
    lines.append(" " * (width + 2) + " ".join(f"{n:>{col}}" for n in names))
    for i, name in enumerate(names):
        lines.append(f"{name:<{width}}  " + " ".join(f"{v:{col}d}" for v in cm.counts[i]))
    return "\n".join(lines) + "\n"


def report_csv(cm: ConfusionMatrix, names=LABELS) -> str:
    precision, recall, f1 = cm.per_class()
    support = cm.counts.sum(axis=1)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "precision", "recall", "f1", "support"])
    for i, name in enumerate(names):
        w.writerow([name, f"{precision[i]:.6f}", f"{recall[i]:.6f}", f"{f1[i]:.6f}", int(support[i])])
    w.writerow(["accuracy", "", "", f"{accuracy(cm):.6f}", cm.total])
    w.writerow(["macro_f1", "", "", f"{macro_f1(cm):.6f}", cm.total])
    return buf.getvalue()


def confusion_csv(cm: ConfusionMatrix, names=LABELS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred", *names])
    for i, name in enumerate(names):
        w.writerow([name, *(int(v) for v in cm.counts[i])])
    return buf.getvalue()
