"""Confusion matrices and imbalance-aware scores: BAcc, Acc, Acc* and macro-F1.

Per-class terms with a zero denominator (a class absent from the labels, or
0/0 in F1) are defined as 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


def confusion(predictions, labels, num_classes: int) -> np.ndarray:
    """``cm[r, c]`` counts examples with true class ``r`` predicted as ``c``."""
    if num_classes < 2:
        raise InvalidInputError("need at least two classes")
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    true = np.asarray(labels, dtype=np.int64).ravel()
    if pred.shape != true.shape:
        raise InvalidInputError(f"{pred.size} predictions vs {true.size} labels")
    for name, arr in (("prediction", pred), ("label", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise InvalidInputError(f"{name} index outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass(frozen=True)
class MetricsReport:
    bacc: float
    acc: float
    acc_star: float
    macro_f1: float
    recall: tuple
    f1: tuple
    binary_acc: tuple
    support: tuple
    confusion: tuple

    def to_dict(self) -> dict:
        return {
            "bacc": self.bacc, "acc": self.acc, "acc_star": self.acc_star, "macro_f1": self.macro_f1,
            "per_class_recall": list(self.recall), "per_class_f1": list(self.f1),
            "per_class_binary_acc": list(self.binary_acc), "support": list(self.support),
            "confusion": [list(r) for r in self.confusion],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["bacc"], d["acc"], d["acc_star"], d["macro_f1"], tuple(d["per_class_recall"]),
                   tuple(d["per_class_f1"]), tuple(d["per_class_binary_acc"]), tuple(d["support"]),
                   tuple(tuple(r) for r in d["confusion"]))


def compute_metrics(cm) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 2:
        raise InvalidInputError("confusion matrix must be square with C >= 2")
    if np.any(cm < 0):
        raise InvalidInputError("confusion counts must be non-negative")
    total = int(cm.sum())
    if total < 1:
        raise InvalidInputError("empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    fn = support - tp
    fp = cm.sum(axis=0) - tp
    tn = total - tp - fn - fp
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * tp, 2 * tp + fp + fn)
    binary = (tp + tn) / total
    return MetricsReport(
        bacc=float(recall.mean()),
        acc=float(tp.sum() / total),
        acc_star=float(binary.mean()),
        macro_f1=float(f1.mean()),
        recall=tuple(float(v) for v in recall),
        f1=tuple(float(v) for v in f1),
        binary_acc=tuple(float(v) for v in binary),
        support=tuple(int(v) for v in support),
        confusion=tuple(tuple(int(v) for v in row) for row in cm),
    )


def evaluate_predictions(predictions, labels, num_classes: int) -> MetricsReport:
    return compute_metrics(confusion(predictions, labels, num_classes))
