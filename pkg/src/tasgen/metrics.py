"""Step-level detection/relabeling F1 and label-agreement metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError


def f1_score(pred_flags, truth_flags) -> float:
    """F1 of boolean predictions against boolean truth; 0 when precision + recall is 0."""
    pred = np.asarray(pred_flags, dtype=bool)
    truth = np.asarray(truth_flags, dtype=bool)
    if pred.shape != truth.shape:
        raise ValidationError(f"length mismatch: {pred.shape} vs {truth.shape}")
    tp = int((pred & truth).sum())
    n_pred, n_true = int(pred.sum()), int(truth.sum())
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_true if n_true else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f1_relabel(pred_labels, truth_labels, anchor_labels) -> float:
    """F1 of relabeling: predicted positives are steps labeled away from the anchor,
    true positives among them are those whose new label matches the truth.
    """
    pred = np.asarray(pred_labels)
    truth = np.asarray(truth_labels)
    anchor = np.asarray(anchor_labels)
    if not (pred.shape == truth.shape == anchor.shape):
        raise ValidationError("label streams differ in length")
    changed_pred = pred != anchor
    changed_true = truth != anchor
    tp = int((changed_pred & changed_true & (pred == truth)).sum())
    n_pred, n_true = int(changed_pred.sum()), int(changed_true.sum())
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_true if n_true else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = truth, cols = predicted
    class_vocabulary: tuple

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.class_vocabulary)
        if self.counts.shape != (k, k):
            raise ValidationError(f"confusion matrix must be {k}x{k}")
        if (self.counts < 0).any():
            raise ValidationError("confusion counts must be non-negative")

    @classmethod
    def from_labels(cls, truth: Sequence, pred: Sequence, class_vocabulary: Sequence) -> "ConfusionMatrix":
        if len(truth) != len(pred):
            raise ValidationError("label streams differ in length")
        index = {c: i for i, c in enumerate(class_vocabulary)}
        counts = np.zeros((len(index), len(index)), dtype=np.int64)
        for t, p in zip(truth, pred):
            counts[index[t], index[p]] += 1
        return cls(counts, tuple(class_vocabulary))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class(self) -> dict:
        out = {}
        for i, name in enumerate(self.class_vocabulary):
            tp = self.counts[i, i]
            col, row = self.counts[:, i].sum(), self.counts[i].sum()
            out[name] = {
                "precision": float(tp / col) if col else 0.0,
                "recall": float(tp / row) if row else 0.0,
            }
        return out

    def to_dict(self) -> dict:
        return {"class_vocabulary": list(self.class_vocabulary), "counts": self.counts.tolist()}


def oa_kappa(cm: ConfusionMatrix) -> tuple[float, float]:
    """Overall accuracy and Cohen's kappa."""
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValidationError("confusion matrix is empty")
    oa = np.trace(counts) / total
    p_e = float((counts.sum(axis=1) * counts.sum(axis=0)).sum() / total**2)
    if p_e >= 1.0:
        raise ValidationError("degenerate marginals: kappa undefined")
    return float(oa), float((oa - p_e) / (1.0 - p_e))
