"""Binary detection counts and precision/recall/F1.

Attacked windows are the positive class. Probabilities at or above the
threshold are classified positive (ties count as positive). Metrics are
fractions in [0, 1]; report layers multiply by 100 for display. A metric
whose denominator is empty is reported as 0.0 and flagged by name in
``MetricValues.undefined``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionCounts:
    """Outcome counts of a binary detector against ground-truth labels."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "fn", "tn"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {value!r}")
            object.__setattr__(self, name, int(value))

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.fp + self.tn

    @property
    def total(self) -> int:
        return self.positives + self.negatives

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def confusion(
    probabilities, labels, threshold: float = DEFAULT_THRESHOLD
) -> ConfusionCounts:
    """Count detector outcomes at a decision threshold (ties are positive)."""
    probs = np.asarray(probabilities, dtype=np.float64).ravel()
    truth = np.asarray(labels).ravel()
    if probs.shape != truth.shape:
        raise ValueError(
            f"{probs.shape[0]} probabilities but {truth.shape[0]} labels"
        )
    predicted = probs >= threshold
    actual = truth == 1
    return ConfusionCounts(
        tp=int(np.sum(predicted & actual)),
        fp=int(np.sum(predicted & ~actual)),
        fn=int(np.sum(~predicted & actual)),
        tn=int(np.sum(~predicted & ~actual)),
    )


@dataclass(frozen=True)
class MetricValues:
    """Precision, recall, and F1 as fractions, with undefined metrics flagged."""

    precision: float
    recall: float
    f1: float
    undefined: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "undefined": list(self.undefined),
        }


def f1_from_precision_recall(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0.

    Scale-free: percentages in give percentages out.
    """
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def prf(counts: ConfusionCounts) -> MetricValues:
    """Precision, recall, and F1 from outcome counts."""
    undefined = []
    if counts.tp + counts.fp == 0:
        precision = 0.0
        undefined.append("precision")
    else:
        precision = counts.tp / (counts.tp + counts.fp)
    if counts.tp + counts.fn == 0:
        recall = 0.0
        undefined.append("recall")
    else:
        recall = counts.tp / (counts.tp + counts.fn)
    if precision + recall == 0:
        undefined.append("f1")
    f1 = f1_from_precision_recall(precision, recall)
    return MetricValues(
        precision=precision, recall=recall, f1=f1, undefined=tuple(undefined)
    )


def f1_score(probabilities, labels, threshold: float = DEFAULT_THRESHOLD) -> float:
    """F1 of thresholded probabilities against labels."""
    return prf(confusion(probabilities, labels, threshold)).f1
