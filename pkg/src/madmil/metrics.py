"""Evaluation metrics: ROC AUC (rank form with midranks), macro F1, accuracy.

AUC follows the Mann-Whitney identity: the sum of positive ranks, with
tied scores receiving their midrank, so the result equals a brute-force
count of concordant pairs with ties worth one half.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UndefinedMetricError(ValueError):
    """The metric is not defined for this set of predictions."""


@dataclass
class ScoredPrediction:
    """One bag's evaluation record: true label and class probabilities."""

    bag_id: str
    label: int
    scores: np.ndarray  # length C, nonnegative, sums to 1

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1 or self.scores.size < 2:
            raise ValueError(f"scores must be a length-C vector, got {self.scores.shape}")
        if self.scores.min() < 0 or abs(self.scores.sum() - 1.0) > 1e-9:
            raise ValueError("scores must be nonnegative and sum to 1")


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties averaged."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j < values.size and sorted_vals[j] == sorted_vals[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)
        i = j
    return ranks


def _binary_auc(is_positive: np.ndarray, scores: np.ndarray) -> float:
    n_pos = int(is_positive.sum())
    n_neg = is_positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative examples")
    ranks = _midranks(scores)
    rank_sum = ranks[is_positive].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_auc(predictions) -> float:
    """Binary AUC on the positive-class score; for C > 2, the macro
    one-vs-rest average over classes present in the labels."""
    labels = np.array([p.label for p in predictions])
    scores = np.vstack([p.scores for p in predictions])
    present = np.unique(labels)
    if present.size < 2:
        raise UndefinedMetricError("AUC undefined: only one class present")
    if scores.shape[1] == 2:
        return _binary_auc(labels == 1, scores[:, 1])
    return float(np.mean([_binary_auc(labels == c, scores[:, c]) for c in present]))


def macro_f1(predictions) -> float:
    """Macro-averaged F1 over all C classes from argmax predictions.

    A class with zero precision + recall contributes 0.
    """
    labels = np.array([p.label for p in predictions])
    scores = np.vstack([p.scores for p in predictions])
    predicted = scores.argmax(axis=1)
    per_class = []
    for c in range(scores.shape[1]):
        tp = int(np.sum((predicted == c) & (labels == c)))
        fp = int(np.sum((predicted == c) & (labels != c)))
        fn = int(np.sum((predicted != c) & (labels == c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        per_class.append(
            2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
        )
    return float(np.mean(per_class))


def positive_class_f1(predictions) -> float:
    """F1 of class 1 alone (binary); not used in reports, kept as a variant."""
    labels = np.array([p.label for p in predictions])
    scores = np.vstack([p.scores for p in predictions])
    if scores.shape[1] != 2:
        raise UndefinedMetricError("positive-class F1 is a binary metric")
    predicted = scores.argmax(axis=1)
    tp = int(np.sum((predicted == 1) & (labels == 1)))
    fp = int(np.sum((predicted == 1) & (labels == 0)))
    fn = int(np.sum((predicted == 0) & (labels == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0


def accuracy(predictions) -> float:
    labels = np.array([p.label for p in predictions])
    predicted = np.vstack([p.scores for p in predictions]).argmax(axis=1)
    return float(np.mean(predicted == labels))


def mean_std(values) -> tuple[float, float]:
    """Arithmetic mean and sample standard deviation (n-1), 0 for n = 1."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ValueError("mean_std of an empty sequence")
    if values.size == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1))


def format_mean_std(mean: float, std: float, digits: int = 3) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"
