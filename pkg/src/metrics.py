"""
Classification metrics for sleep staging and OSA detection.

This module provides classes and functions for tallying confusion matrices
and deriving accuracy, per-category precision/recall/F1, macro F1 and
cross-validation summaries from them.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pandas import DataFrame
from sklearn.metrics import confusion_matrix

from src.errors import DimensionMismatch, EmptyMatrix, LabelOutOfRange, LengthMismatch

PER_CATEGORY_ACCURACY_DEFINITION = (
    "per-category accuracy = fraction of epochs of the true category that are predicted correctly (recall)"
)


@dataclass
class ConfusionMatrix:
    """K x K tally; rows are true categories, columns predicted ones."""
    counts: np.ndarray

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or counts.shape[0] < 2:
            raise DimensionMismatch(f"counts must be a K x K matrix with K >= 2, got shape {counts.shape}")
        if (counts < 0).any():
            raise DimensionMismatch("counts must be non-negative")
        self.counts = counts

    @property
    def k(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def true_positives(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    def false_positives(self) -> np.ndarray:
        return self.counts.sum(axis=0) - np.diag(self.counts)

    def false_negatives(self) -> np.ndarray:
        return self.counts.sum(axis=1) - np.diag(self.counts)

    def true_negatives(self) -> np.ndarray:
        return self.total - self.true_positives() - self.false_positives() - self.false_negatives()

    def to_dict(self) -> Dict[str, object]:
        return {"k": self.k, "counts": self.counts.tolist()}


@dataclass
class MetricReport:
    """Metrics derived from one confusion matrix."""
    accuracy: float
    precision: List[float]
    recall: List[Optional[float]]
    f1: List[Optional[float]]
    macro_f1: float
    support: List[int]
    categories: List[str] = field(default_factory=list)

    @property
    def per_category_accuracy(self) -> List[Optional[float]]:
        return list(self.recall)

    def to_dict(self) -> Dict[str, object]:
        """Serialize with a fixed field order."""
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "categories": list(self.categories),
            "precision": list(self.precision),
            "recall": list(self.recall),
            "f1": list(self.f1),
            "per_category_accuracy": self.per_category_accuracy,
            "support": list(self.support),
            "per_category_accuracy_definition": PER_CATEGORY_ACCURACY_DEFINITION,
        }

    def scalar_metrics(self) -> Dict[str, Optional[float]]:
        """Flat name -> value mapping used for cross-validation tables."""
        out: Dict[str, Optional[float]] = {"accuracy": self.accuracy, "macro_f1": self.macro_f1}
        for name, p, r, f in zip(self.categories, self.precision, self.recall, self.f1):
            out[f"precision_{name}"] = p
            out[f"recall_{name}"] = r
            out[f"f1_{name}"] = f
        return out


class SleepMetricsCalculator:
    """
    A class for computing classification metrics from predicted categories.

    Zero-denominator conventions: a category with no predicted positives has
    precision 0; a category with no true epochs has recall and F1 of None and
    is left out of the macro F1.
    """

    def __init__(self, k: int, categories: Optional[Sequence[str]] = None):
        """
        Args:
            k: Number of categories.
            categories: Display names, defaults to "0".."k-1".
        """
        if k < 2:
            raise DimensionMismatch(f"k must be at least 2, got {k}")
        self.k = k
        self.categories = list(categories) if categories is not None else [str(i) for i in range(k)]
        if len(self.categories) != k:
            raise DimensionMismatch(f"{len(self.categories)} category names for k={k}")

    def calculate_confusion(self, labels_true: Sequence[int], labels_pred: Sequence[int]) -> ConfusionMatrix:
        """
        Tally true/predicted pairs.

        Raises:
            LengthMismatch: the sequences differ in length.
            LabelOutOfRange: a label lies outside [0, k).
        """
        y_true = np.asarray(labels_true, dtype=np.int64).ravel()
        y_pred = np.asarray(labels_pred, dtype=np.int64).ravel()
        if y_true.shape != y_pred.shape:
            raise LengthMismatch(f"{len(y_true)} true labels vs {len(y_pred)} predictions")
        for name, values in (("true", y_true), ("predicted", y_pred)):
            if values.size and (values.min() < 0 or values.max() >= self.k):
                raise LabelOutOfRange(f"{name} labels must lie in [0, {self.k})")
        if y_true.size == 0:
            return ConfusionMatrix(np.zeros((self.k, self.k), dtype=np.int64))
        return ConfusionMatrix(confusion_matrix(y_true, y_pred, labels=np.arange(self.k)))

    def calculate_precision(self, cm: ConfusionMatrix) -> List[float]:
        tp = cm.true_positives()
        predicted = tp + cm.false_positives()
        return [float(t / p) if p > 0 else 0.0 for t, p in zip(tp, predicted)]

    def calculate_recall(self, cm: ConfusionMatrix) -> List[Optional[float]]:
        tp = cm.true_positives()
        support = tp + cm.false_negatives()
        return [float(t / s) if s > 0 else None for t, s in zip(tp, support)]

    def calculate_f1(self, precision: Sequence[float], recall: Sequence[Optional[float]]) -> List[Optional[float]]:
        scores: List[Optional[float]] = []
        for p, r in zip(precision, recall):
            if r is None:
                scores.append(None)
            elif p + r == 0:
                scores.append(0.0)
            else:
                scores.append(2.0 * p * r / (p + r))
        return scores

    def calculate_all_metrics(self, cm: ConfusionMatrix) -> MetricReport:
        """
        Derive the full metric report.

        Raises:
            EmptyMatrix: the matrix holds no epochs.
        """
        if cm.total == 0:
            raise EmptyMatrix("Confusion matrix is empty")
        precision = self.calculate_precision(cm)
        recall = self.calculate_recall(cm)
        f1 = self.calculate_f1(precision, recall)
        scored = [f for f in f1 if f is not None]
        return MetricReport(
            accuracy=float(np.trace(cm.counts) / cm.total),
            precision=precision,
            recall=recall,
            f1=f1,
            macro_f1=float(sum(scored) / len(scored)),
            support=[int(s) for s in cm.counts.sum(axis=1)],
            categories=list(self.categories),
        )


# Package-level convenience functions
def confusion(labels_true: Sequence[int], labels_pred: Sequence[int], k: int) -> ConfusionMatrix:
    return SleepMetricsCalculator(k).calculate_confusion(labels_true, labels_pred)


def metrics(cm: ConfusionMatrix, categories: Optional[Sequence[str]] = None) -> MetricReport:
    return SleepMetricsCalculator(cm.k, categories).calculate_all_metrics(cm)


def majority_reference(labels: Sequence[int], k: int,
                       categories: Optional[Sequence[str]] = None) -> MetricReport:
    """Report of the constant predictor that always outputs the most frequent category."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyMatrix("No labels supplied")
    majority = int(np.argmax(np.bincount(labels, minlength=k)))
    cm = confusion(labels, np.full_like(labels, majority), k)
    return metrics(cm, categories)


def cv_aggregate(per_fold_reports: Sequence[MetricReport]) -> DataFrame:
    """
    Mean and standard deviation of every scalar metric across folds.

    Undefined (None) values are skipped. The standard deviation uses the
    population form.

    Returns:
        DataFrame indexed by metric name with columns ``mean``, ``std`` and
        ``folds`` (number of folds contributing).
    """
    if not per_fold_reports:
        raise EmptyMatrix("No fold reports supplied")
    table = pd.DataFrame([report.scalar_metrics() for report in per_fold_reports], dtype=float)
    summary = pd.DataFrame({
        "mean": table.mean(axis=0, skipna=True),
        "std": table.std(axis=0, ddof=0, skipna=True),
        "folds": table.notna().sum(axis=0),
    })
    summary.index.name = "metric"
    return summary
