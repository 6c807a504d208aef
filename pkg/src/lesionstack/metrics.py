"""Threshold metrics and ROC analysis for binary scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np

from lesionstack.constants import DECISION_THRESHOLD
from lesionstack.exceptions import DataError

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray


@dataclass(frozen=True)
class ConfusionCounts:
    """Counts of a thresholded binary prediction."""

    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        """Reject negative counts."""
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise DataError(f"confusion counts must be >= 0: {self}")

    @property
    def total(self) -> int:
        """Number of samples."""
        return self.tp + self.tn + self.fp + self.fn


def _binary(labels: ArrayLike) -> NDArray[np.bool_]:
    array = np.asarray(labels).reshape(-1)
    if array.dtype == np.bool_:
        return array
    if not np.all((array == 0) | (array == 1)):
        raise DataError("labels must be binary (0/1)")
    return array == 1


def _scores(scores: ArrayLike, size: int) -> NDArray[np.float64]:
    array = np.asarray(scores, dtype=np.float64).reshape(-1)
    if array.size != size:
        raise DataError(f"{array.size} scores do not match {size} labels")
    if not np.all(np.isfinite(array)):
        raise DataError("scores must be finite")
    return array


def confusion(
    scores: ArrayLike,
    labels: ArrayLike,
    threshold: float = DECISION_THRESHOLD,
) -> ConfusionCounts:
    """Count outcomes, predicting positive iff ``score >= threshold``."""
    truth = _binary(labels)
    predicted = _scores(scores, truth.size) >= threshold
    return ConfusionCounts(
        tp=int(np.sum(predicted & truth)),
        tn=int(np.sum(~predicted & ~truth)),
        fp=int(np.sum(predicted & ~truth)),
        fn=int(np.sum(~predicted & truth)),
    )


def sensitivity(counts: ConfusionCounts) -> float | None:
    """TP / (TP + FN), or None without positives."""
    positives = counts.tp + counts.fn
    return counts.tp / positives if positives else None


def specificity(counts: ConfusionCounts) -> float | None:
    """TN / (TN + FP), or None without negatives."""
    negatives = counts.tn + counts.fp
    return counts.tn / negatives if negatives else None


def accuracy(counts: ConfusionCounts) -> float | None:
    """(TP + TN) / total, or None for no samples."""
    return (counts.tp + counts.tn) / counts.total if counts.total else None


@dataclass(frozen=True)
class RocPoint:
    """One operating point; ``threshold`` is the lowest score called positive."""

    threshold: float
    tpr: float
    fpr: float


@dataclass(frozen=True)
class RocCurve:
    """Operating points by ascending false-positive rate, plus the area."""

    points: tuple[RocPoint, ...]
    auc: float

    @property
    def fpr(self) -> NDArray[np.float64]:
        """False-positive rates of the points."""
        return np.asarray([p.fpr for p in self.points])

    @property
    def tpr(self) -> NDArray[np.float64]:
        """True-positive rates of the points."""
        return np.asarray([p.tpr for p in self.points])


def roc_auc(scores: ArrayLike, labels: ArrayLike) -> RocCurve:
    """ROC curve over distinct scores with its trapezoidal area.

    Tied scores form one operating point. The area is accumulated in
    integers as ``sum((fp_i - fp_{i-1}) * (tp_i + tp_{i-1}))``, which is
    twice the Mann-Whitney U with ties counting one half, and divided by
    ``2 * P * N`` once at the end.

    Raises:
        DataError: If only one class is present.
    """
    truth = _binary(labels)
    values = _scores(scores, truth.size)
    n_pos = int(truth.sum())
    n_neg = int(truth.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError(
            f"ROC needs both classes, got {n_pos} positive and {n_neg} "
            "negative samples",
        )
    order = np.argsort(-values, kind="stable")
    sorted_values = values[order]
    sorted_truth = truth[order]
    # Last index of each run of equal scores.
    ends = np.flatnonzero(np.diff(sorted_values) != 0)
    ends = np.append(ends, sorted_values.size - 1)
    cum_tp = np.cumsum(sorted_truth)[ends]
    cum_fp = np.cumsum(~sorted_truth)[ends]

    points = [RocPoint(threshold=float("inf"), tpr=0.0, fpr=0.0)]
    twice_area = 0
    prev_tp = prev_fp = 0
    for end, tp, fp in zip(ends, cum_tp, cum_fp, strict=True):
        tp, fp = int(tp), int(fp)
        twice_area += (fp - prev_fp) * (tp + prev_tp)
        prev_tp, prev_fp = tp, fp
        points.append(
            RocPoint(
                threshold=float(sorted_values[end]),
                tpr=tp / n_pos,
                fpr=fp / n_neg,
            ),
        )
    return RocCurve(points=tuple(points), auc=twice_area / (2 * n_pos * n_neg))


@dataclass(frozen=True)
class BinaryMetrics:
    """Accuracy, AUC, sensitivity and specificity of one evaluation.

    Any value undefined on the given samples is ``None``.
    """

    count: int
    accuracy: float | None
    auc: float | None
    sensitivity: float | None
    specificity: float | None
    curve: RocCurve | None = None

    def to_dict(self) -> dict[str, Any]:
        """Scalar fields only."""
        return {
            "count": self.count,
            "accuracy": self.accuracy,
            "auc": self.auc,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
        }


def summarize(
    scores: ArrayLike,
    labels: ArrayLike,
    threshold: float = DECISION_THRESHOLD,
) -> BinaryMetrics:
    """Threshold metrics and, when both classes occur, the ROC curve."""
    truth = _binary(labels)
    counts = confusion(scores, truth, threshold)
    curve = None
    if 0 < truth.sum() < truth.size:
        curve = roc_auc(scores, truth)
    return BinaryMetrics(
        count=counts.total,
        accuracy=accuracy(counts),
        auc=curve.auc if curve is not None else None,
        sensitivity=sensitivity(counts),
        specificity=specificity(counts),
        curve=curve,
    )
