"""MAE, 7-class accuracy/F1 and binary accuracy/F1 over sentiment values in -3..+3."""

from __future__ import annotations

import json
from fractions import Fraction
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np

from .errors import DataError, PreconditionError

NEGATIVE, NONNEGATIVE = 0, 1


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    acc7: float
    f1_7: float
    acc2: float
    f1_binary: float
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _pair(pred, true) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    true = np.asarray(true, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise PreconditionError(f"prediction/label length mismatch: {pred.size} vs {true.size}")
    if pred.size == 0:
        raise PreconditionError("metrics need at least one sample")
    return pred, true


def _check_values(*arrays: np.ndarray) -> None:
    for a in arrays:
        if a.size and (a.min() < -3 or a.max() > 3):
            raise DataError(f"sentiment value outside -3..3: {int(a.min()) if a.min() < -3 else int(a.max())}")


def mae(pred, true) -> float:
    pred, true = _pair(pred, true)
    _check_values(pred, true)
    return int(np.abs(pred - true).sum()) / pred.size


def accuracy(pred, true) -> float:
    pred, true = _pair(pred, true)
    return int((pred == true).sum()) / pred.size


def acc7(pred, true) -> float:
    pred, true = _pair(pred, true)
    _check_values(pred, true)
    return accuracy(pred, true)


def f1_scores(pred, true, labels) -> list:
    """Per-label F1 as exact fractions; 0 where precision + recall is 0."""
    pred, true = _pair(pred, true)
    out = []
    for c in labels:
        tp = int(np.sum((pred == c) & (true == c)))
        fp = int(np.sum((pred == c) & (true != c)))
        fn = int(np.sum((pred != c) & (true == c)))
        out.append(Fraction(0) if tp == 0 else Fraction(2 * tp, 2 * tp + fp + fn))
    return out


def f1_weighted(pred, true, n_classes: int = 7, average: str = "weighted") -> float:
    """Support-weighted (default) or macro F1.

    Seven classes means the sentiment values -3..3; any other ``n_classes``
    means indices ``0..n_classes-1``. Macro averaging covers classes present in
    either predictions or labels.
    """
    pred, true = _pair(pred, true)
    labels = np.arange(-3, 4) if n_classes == 7 else np.arange(n_classes)
    if not (np.isin(pred, labels).all() and np.isin(true, labels).all()):
        raise DataError(f"values outside class range {labels[0]}..{labels[-1]}")
    f1 = f1_scores(pred, true, labels)
    # exact rational arithmetic, rounded once at the end
    if average == "weighted":
        support = [int(np.sum(true == c)) for c in labels]
        return float(sum(f * s for f, s in zip(f1, support)) / sum(support))
    if average == "macro":
        present = [f for f, c in zip(f1, labels) if np.any(pred == c) or np.any(true == c)]
        return float(sum(present) / len(present))
    raise ValueError(f"unknown average {average!r}")


def binarize(values) -> np.ndarray:
    """Negative (0) for value < 0, nonnegative (1) otherwise."""
    values = np.asarray(values, dtype=np.int64)
    _check_values(values)
    return np.where(values < 0, NEGATIVE, NONNEGATIVE)


def binary_f1(pred_bin, true_bin, positive: int = NONNEGATIVE) -> float:
    return float(f1_scores(pred_bin, true_bin, [positive])[0])


def report(pred, true, f1_average: str = "weighted", exclude_neutral: bool = False) -> MetricsReport:
    """All five metrics.

    With ``exclude_neutral`` the binary metrics drop samples whose label is 0;
    by default neutral counts as nonnegative.
    """
    pred, true = _pair(pred, true)
    _check_values(pred, true)
    keep = true != 0 if exclude_neutral else np.ones(true.shape, dtype=bool)
    if not keep.any():
        raise PreconditionError("no non-neutral samples left for binary metrics")
    pb, tb = binarize(pred[keep]), binarize(true[keep])
    return MetricsReport(
        mae=mae(pred, true),
        acc7=accuracy(pred, true),
        f1_7=f1_weighted(pred, true, 7, f1_average),
        acc2=accuracy(pb, tb),
        f1_binary=binary_f1(pb, tb),
        n_samples=int(pred.size),
    )
