"""Task metrics (accuracy, F1, MCC, Pearson, Spearman)."""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy.stats import rankdata


class MetricWarning(RuntimeWarning):
    """A metric was undefined (zero variance) and reported as 0."""


def _pair(predictions, labels):
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise ValueError("predictions and labels must be 1-D and of equal length")
    if p.size < 2:
        raise ValueError("need at least two predictions")
    return p, y


def accuracy(predictions, labels) -> float:
    p, y = _pair(predictions, labels)
    return float(np.mean(p == y))


def f1(predictions, labels, positive=1) -> float:
    p, y = _pair(predictions, labels)
    tp = np.sum((p == positive) & (y == positive))
    fp = np.sum((p == positive) & (y != positive))
    fn = np.sum((p != positive) & (y == positive))
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 0.0


def mcc(predictions, labels) -> float:
    """Matthews correlation; multi-class labels use the K-category generalization."""
    p, y = _pair(predictions, labels)
    classes = np.union1d(p, y)
    idx = {c: i for i, c in enumerate(classes.tolist())}
    k = len(classes)
    conf = np.zeros((k, k))
    for a, b in zip(y.tolist(), p.tolist()):
        conf[idx[a], idx[b]] += 1
    t = conf.sum(axis=1)
    pk = conf.sum(axis=0)
    c = np.trace(conf)
    s = conf.sum()
    num = c * s - t @ pk
    den = math.sqrt((s * s - pk @ pk) * (s * s - t @ t))
    if den == 0:
        warnings.warn("MCC undefined for constant predictions or labels; reporting 0", MetricWarning, stacklevel=2)
        return 0.0
    return float(num / den)


def mcc_from_counts(tp: int, tn: int, fp: int, fn: int) -> float:
    den = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return 0.0 if den == 0 else (tp * tn - fp * fn) / den


def pearson(predictions, labels) -> float:
    p, y = _pair(predictions, labels)
    p = p.astype(np.float64)
    y = y.astype(np.float64)
    pc = p - p.mean()
    yc = y - y.mean()
    den = math.sqrt(float(pc @ pc) * float(yc @ yc))
    if den == 0:
        warnings.warn("correlation undefined for zero-variance input; reporting 0", MetricWarning, stacklevel=2)
        return 0.0
    return float(np.clip(pc @ yc / den, -1.0, 1.0))


def spearman(predictions, labels) -> float:
    p, y = _pair(predictions, labels)
    return pearson(rankdata(p), rankdata(y))


METRICS = {
    "accuracy": accuracy,
    "f1": f1,
    "mcc": mcc,
    "pearson": pearson,
    "spearman": spearman,
    "acc_f1": lambda p, y: (accuracy(p, y) + f1(p, y)) / 2.0,
    "pearson_spearman": lambda p, y: (pearson(p, y) + spearman(p, y)) / 2.0,
}


def metric(kind: str, predictions, labels) -> float:
    try:
        fn = METRICS[kind]
    except KeyError:
        raise ValueError(f"unknown metric {kind!r}; choose from {sorted(METRICS)}") from None
    return fn(predictions, labels)
