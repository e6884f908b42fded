"""Agreement metrics: quadratic weighted kappa, confusion matrices, and
per-class accuracy over the 5-level ordinal grade scale."""

from __future__ import annotations

import logging

import numpy as np

from .errors import InvalidInputError

logger = logging.getLogger(__name__)

N_GRADES = 5


def confusion(preds, labels) -> np.ndarray:
    """5x5 count matrix, rows = true grade, columns = predicted grade."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1 or len(preds) < 1:
        raise InvalidInputError("preds and labels must be equal-length 1-D sequences, length >= 1")
    if preds.min() < 0 or preds.max() >= N_GRADES or labels.min() < 0 or labels.max() >= N_GRADES:
        raise InvalidInputError("grades must lie in 0..4")
    cm = np.zeros((N_GRADES, N_GRADES), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def qwk(preds, labels) -> float:
    """Quadratic weighted kappa.

    kappa = 1 - sum(w * O) / sum(w * E) with w_ij = (i-j)^2 / (K-1)^2, O the
    observed confusion matrix, and E the outer product of the label and
    prediction marginals scaled to the same total. A zero denominator (both
    marginals concentrated on one agreeing grade) returns 1.0.
    """
    cm = confusion(preds, labels).astype(np.float64)
    n = cm.sum()
    idx = np.arange(N_GRADES, dtype=np.float64)
    w = (idx[:, None] - idx[None, :]) ** 2 / (N_GRADES - 1) ** 2
    expected = np.outer(cm.sum(axis=1), cm.sum(axis=0)) / n
    denom = float((w * expected).sum())
    if denom == 0.0:
        logger.warning("qwk denominator is zero (constant agreeing sequences); returning 1.0")
        return 1.0
    return 1.0 - float((w * cm).sum()) / denom


def per_class_accuracy(cm: np.ndarray) -> np.ndarray:
    """Diagonal over row sum per grade; grades with no samples report NaN."""
    cm = np.asarray(cm, dtype=np.float64)
    rows = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(rows > 0, np.diag(cm) / np.where(rows > 0, rows, 1.0), np.nan)
    return acc


def format_confusion(cm: np.ndarray) -> str:
    """Aligned plain-text rendering with marginals."""
    cm = np.asarray(cm)
    width = max(5, len(str(int(cm.max()))) + 1)
    header = "true\\pred" + "".join(f"{g:>{width}}" for g in range(N_GRADES)) + f"{'total':>{width + 2}}"
    lines = [header]
    for g in range(N_GRADES):
        row = f"{g:>9}" + "".join(f"{int(v):>{width}}" for v in cm[g]) + f"{int(cm[g].sum()):>{width + 2}}"
        lines.append(row)
    lines.append(f"{'total':>9}" + "".join(f"{int(v):>{width}}" for v in cm.sum(axis=0))
                 + f"{int(cm.sum()):>{width + 2}}")
    return "\n".join(lines)


def confusion_csv(cm: np.ndarray) -> str:
    """CSV rendering: header row of predicted grades, one row per true grade."""
    cm = np.asarray(cm)
    lines = ["true_grade," + ",".join(f"pred_{g}" for g in range(N_GRADES))]
    for g in range(N_GRADES):
        lines.append(f"{g}," + ",".join(str(int(v)) for v in cm[g]))
    return "\n".join(lines) + "\n"
