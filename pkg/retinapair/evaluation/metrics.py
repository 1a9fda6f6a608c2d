"""Ranking metrics for binary tasks and error metrics for age regression."""

from typing import Dict, Tuple

import numpy as np
from scipy.stats import rankdata

from retinapair.errors import ValidationError


def _binary_inputs(
    scores: np.ndarray, labels: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValidationError(
            f"scores and labels differ in length: {scores.size} vs {labels.size}"
        )
    if not np.all(np.isfinite(scores)):
        raise ValidationError("scores must be finite")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("labels must be binary (0 or 1)")
    labels = labels.astype(bool)
    if labels.all() or not labels.any():
        raise ValidationError("both classes must be present")
    return scores, labels


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney statistic on average ranks; tied pairs count one half."""
    scores, labels = _binary_inputs(scores, labels)
    ranks = rankdata(scores, method="average")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Step-wise area under the precision-recall curve.

    Thresholds sweep distinct scores in descending order; tied scores enter
    together as one step.
    """
    scores, labels = _binary_inputs(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]

    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(~sorted_labels)
    # last index of each tie group
    ends = np.r_[np.nonzero(np.diff(sorted_scores))[0], sorted_scores.size - 1]
    tp, fp = tp[ends], fp[ends]

    precision = tp / (tp + fp)
    recall = tp / labels.sum()
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * precision))


def prevalence(labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(labels, dtype=np.float64)))


def regression_errors(predicted: np.ndarray, target: np.ndarray) -> Dict[str, float]:
    predicted = np.asarray(predicted, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if predicted.shape != target.shape or predicted.size == 0:
        raise ValidationError("regression inputs must be non-empty and equally long")
    error = predicted - target
    return {
        "mae": float(np.mean(np.abs(error))),
        "rmse": float(np.sqrt(np.mean(error**2))),
    }
