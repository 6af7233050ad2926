"""Evaluation metrics."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def auc(scores, labels) -> float:
    """Mann-Whitney estimate of ROC AUC; tied scores share their average rank."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("one score per label")
    pos = y == 1
    n1 = int(pos.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC is undefined when only one class is present")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def accuracy(preds, labels) -> float:
    p = np.asarray(preds).ravel()
    y = np.asarray(labels).ravel()
    if p.shape != y.shape or y.size == 0:
        raise ValueError("one prediction per label, at least one label")
    return float(np.mean(p == y))


def log_loss(probs, labels, eps: float = 1e-12) -> float:
    """Mean cross-entropy; ``probs`` is (n, 1) for binary or (n, K)."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels).astype(int).ravel()
    if p.ndim == 1 or p.shape[1] == 1:
        q = np.clip(p.ravel(), eps, 1 - eps)
        return float(-np.mean(y * np.log(q) + (1 - y) * np.log(1 - q)))
    q = np.clip(p[np.arange(len(y)), y], eps, 1.0)
    return float(-np.mean(np.log(q)))


def test_metric(probs, labels) -> float:
    """AUC for binary outputs, accuracy for multiclass."""
    p = np.asarray(probs)
    if p.ndim == 1 or p.shape[1] == 1:
        return auc(p.ravel(), labels)
    return accuracy(p.argmax(axis=1), labels)
