"""Evaluation metrics: hard-binned calibration error, macro F1, ROC AUC."""

from __future__ import annotations

import numpy as np


def reliability_bins(confidences, labels, n_bins: int = 15):
    """Hard-binned reliability data: per-bin (confidence, accuracy, mass)."""
    confidences = np.asarray(confidences, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if confidences.size == 0:
        raise ValueError("no confidences to bin")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.digitize(confidences, edges[1:-1]), 0, n_bins - 1)
    conf = np.zeros(n_bins)
    acc = np.zeros(n_bins)
    mass = np.zeros(n_bins)
    for b in range(n_bins):
        sel = idx == b
        if not np.any(sel):
            continue
        mass[b] = sel.mean()
        conf[b] = confidences[sel].mean()
        acc[b] = labels[sel].mean()
    return conf, acc, mass


def hard_ece(confidences, labels, n_bins: int = 15) -> float:
    conf, acc, mass = reliability_bins(confidences, labels, n_bins)
    return float(np.sum(mass * np.abs(acc - conf)))


def macro_f1(y_true, y_pred, classes=None) -> float:
    """Unweighted mean of per-class F1; absent predictions score 0."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if classes is None:
        classes = np.unique(y_true)
    scores = []
    for c in classes:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores)) if scores else 0.0


def roc_auc(scores, labels) -> float:
    """Rank-based ROC AUC (Mann-Whitney U with midranks for ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty_like(scores)
    ranks[order] = np.arange(1, scores.size + 1, dtype=np.float64)
    # average ranks over ties
    sorted_scores = scores[order]
    start = 0
    for end in range(1, scores.size + 1):
        if end == scores.size or sorted_scores[end] != sorted_scores[start]:
            if end - start > 1:
                ranks[order[start:end]] = 0.5 * (start + 1 + end)
            start = end
    rank_sum = ranks[labels].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
