"""Evaluation metrics: accuracy, macro precision/recall/F1, tie-corrected
AUROC (binary and macro one-vs-rest), and fold aggregation."""

from __future__ import annotations

import numpy as np

REPORT_KEYS = ("accuracy", "precision_macro", "recall_macro", "f1_macro", "auroc")


class MetricError(ValueError):
    """Metric undefined for the given inputs (e.g. single-class AUROC)."""


def _midranks(x):
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc_binary(scores, labels):
    """Mann-Whitney statistic P(score+ > score-) + 0.5 P(tie), via midranks."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC undefined: both classes must be present")
    ranks = _midranks(scores)
    return (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auroc_macro_ovr(prob_matrix, labels, num_classes):
    """Unweighted mean of one-vs-rest binary AUROCs per class column."""
    prob_matrix = np.asarray(prob_matrix, dtype=float)
    labels = np.asarray(labels)
    present = set(np.unique(labels).tolist())
    if present != set(range(num_classes)):
        raise MetricError(f"AUROC macro needs every class present, got {sorted(present)}")
    aucs = [auroc_binary(prob_matrix[:, c], (labels == c).astype(int))
            for c in range(num_classes)]
    return float(np.mean(aucs))


def macro_prf(preds, labels, num_classes):
    """Per-class precision/recall/F1 with 0/0 := 0, unweighted class means."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise MetricError(f"preds/labels length mismatch: {preds.shape} vs {labels.shape}")
    precisions, recalls, f1s = [], [], []
    for c in range(num_classes):
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        precisions.append(p)
        recalls.append(r)
        f1s.append(f)
    return float(np.mean(precisions)), float(np.mean(recalls)), float(np.mean(f1s))


def eval_report(probs, labels, num_classes):
    """Full metric block for one model output on one split."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels)
    preds = probs.argmax(axis=1)
    p, r, f = macro_prf(preds, labels, num_classes)
    if num_classes == 2:
        auc = auroc_binary(probs[:, 1], (labels == 1).astype(int))
    else:
        auc = auroc_macro_ovr(probs, labels, num_classes)
    return {
        "accuracy": float(np.mean(preds == labels)),
        "precision_macro": p,
        "recall_macro": r,
        "f1_macro": f,
        "auroc": float(auc),
    }


def aggregate_folds(reports):
    """Mean and sample (n-1) standard deviation over per-fold reports."""
    if len(reports) < 2:
        raise MetricError("fold aggregation needs at least 2 folds")
    out = {"folds": list(reports)}
    for key in REPORT_KEYS:
        vals = np.array([r[key] for r in reports], dtype=float)
        out[key] = float(vals.mean())
        out[f"{key}_std"] = float(vals.std(ddof=1))
    return out
