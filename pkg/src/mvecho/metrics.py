"""Evaluation metrics: accuracy, ROC AUC and column-normalised confusion matrices."""

from __future__ import annotations

import numpy as np

from mvecho.errors import DataError


def accuracy(y_true, y_pred):
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise DataError("accuracy needs two equal, non-empty label arrays")
    return float(np.mean(y_true == y_pred))


def roc_curve(y_true, scores):
    """False/true positive rates at every distinct threshold, from (0, 0) to (1, 1)."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # keep the last index of each run of equal scores so ties move together
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return fpr, tpr


def roc_auc(y_true, scores):
    """Trapezoidal area under the ROC curve; ties contribute half, as in the rank statistic."""
    fpr, tpr = roc_curve(y_true, scores)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def macro_auc(y_true, probs):
    """One-vs-rest AUC averaged over classes that have both positives and negatives."""
    y = np.asarray(y_true)
    probs = np.asarray(probs)
    aucs = [roc_auc(y == c, probs[:, c]) for c in range(probs.shape[1]) if 0 < np.sum(y == c) < len(y)]
    if not aucs:
        raise DataError("no class has both positives and negatives")
    return float(np.mean(aucs))


def confusion_matrix(y_true, y_pred, num_classes):
    """Counts with rows = predicted class and columns = true class."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(out, (y_pred, y_true), 1)
    return out


def normalize_columns(counts):
    """Divide each column (true class) by its total; empty columns stay zero."""
    counts = np.asarray(counts, dtype=np.float64)
    totals = counts.sum(axis=0, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def evaluate(y_true, probs, labels, head):
    """Accuracy, AUC and confusion matrices for one split.

    Binary AUC scores the positive class. For three classes the AUC is the
    disease-vs-negative AUC on ``1 - p(negative)``, with the one-vs-rest macro
    average reported alongside.
    """
    y_true = np.asarray(y_true)
    probs = np.asarray(probs)
    k = probs.shape[1]
    report = {"n": int(len(y_true)), "accuracy": accuracy(y_true, labels)}
    positive = y_true > 0
    if 0 < positive.sum() < len(y_true):
        report["auc"] = roc_auc(positive, 1.0 - probs[:, 0])
    else:
        report["auc"] = None
    if k > 2:
        try:
            report["macro_auc"] = macro_auc(y_true, probs)
        except DataError:
            report["macro_auc"] = None
    counts = confusion_matrix(y_true, labels, k)
    report["confusion"] = counts.tolist()
    report["confusion_normalized"] = normalize_columns(counts).tolist()
    return report
