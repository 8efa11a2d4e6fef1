"""Segmentation and label-set metrics, Hungarian matching, label mixing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment


def confusion_matrix(gt, pred, class_count: int) -> np.ndarray:
    """Counts with rows = ground truth, columns = prediction."""
    gt = np.asarray(gt).ravel()
    pred = np.asarray(pred).ravel()
    if gt.shape != pred.shape:
        raise ValueError("gt and pred must have the same number of elements")
    idx = gt * class_count + pred
    return np.bincount(idx, minlength=class_count * class_count).reshape(class_count, class_count)


def miou(cm, include_background: bool = True) -> tuple[float, np.ndarray]:
    """Mean IoU over classes with a nonzero union, and the per-class IoU.

    Classes with an empty union get NaN in the per-class vector.
    """
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.size == 0:
        raise ValueError("confusion matrix must be square and non-empty")
    if cm.sum() == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    use = iou if include_background else iou[1:]
    return float(np.nanmean(use)), iou


@dataclass
class Assignment:
    mapping: np.ndarray
    score: float


def hungarian_match(score, rtol: float = 1e-12) -> Assignment:
    """Permutation maximizing the total score of a square matrix.

    Among optimal permutations the lexicographically smallest column sequence
    is returned.
    """
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2 or score.shape[0] != score.shape[1]:
        raise ValueError(f"score matrix must be square, got {score.shape}")
    k = score.shape[0]
    if k == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    best = _best_total(score)
    tol = rtol * max(1.0, abs(best)) * k
    rows = list(range(k))
    cols = list(range(k))
    mapping = np.empty(k, dtype=np.int64)
    fixed = 0.0
    for r in range(k):
        rest_rows = rows[1:]
        for c in cols:
            rest_cols = [x for x in cols if x != c]
            sub = score[np.ix_(rest_rows, rest_cols)] if rest_rows else np.zeros((0, 0))
            total = fixed + score[r, c] + (_best_total(sub) if rest_rows else 0.0)
            if total >= best - tol:
                mapping[r] = c
                fixed += score[r, c]
                cols = rest_cols
                break
        rows = rest_rows
    return Assignment(mapping, float(score[np.arange(k), mapping].sum()))


def _best_total(score):
    r, c = linear_sum_assignment(score, maximize=True)
    return float(score[r, c].sum())


def match_clusters(cluster_ids, class_ids, n_clusters: int, n_classes: int) -> np.ndarray:
    """Map cluster ids to class ids by maximum co-occurrence.

    Rectangular problems are padded with zero-score dummies; clusters left on
    a dummy class map to -1.
    """
    k = max(n_clusters, n_classes)
    score = np.zeros((k, k))
    for a, b in zip(cluster_ids, class_ids):
        score[a, b] += 1
    assign = hungarian_match(score)
    out = assign.mapping[:n_clusters].copy()
    out[out >= n_classes] = -1
    return out


def f1_scores(pred_sets: Sequence, gt_sets: Sequence) -> tuple[float, float]:
    """Micro and macro F1 over multi-label sets.

    Macro averages over classes that appear in either the predictions or the
    ground truth.
    """
    if len(pred_sets) != len(gt_sets):
        raise ValueError("prediction and ground-truth lists differ in length")
    tp, fp, fn = {}, {}, {}
    for pred, gt in zip(pred_sets, gt_sets):
        pred, gt = set(pred), set(gt)
        for c in pred | gt:
            tp.setdefault(c, 0)
            fp.setdefault(c, 0)
            fn.setdefault(c, 0)
        for c in pred & gt:
            tp[c] += 1
        for c in pred - gt:
            fp[c] += 1
        for c in gt - pred:
            fn[c] += 1
    if not tp:
        return 0.0, 0.0
    TP, FP, FN = sum(tp.values()), sum(fp.values()), sum(fn.values())
    micro = 2 * TP / (2 * TP + FP + FN) if TP else 0.0
    per_class = [2 * tp[c] / (2 * tp[c] + fp[c] + fn[c]) if tp[c] else 0.0 for c in tp]
    return float(micro), float(np.mean(per_class))


def beta_mix(gt_labels: Sequence, pseudo_labels: Sequence, beta: float, seed: int) -> tuple[list, np.ndarray]:
    """Replace ``round(beta * T)`` ground-truth label sets with pseudo labels.

    Returns the mixed list and the sorted indices that were replaced.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if len(gt_labels) != len(pseudo_labels):
        raise ValueError("label lists must be aligned")
    t = len(gt_labels)
    m = int(math.floor(beta * t + 0.5))
    order = np.random.default_rng(np.random.SeedSequence([seed, 0xBE7A])).permutation(t)
    replaced = np.sort(order[:m])
    mixed = [frozenset(x) for x in gt_labels]
    for i in replaced:
        mixed[i] = frozenset(pseudo_labels[i])
    return mixed, replaced
