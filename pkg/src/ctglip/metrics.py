"""Evaluation metrics: top-1 accuracy, PPV/sensitivity/F1, rank AUC and Dice.

Undefined ratios are returned as ``None`` rather than 0 so that macro
averages are not silently biased.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata


class UndefinedMetric(ValueError):
    pass


def top1_accuracy(pred: Sequence[int], truth: Sequence[int]) -> float:
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(truth)} labels")
    if len(pred) == 0:
        raise ValueError("top-1 accuracy of an empty list is undefined")
    return float(np.mean(np.asarray(pred) == np.asarray(truth)))


def f1_score(ppv: float | None, sensitivity: float | None) -> float | None:
    if ppv is None or sensitivity is None:
        return None
    if ppv + sensitivity == 0:
        return 0.0
    return 2 * ppv * sensitivity / (ppv + sensitivity)


@dataclass(frozen=True)
class BinaryStats:
    tp: int
    fp: int
    tn: int
    fn: int
    ppv: float | None
    sensitivity: float | None
    f1: float | None

    def to_json(self) -> dict:
        return asdict(self)


def _outcomes(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1D and of equal length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(bool)


def binary_stats(scores, labels, threshold: float = 0.5) -> BinaryStats:
    """Counts and ratios with ``score > threshold`` taken as a positive call."""
    scores, labels = _outcomes(scores, labels)
    pred = scores > threshold
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    tn = int(np.sum(~pred & ~labels))
    fn = int(np.sum(~pred & labels))
    ppv = tp / (tp + fp) if tp + fp else None
    sens = tp / (tp + fn) if tp + fn else None
    return BinaryStats(tp, fp, tn, fn, ppv, sens, f1_score(ppv, sens))


def auc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counted half."""
    scores, labels = _outcomes(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both positive and negative cases")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def dice_score(pred_mask, true_mask, class_id: int = 1) -> float:
    """Hard Dice overlap for one class; 1.0 when the class is absent from both."""
    pred_mask = np.asarray(pred_mask)
    true_mask = np.asarray(true_mask)
    if pred_mask.shape != true_mask.shape:
        raise ValueError(f"shape mismatch {pred_mask.shape} vs {true_mask.shape}")
    a = pred_mask == class_id
    b = true_mask == class_id
    size = int(a.sum()) + int(b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.sum(a & b)) / size


def aggregate_detection(rows: Iterable[dict], threshold: float = 0.5) -> dict:
    """Micro (pooled) and macro (per-abnormality mean) detection metrics.

    Each row needs ``abnormality``, ``score`` and ``ground_truth`` (0/1).
    """
    rows = list(rows)
    groups: dict[str, list[dict]] = defaultdict(list)
    for r in rows:
        groups[r["abnormality"]].append(r)

    def _summary(rs):
        s = [r["score"] for r in rs]
        y = [int(r["ground_truth"]) for r in rs]
        stats = binary_stats(s, y, threshold)
        try:
            a = auc(s, y)
        except UndefinedMetric:
            a = None
        return {"n": len(rs), "ppv": stats.ppv, "sensitivity": stats.sensitivity, "f1": stats.f1, "auc": a}

    per = {name: _summary(rs) for name, rs in sorted(groups.items())}
    macro = {}
    for key in ("ppv", "sensitivity", "f1", "auc"):
        vals = [v[key] for v in per.values() if v[key] is not None]
        macro[key] = float(np.mean(vals)) if vals else None
    micro = _summary(rows) if rows else {"n": 0, "ppv": None, "sensitivity": None, "f1": None, "auc": None}
    return {"micro": micro, "macro": macro, "per_abnormality": per}
