"""Counterfactual unfairness, AUC and RMSE, overall and per racial group."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class PredictionPair:
    pair_id: int
    y_hat_b: float
    y_hat_w: float


@dataclass
class MetricsReport:
    cfu: float
    metric: float
    metric_white: Optional[float]
    metric_black: Optional[float]
    n: int
    metric_name: str = "AUC"

    def to_dict(self) -> dict:
        return asdict(self)


def cfu(pairs) -> float:
    """Mean absolute score difference across matched counterfactual pairs.

    ``pairs`` is a sequence of ``PredictionPair`` or an ``(n, 2)`` array of
    (Black score, White score).
    """
    if len(pairs) == 0:
        raise ValueError("cfu of an empty pair list")
    if isinstance(pairs[0], PredictionPair):
        arr = np.array([(p.y_hat_b, p.y_hat_w) for p in pairs], dtype=float)
    else:
        arr = np.asarray(pairs, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite prediction in pair list")
    return math.fsum(np.abs(arr[:, 0] - arr[:, 1])) / len(arr)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes")
    ranks = rankdata(scores)  # average ranks resolve ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def rmse(predicted, actual) -> float:
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.size == 0 or predicted.shape != actual.shape:
        raise ValueError("rmse needs two nonempty vectors of equal length")
    d = predicted - actual
    return math.sqrt(math.fsum(d * d) / d.size)


def _score(metric: str, predicted, actual) -> float:
    return auc(predicted, actual) if metric == "AUC" else rmse(predicted, actual)


def group_metrics(predictions, labels, groups, metric: str = "AUC") -> dict:
    """Metric per group tag; ``None`` where a group cannot be scored (single class)."""
    predictions = np.asarray(predictions, dtype=float)
    labels = np.asarray(labels, dtype=float)
    groups = np.asarray(groups, dtype=object)
    unknown = set(groups) - {"Black", "White"}
    if unknown:
        raise ValueError(f"unexpected group tags: {sorted(unknown)}")
    out = {}
    for g in ("White", "Black"):
        m = groups == g
        try:
            out[g] = _score(metric, predictions[m], labels[m])
        except ValueError:
            out[g] = None
    return out


def metrics_report(y_hat_b, y_hat_w, y_b, y_w, metric: str = "AUC") -> MetricsReport:
    """CFU and overall/per-group metric over the members of test pairs."""
    y_hat_b, y_hat_w = np.asarray(y_hat_b, float), np.asarray(y_hat_w, float)
    preds = np.concatenate([y_hat_b, y_hat_w])
    labels = np.concatenate([np.asarray(y_b, float), np.asarray(y_w, float)])
    tags = np.array(["Black"] * len(y_hat_b) + ["White"] * len(y_hat_w), dtype=object)
    per_group = group_metrics(preds, labels, tags, metric)
    return MetricsReport(
        cfu=cfu(np.column_stack([y_hat_b, y_hat_w])),
        metric=_score(metric, preds, labels),
        metric_white=per_group["White"],
        metric_black=per_group["Black"],
        n=len(y_hat_b),
        metric_name=metric,
    )
