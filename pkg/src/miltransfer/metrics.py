"""Evaluation metrics and bootstrap uncertainty.

All metrics are pure functions over per-bag records.  AUROC follows the
Mann-Whitney formulation (ties count one half); balanced accuracy averages
per-class recall over the classes present; quadratic weighted kappa uses
squared rank-distance weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, UndefinedMetricError


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError("scores and labels must be equal-length vectors")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auroc needs both classes present")
    ranks = rankdata(scores)  # average ranks handle ties as 1/2
    r_pos = ranks[labels == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def balanced_accuracy(preds, labels, n_classes: int) -> float:
    """Mean per-class recall; classes absent from the labels are excluded."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("empty input")
    recalls = []
    for c in range(n_classes):
        mask = labels == c
        if mask.any():
            recalls.append(float((preds[mask] == c).mean()))
    return float(np.mean(recalls))


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(np.asarray(labels), np.asarray(preds)):
        m[int(t), int(p)] += 1
    return m


def quadratic_weighted_kappa(preds, labels, n_classes: int) -> float:
    """Cohen's kappa with (i-j)^2 / (C-1)^2 disagreement weights."""
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    if labels.size == 0:
        raise DataError("empty input")
    observed = confusion_matrix(preds, labels, n_classes).astype(np.float64)
    n = observed.sum()
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / n
    idx = np.arange(n_classes, dtype=np.float64)
    w = (idx[:, None] - idx[None, :]) ** 2 / (n_classes - 1) ** 2
    denom = float((w * expected).sum())
    if denom == 0.0:
        return 1.0  # zero expected disagreement: perfect degenerate agreement
    return float(1.0 - (w * observed).sum() / denom)


def metric_fn(metric: str, n_classes: int):
    """Callable (labels, values) -> float for a named task metric.

    ``values`` are scores for auroc and argmax predictions otherwise.
    """
    if metric == "auroc":
        return lambda labels, values: auroc(values, labels)
    if metric == "balanced_accuracy":
        return lambda labels, values: balanced_accuracy(values, labels, n_classes)
    if metric == "quadratic_weighted_kappa":
        return lambda labels, values: quadratic_weighted_kappa(values, labels, n_classes)
    raise DataError(f"unknown metric {metric!r}")


def bootstrap(labels, values, fn, n_bootstrap: int = 1000, seed: int = 0):
    """Resample bags with replacement and return (mean, std, skipped).

    Resamples for which ``fn`` is undefined (e.g. one-class AUROC draws)
    are skipped and counted rather than imputed.
    """
    labels = np.asarray(labels)
    values = np.asarray(values)
    if labels.shape[0] < 2:
        raise DataError("bootstrap needs at least 2 records")
    rng = np.random.default_rng(seed)
    n = labels.shape[0]
    stats = []
    skipped = 0
    for _ in range(n_bootstrap):
        idx = rng.integers(0, n, size=n)
        try:
            stats.append(fn(labels[idx], values[idx]))
        except UndefinedMetricError:
            skipped += 1
    if not stats:
        raise UndefinedMetricError("every bootstrap resample was degenerate")
    arr = np.asarray(stats)
    return float(arr.mean()), float(arr.std()), skipped


@dataclass
class EvalResult:
    metric_name: str
    value: float
    bootstrap_std: float
    n_bootstrap: int
    skipped: int
    bag_ids: list[str] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)  # metric input values
    context: dict = field(default_factory=dict)        # arch, task, init, seed...

    def to_json(self) -> str:
        payload = {
            "metric": self.metric_name,
            "value": self.value,
            "std": self.bootstrap_std,
            "n_bootstrap": self.n_bootstrap,
            "skipped": self.skipped,
            "bag_ids": self.bag_ids,
            "labels": self.labels,
            "scores": self.scores,
            "context": self.context,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalResult":
        d = json.loads(text)
        return cls(d["metric"], d["value"], d["std"], d["n_bootstrap"], d["skipped"],
                   d.get("bag_ids", []), d.get("labels", []), d.get("scores", []),
                   d.get("context", {}))


def evaluate_records(metric: str, n_classes: int, bag_ids, labels, values,
                     n_bootstrap: int = 1000, seed: int = 0,
                     context: dict | None = None) -> EvalResult:
    """Point estimate plus bootstrap std for per-bag records."""
    fn = metric_fn(metric, n_classes)
    value = fn(np.asarray(labels), np.asarray(values))
    if len(labels) >= 2 and n_bootstrap > 0:
        _, std, skipped = bootstrap(labels, values, fn, n_bootstrap, seed)
    else:
        std, skipped = 0.0, 0
    return EvalResult(metric, float(value), std, n_bootstrap, skipped,
                      list(bag_ids), [int(x) for x in labels],
                      [float(x) for x in values], context or {})
