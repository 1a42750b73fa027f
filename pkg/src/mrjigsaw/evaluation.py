"""Accuracy, rank AUC and percentile-bootstrap confidence intervals."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionSet:
    ids: tuple
    labels: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("prediction ids must be unique")
        if len(self.ids) != len(self.labels) or len(self.labels) != len(self.scores):
            raise ValueError("ids, labels and scores differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @classmethod
    def from_arrays(cls, labels, scores, ids: Sequence | None = None) -> "PredictionSet":
        labels = np.asarray(labels)
        scores = np.asarray(scores, dtype=float)
        return cls(tuple(ids if ids is not None else range(len(labels))), labels, scores)


def accuracy(labels, scores, threshold: float = 0.5) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    pred = (np.asarray(scores) >= threshold).astype(int)
    return float(np.mean(pred == labels))


def auc(labels, scores) -> float:
    """P(score of a random positive > score of a random negative), ties count one half."""
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(np.asarray(scores, dtype=float))
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


METRICS: dict[str, Callable] = {"accuracy": accuracy, "auc": auc}


@dataclass(frozen=True)
class MetricsReport:
    metric: str
    point: float
    low: float
    high: float
    level: float
    n_bootstrap: int
    seed: int
    n_examples: int
    degenerate_redraws: int = 0
    method: str = "nonparametric percentile bootstrap over examples"

    def __post_init__(self):
        if not self.low <= self.point <= self.high:
            raise ValueError(f"CI [{self.low}, {self.high}] does not contain {self.point}")

    def to_json(self) -> dict:
        return asdict(self)

    def formatted(self, scale: float = 1.0, digits: int = 3) -> str:
        return f"{self.point * scale:.{digits}f} ({self.low * scale:.{digits}f}-{self.high * scale:.{digits}f})"


def bootstrap_ci(
    labels,
    scores,
    metric: str = "accuracy",
    n: int = 1000,
    level: float = 0.90,
    seed: int = 0,
    threshold: float = 0.5,
) -> MetricsReport:
    """Percentile interval at ((1-level)/2, (1+level)/2) over ``n`` resamples.

    Resamples holding one class only are redrawn for AUC; if those make up
    more than half of all draws the data set is too small and we raise.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=float)
    if labels.size == 0:
        raise ValueError("empty prediction set")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    fn = (lambda y, s: accuracy(y, s, threshold)) if metric == "accuracy" else auc
    point = fn(labels, scores)
    rng = np.random.default_rng(seed)
    m = labels.size
    values = np.empty(n)
    got, degenerate = 0, 0
    while got < n:
        idx = rng.integers(0, m, size=m)
        y = labels[idx]
        if metric == "auc" and (y.min() == y.max()):
            degenerate += 1
            if degenerate > n:
                raise UndefinedMetricError(
                    "more than half of the bootstrap resamples hold a single class; use a larger data set"
                )
            continue
        values[got] = fn(y, scores[idx])
        got += 1
    alpha = (1.0 - level) / 2.0
    low, high = np.quantile(values, [alpha, 1.0 - alpha])
    return MetricsReport(
        metric=metric,
        point=point,
        low=float(min(low, point)),
        high=float(max(high, point)),
        level=level,
        n_bootstrap=n,
        seed=seed,
        n_examples=m,
        degenerate_redraws=degenerate,
    )


def evaluate_predictions(labels, scores, n: int = 1000, level: float = 0.90, seed: int = 0) -> dict[str, MetricsReport]:
    return {name: bootstrap_ci(labels, scores, name, n=n, level=level, seed=seed) for name in ("accuracy", "auc")}


def write_report(reports: dict[str, MetricsReport], path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"metrics": {k: v.to_json() for k, v in reports.items()}}
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2))
    return path
