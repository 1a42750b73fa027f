import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrjigsaw.evaluation import (
    MetricsReport,
    PredictionSet,
    UndefinedMetricError,
    accuracy,
    auc,
    bootstrap_ci,
    evaluate_predictions,
    write_report,
)


def brute_auc(labels, scores):
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_worked_examples():
    assert auc([1, 0, 1, 0], [0.9, 0.2, 0.4, 0.6]) == 0.75
    assert auc([1, 1, 0, 0], [0.8, 0.4, 0.6, 0.2]) == 0.75
    assert auc([1, 0], [0.5, 0.5]) == 0.5
    assert accuracy([1, 0, 1, 0], [0.9, 0.2, 0.4, 0.6]) == 0.5
    assert accuracy([1, 0], [0.5, 0.49]) == 1.0


labelled = st.integers(2, 30).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda y: 0 < sum(y) < len(y)),
        st.lists(st.integers(0, 5).map(lambda v: v / 5), min_size=n, max_size=n),
    )
)


@given(labelled)
def test_auc_matches_brute_force(data):
    y, s = data
    assert auc(y, s) == pytest.approx(brute_auc(y, s), abs=1e-12)


@given(labelled)
def test_auc_monotone_invariant(data):
    y, s = data
    s = np.array(s)
    assert auc(y, s) == pytest.approx(auc(y, np.exp(3 * s) - 7), abs=1e-12)


@given(labelled)
def test_auc_flip(data):
    y, s = data
    assert auc(y, s) + auc(1 - np.array(y), s) == pytest.approx(1.0, abs=1e-12)


def test_auc_single_class():
    with pytest.raises(UndefinedMetricError):
        auc([1, 1], [0.2, 0.3])


def test_zero_width_when_perfect():
    y = np.array([0, 1] * 20)
    r = bootstrap_ci(y, y.astype(float), "accuracy", n=200)
    assert r.low == r.point == r.high == 1.0
    r = bootstrap_ci(y, y.astype(float), "auc", n=200)
    assert r.low == r.high == 1.0


@settings(max_examples=25, deadline=None)
@given(labelled, st.integers(0, 1000))
def test_ci_contains_point(data, seed):
    y, s = data
    if len(y) < 6:
        return
    for metric in ("accuracy", "auc"):
        try:
            r = bootstrap_ci(y, s, metric, n=100, seed=seed)
        except UndefinedMetricError:
            continue
        assert r.low <= r.point <= r.high


def test_bootstrap_reproducible():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 50)
    s = rng.random(50)
    a = bootstrap_ci(y, s, "auc", n=300, seed=5)
    b = bootstrap_ci(y, s, "auc", n=300, seed=5)
    c = bootstrap_ci(y, s, "auc", n=300, seed=6)
    assert a == b
    assert (a.low, a.high) != (c.low, c.high)


def test_bootstrap_matches_exhaustive_distribution():
    y = np.array([1, 0, 1, 1, 0, 0])
    s = np.array([0.9, 0.2, 0.4, 0.7, 0.6, 0.1])
    exact = np.array([accuracy(y[list(i)], s[list(i)]) for i in itertools.product(range(6), repeat=6)])
    lo, hi = np.quantile(exact, [0.05, 0.95])
    r = bootstrap_ci(y, s, "accuracy", n=1000, seed=0)
    assert abs(r.low - lo) <= 0.02 and abs(r.high - hi) <= 0.02


def test_interval_narrows_with_more_data():
    rng = np.random.default_rng(1)

    def width(m):
        y = rng.integers(0, 2, m)
        s = np.clip(y * 0.3 + rng.random(m) * 0.7, 0, 1)
        r = bootstrap_ci(y, s, "auc", n=500, seed=0)
        return r.high - r.low

    assert width(400) < width(40)


def test_degenerate_resamples():
    # two examples: each draw is single-class with probability one half
    raised = 0
    for seed in range(20):
        try:
            r = bootstrap_ci([1, 0], [0.3, 0.6], "auc", n=200, seed=seed)
        except UndefinedMetricError:
            raised += 1
            continue
        assert 0 < r.degenerate_redraws <= 200
    assert 0 < raised < 20


def test_report_validation():
    with pytest.raises(ValueError):
        MetricsReport("auc", 0.5, 0.6, 0.7, 0.9, 10, 0, 10)


def test_prediction_set():
    with pytest.raises(ValueError):
        PredictionSet.from_arrays([0, 1], [0.1, 0.2], ids=["a", "a"])
    with pytest.raises(ValueError):
        PredictionSet.from_arrays([0, 1], [0.1, np.nan])


def test_write_report(tmp_path):
    reports = evaluate_predictions([0, 1, 0, 1, 1, 0], [0.1, 0.9, 0.3, 0.6, 0.4, 0.5], n=100)
    doc = json.loads(write_report(reports, tmp_path / "r.json", {"split": "valid"}).read_text())
    assert set(doc["metrics"]) == {"accuracy", "auc"}
    assert doc["metrics"]["auc"]["level"] == 0.9 and doc["split"] == "valid"
