import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from stabletune.metrics import (
    accuracy,
    average_ranks,
    f1_binary,
    majority_baseline,
    matthews,
    metric,
    spearman,
)


def confusion_fixture():
    # TP=6, FP=1, FN=2, TN=3
    golds = [1] * 6 + [0] * 1 + [1] * 2 + [0] * 3
    preds = [1] * 6 + [1] * 1 + [0] * 2 + [0] * 3
    return preds, golds


def test_mcc_fixture():
    preds, golds = confusion_fixture()
    assert matthews(preds, golds) == pytest.approx(16 / math.sqrt(1120), abs=1e-12)
    assert matthews(preds, golds) == pytest.approx(0.4781, abs=1e-4)


def test_perfect_predictions():
    g = [0, 1, 1, 0, 1]
    assert matthews(g, g) == 1.0
    assert f1_binary(g, g) == 1.0
    assert accuracy(g, g) == 1.0


def test_majority_baselines_are_zero_for_correlations():
    g = np.array([0, 0, 0, 1, 1])
    assert majority_baseline(g, "mcc") == 0.0
    assert majority_baseline(g, "acc") == pytest.approx(0.6)
    assert majority_baseline(np.array([0.1, 0.5, 0.9]), "scc") == 0.0
    # minority-positive F1: constant majority (0) scores 0
    assert majority_baseline(g, "f1") == 0.0


def test_spearman_reversed_and_ties():
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    assert spearman([1, 1, 1], [1, 2, 3]) == 0.0
    x = [1, 2, 2, 3, 5, 5, 5]
    y = [3, 1, 4, 1, 5, 9, 2]
    assert spearman(x, y) == pytest.approx(stats.spearmanr(x, y).statistic, abs=1e-12)
    np.testing.assert_array_equal(average_ranks([10, 20, 20, 5]), [2, 3.5, 3.5, 1])


def test_mcc_multiclass_matches_reference():
    rng = np.random.default_rng(0)
    g = rng.integers(0, 3, size=200)
    p = np.where(rng.random(200) < 0.6, g, rng.integers(0, 3, size=200))
    # reference: covariance form
    k = 3
    conf = np.zeros((k, k))
    for a, b in zip(g, p):
        conf[a, b] += 1
    x = np.eye(k)[p]
    y = np.eye(k)[g]
    cov = lambda u, v: np.sum((u - u.mean(0)) * (v - v.mean(0)))  # noqa: E731
    ref = cov(x, y) / math.sqrt(cov(x, x) * cov(y, y))
    assert matthews(p, g) == pytest.approx(ref, abs=1e-12)


def test_errors():
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        matthews([1, 0], [1])
    with pytest.raises(ValueError):
        metric([1], [1], "auc")
    with pytest.raises(ValueError):
        majority_baseline([], "acc")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=2, max_size=40), st.integers(0, 1000))
def test_metric_bounds_and_self_max(labels, seed):
    g = np.array(labels)
    p = np.random.default_rng(seed).integers(0, 3, size=g.size)
    assert 0 <= accuracy(p, g) <= 1
    assert -1 - 1e-12 <= matthews(p, g) <= 1 + 1e-12
    assert matthews(p, g) <= matthews(g, g) + 1e-12
    gb, pb = g % 2, p % 2
    assert 0 <= f1_binary(pb, gb) <= 1
    assert f1_binary(pb, gb) <= f1_binary(gb, gb) or gb.sum() == 0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=30), st.integers(0, 1000))
def test_spearman_bounds(values, seed):
    x = np.array(values)
    y = np.random.default_rng(seed).normal(size=x.size)
    r = spearman(x, y)
    assert -1 <= r <= 1
    if np.ptp(x) > 0:
        assert spearman(x, x) == pytest.approx(1.0)
