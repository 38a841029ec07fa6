import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stabletune.analysis import (
    RunRecord,
    bootstrap_curve,
    degenerate_rate,
    distribution_stats,
    expected_curve,
    one_tailed_t_test,
    selection_probabilities,
)

PAIR = [RunRecord(0, 0.8, 0.7), RunRecord(1, 0.6, 0.9)]


def enumerate_expectation(records, n, field="test"):
    """Average over every ordered n-tuple of records (drawn with replacement)."""
    total = 0.0
    tuples = list(itertools.product(records, repeat=n))
    for tup in tuples:
        best = min(tup, key=lambda r: (-r.val, r.run_id))
        total += getattr(best, field)
    return total / len(tuples)


def test_two_record_fixture_exact():
    curve = expected_curve(PAIR, 2)
    assert curve.test_mean[0] == pytest.approx(0.8, abs=1e-12)
    assert curve.test_mean[1] == pytest.approx(0.75, abs=1e-12)
    assert enumerate_expectation(PAIR, 2) == pytest.approx(0.75)


def test_two_record_fixture_monte_carlo():
    curve = bootstrap_curve(PAIR, 2, resamples=10_000, rng=np.random.default_rng(0))
    exact = expected_curve(PAIR, 2)
    for i in range(2):
        se = exact.test_std[i] / np.sqrt(10_000)
        assert abs(curve.test_mean[i] - exact.test_mean[i]) < 3 * se


def test_identical_records_have_zero_spread():
    recs = [RunRecord(i, 0.5, 0.6) for i in range(4)]
    curve = bootstrap_curve(recs, 5, resamples=200)
    np.testing.assert_allclose(curve.test_mean, 0.6)
    np.testing.assert_allclose(curve.test_std, 0.0, atol=1e-15)


def test_ties_go_to_lower_run_id():
    recs = [RunRecord(5, 0.7, 0.1), RunRecord(2, 0.7, 0.9)]
    # id 2 wins whenever it is drawn at all: 7/8 of triples
    assert expected_curve(recs, 3).test_mean[2] == pytest.approx(7 / 8 * 0.9 + 1 / 8 * 0.1)


def test_selection_probabilities_sum_to_one():
    for r in (1, 2, 7):
        for n in (1, 3, 10):
            assert selection_probabilities(r, n).sum() == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=3))
def test_closed_form_matches_enumeration_and_val_curve_is_monotone(pairs):
    recs = [RunRecord(i, v, t) for i, (v, t) in enumerate(pairs)]
    curve = expected_curve(recs, 3)
    for n in (1, 2, 3):
        assert curve.test_mean[n - 1] == pytest.approx(enumerate_expectation(recs, n), abs=1e-12)
        assert curve.val_mean[n - 1] == pytest.approx(enumerate_expectation(recs, n, "val"), abs=1e-12)
    assert all(b >= a - 1e-12 for a, b in zip(curve.val_mean, curve.val_mean[1:]))


def test_monte_carlo_converges_on_three_records():
    recs = [RunRecord(0, 0.9, 0.2), RunRecord(1, 0.5, 0.8), RunRecord(2, 0.1, 0.6)]
    mc = bootstrap_curve(recs, 3, resamples=10_000, rng=np.random.default_rng(5))
    exact = expected_curve(recs, 3)
    se = exact.test_std / np.sqrt(10_000)
    assert np.all(np.abs(mc.test_mean - exact.test_mean) < 3 * se)


def test_curve_errors():
    with pytest.raises(ValueError):
        bootstrap_curve([], 3)
    with pytest.raises(ValueError):
        expected_curve(PAIR, 0)
    with pytest.raises(ValueError):
        RunRecord(0, float("nan"), 0.0)


def linear_quantile(values, q):
    xs = sorted(values)
    h = (len(xs) - 1) * q
    lo = int(h)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


def test_distribution_stats():
    s = distribution_stats([1, 2, 3, 4, 5])
    assert (s["median"], s["q1"], s["q3"]) == (3, 2, 4)
    one = distribution_stats([0.7])
    assert one["std"] == 0 and one["min"] == one["max"]
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.normal(size=rng.integers(1, 40))
        s = distribution_stats(x)
        for key, q in (("q1", 0.25), ("median", 0.5), ("q3", 0.75)):
            assert s[key] == pytest.approx(linear_quantile(x, q), abs=1e-12)
    with pytest.raises(ValueError):
        distribution_stats([])


def test_degenerate_rate():
    recs = [RunRecord(i, 0.5 if i < 24 else 0.9, 0.5) for i in range(50)]
    assert degenerate_rate(recs, baseline=0.5) == pytest.approx(0.48)
    assert degenerate_rate(recs, baseline=0.0) == 0.0
    assert degenerate_rate(recs, baseline=0.5, field="test") == 1.0
    with pytest.raises(ValueError):
        degenerate_rate(recs, 0.5, field="loss")


def welch_oracle(a, b):
    mpmath.mp.dps = 40
    a = [mpmath.mpf(x) for x in a]
    b = [mpmath.mpf(x) for x in b]
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    va = sum((x - ma) ** 2 for x in a) / (len(a) - 1)
    vb = sum((x - mb) ** 2 for x in b) / (len(b) - 1)
    sa, sb = va / len(a), vb / len(b)
    t = (ma - mb) / mpmath.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa**2 / (len(a) - 1) + sb**2 / (len(b) - 1))
    # survival function of Student's t through the regularised incomplete beta
    tail = mpmath.betainc(df / 2, mpmath.mpf(1) / 2, 0, df / (df + t**2), regularized=True) / 2
    return float(tail if t >= 0 else 1 - tail)


def test_t_test_matches_oracle():
    a = [0.71, 0.69, 0.75, 0.80, 0.66]
    b = [0.62, 0.70, 0.58, 0.65, 0.61]
    assert one_tailed_t_test(a, b) == pytest.approx(welch_oracle(a, b), abs=1e-6)
    assert one_tailed_t_test(b, a) == pytest.approx(welch_oracle(b, a), abs=1e-6)


def test_t_test_edge_cases():
    x = [0.3, 0.5, 0.4]
    assert one_tailed_t_test(x, x) == pytest.approx(0.5)
    assert one_tailed_t_test([1.0, 1.0], [1.0, 1.0]) == 0.5
    rng = np.random.default_rng(0)
    b = rng.normal(size=10) * 0.01
    assert one_tailed_t_test(b + 5.0, b) < 1e-6
    assert one_tailed_t_test([2.0, 2.0], [1.0, 1.0]) == 0.0
    with pytest.raises(ValueError):
        one_tailed_t_test([1.0], [1.0, 2.0])


def test_pooled_variant_differs_only_in_df():
    a, b = [1.0, 2.0, 3.0, 4.0], [0.0, 0.5, 1.0, 1.5]
    # equal sizes give the same statistic; the pooled df is the larger one, hence a smaller p
    assert one_tailed_t_test(a, b, equal_var=True) <= one_tailed_t_test(a, b)
