import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vaerul import metrics


def loop_score(pred, truth):
    total = 0.0
    for p, t in zip(pred, truth):
        d = p - t
        total += math.exp(-d / 13) - 1 if d < 0 else math.exp(d / 10) - 1
    return total


def test_score_hand_cases():
    assert metrics.score([100.0], [100.0]) == 0.0
    assert metrics.score([87.0], [100.0]) == pytest.approx(math.e - 1)
    assert metrics.score([110.0], [100.0]) == pytest.approx(math.e - 1)


def test_score_late_costs_more():
    assert metrics.score([110.0], [100.0]) > metrics.score([90.0], [100.0])


def test_mae_mse_symmetric_offsets():
    truth = np.array([50.0, 80.0])
    pred = truth + np.array([5.0, -5.0])
    assert metrics.mae(pred, truth) == 5.0
    assert metrics.mse(pred, truth) == 25.0


def test_metrics_match_loop_oracles():
    g = np.random.default_rng(0)
    truth = g.uniform(0, 140, 200)
    pred = truth + g.normal(0, 15, 200)
    assert metrics.score(pred, truth) == pytest.approx(loop_score(pred, truth), rel=1e-12)
    assert metrics.mae(pred, truth) == pytest.approx(sum(abs(p - t) for p, t in zip(pred, truth)) / 200)
    assert metrics.mse(pred, truth) == pytest.approx(sum((p - t) ** 2 for p, t in zip(pred, truth)) / 200)


def test_r2_cases():
    t = np.array([1.0, 2.0, 3.0, 4.0])
    assert metrics.r2(t, t) == 1.0
    assert metrics.r2(np.full(4, t.mean()), t) == 0.0
    assert metrics.r2(t[::-1], t) < 0
    with pytest.raises(ValueError):
        metrics.r2([1.0, 2.0], [3.0, 3.0])
    with pytest.raises(ValueError):
        metrics.r2([1.0], [1.0])


def test_input_validation():
    with pytest.raises(ValueError, match="mismatch"):
        metrics.mae([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        metrics.score([], [])


def test_report_row():
    rep = metrics.evaluate([10.0, 20.0, 31.0], [10.0, 20.0, 30.0])
    assert rep.n == 3 and rep.mae == pytest.approx(1 / 3)
    assert rep.score_e2 == pytest.approx(rep.score / 100)
    assert len(rep.csv_row().split(",")) == len(metrics.CSV_COLUMNS)


finite = st.floats(-300, 300, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=30))
def test_metrics_nonnegative_and_permutation_invariant(pairs):
    p = np.array([a for a, _ in pairs])
    t = np.array([b for _, b in pairs])
    perm = np.random.default_rng(len(pairs)).permutation(len(pairs))
    for fn in (metrics.score, metrics.mae, metrics.mse):
        v = fn(p, t)
        assert v >= 0
        assert fn(p[perm], t[perm]) == pytest.approx(v, rel=1e-12, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 100.0), st.floats(0.0, 100.0))
def test_score_monotone_in_error_size(a, b):
    lo, hi = sorted((a, b))
    for sign in (-1, 1):
        assert metrics.score([sign * lo], [0.0]) <= metrics.score([sign * hi], [0.0])
