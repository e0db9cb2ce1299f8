import numpy as np
import pytest
import scipy.stats

from blockdiff.stats import (
    StreamingMoments,
    bootstrap_variance_gap_confidence,
    rankdata_average,
    sliding_window_variance,
    spearman,
    two_pass_variance,
)


def test_streaming_matches_two_pass_to_1e10():
    rng = np.random.default_rng(7)
    xs = rng.normal(3.0, 2.5, size=1000)
    acc = StreamingMoments()
    for x in xs:
        acc.push(float(x))
    ref = two_pass_variance(xs)
    assert abs(acc.variance - ref) / ref < 1e-10
    assert abs(acc.mean - np.mean(xs)) < 1e-12


def test_chunked_merge_matches_scalar_pushes():
    rng = np.random.default_rng(11)
    xs = rng.exponential(1.0, size=5000)
    one = StreamingMoments()
    for x in xs:
        one.push(float(x))
    chunked = StreamingMoments()
    for lo in range(0, xs.size, 613):
        chunked.push_chunk(xs[lo : lo + 613])
    assert abs(chunked.mean - one.mean) < 1e-12
    assert abs(chunked.variance - one.variance) / one.variance < 1e-12
    assert abs(chunked.m4 - one.m4) / one.m4 < 1e-9


def test_known_variance():
    acc = StreamingMoments()
    acc.push_chunk(np.array([1.0, 2.0, 3.0, 4.0, 5.0]))
    assert acc.variance == pytest.approx(2.5, abs=1e-12)
    assert acc.sem == pytest.approx(np.sqrt(2.5 / 5), abs=1e-12)


def test_variance_sem_reasonable_for_gaussian():
    rng = np.random.default_rng(3)
    acc = StreamingMoments()
    acc.push_chunk(rng.normal(0.0, 1.0, size=200_000))
    # For N(0,1), Var(s^2) ~ 2/n.
    assert acc.variance_sem() == pytest.approx(np.sqrt(2.0 / 200_000), rel=0.1)


def test_spearman_exactly_monotone_is_one():
    x = np.array([0.1, 0.3, 0.5, 0.7, 0.9])
    y = np.exp(x)
    assert spearman(x, y) == pytest.approx(1.0, abs=1e-15)
    assert spearman(x, -y) == pytest.approx(-1.0, abs=1e-15)


def test_spearman_constant_input_is_zero():
    x = np.arange(10, dtype=float)
    y = np.full(10, 2.0)
    assert spearman(x, y) == 0.0


def test_spearman_matches_scipy_with_ties():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n = int(rng.integers(5, 60))
        x = rng.integers(0, 8, size=n).astype(float)
        y = rng.integers(0, 8, size=n).astype(float)
        ref = scipy.stats.spearmanr(x, y).statistic
        if np.isnan(ref):
            continue
        assert abs(spearman(x, y) - ref) < 1e-12


def test_rankdata_matches_scipy():
    rng = np.random.default_rng(9)
    x = rng.integers(0, 5, size=40).astype(float)
    assert np.allclose(rankdata_average(x), scipy.stats.rankdata(x))


def test_sliding_window_variance():
    rng = np.random.default_rng(13)
    xs = rng.normal(size=50)
    out = sliding_window_variance(xs, window=10)
    assert np.all(np.isnan(out[:9]))
    for i in range(9, 50):
        assert out[i] == pytest.approx(np.var(xs[i - 9 : i + 1], ddof=1), abs=1e-14)


def test_bootstrap_detects_obvious_variance_gap():
    rng = np.random.default_rng(17)
    a = rng.normal(0, 3.0, size=2000)
    b = rng.normal(0, 1.0, size=2000)
    conf = bootstrap_variance_gap_confidence(a, b, np.random.default_rng(1), resamples=500)
    assert conf > 0.99
    conf_rev = bootstrap_variance_gap_confidence(b, a, np.random.default_rng(1), resamples=500)
    assert conf_rev < 0.01
