"""Streaming moments, rank correlation, and resampling helpers.

Everything here is deterministic given its inputs (and, where applicable,
an explicit numpy Generator). The streaming accumulator tracks central
moments up to order four in one pass so variance estimates come with their
own standard errors.
"""

from __future__ import annotations

import numpy as np


class StreamingMoments:
    """One-pass mean/variance accumulator with mergeable state.

    Tracks n, mean and central moment sums M2..M4 using the standard
    pairwise-update formulas, so accumulators built over disjoint chunks
    can be merged associatively.
    """

    __slots__ = ("n", "mean", "m2", "m3", "m4")

    def __init__(self) -> None:
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.m3 = 0.0
        self.m4 = 0.0

    def push(self, x: float) -> None:
        n1 = self.n
        self.n = n1 + 1
        delta = x - self.mean
        delta_n = delta / self.n
        delta_n2 = delta_n * delta_n
        term1 = delta * delta_n * n1
        self.mean += delta_n
        self.m4 += (
            term1 * delta_n2 * (self.n * self.n - 3 * self.n + 3)
            + 6 * delta_n2 * self.m2
            - 4 * delta_n * self.m3
        )
        self.m3 += term1 * delta_n * (self.n - 2) - 3 * delta_n * self.m2
        self.m2 += term1

    def push_chunk(self, xs: np.ndarray) -> None:
        """Absorb an array of values by merging a chunk-local accumulator."""
        xs = np.asarray(xs, dtype=np.float64).ravel()
        if xs.size == 0:
            return
        other = StreamingMoments()
        other.n = int(xs.size)
        other.mean = float(np.mean(xs))
        d = xs - other.mean
        other.m2 = float(np.sum(d * d))
        other.m3 = float(np.sum(d * d * d))
        other.m4 = float(np.sum(d * d * d * d))
        self.merge(other)

    def merge(self, other: "StreamingMoments") -> None:
        if other.n == 0:
            return
        if self.n == 0:
            self.n, self.mean = other.n, other.mean
            self.m2, self.m3, self.m4 = other.m2, other.m3, other.m4
            return
        na, nb = self.n, other.n
        n = na + nb
        delta = other.mean - self.mean
        delta2 = delta * delta
        m2 = self.m2 + other.m2 + delta2 * na * nb / n
        m3 = (
            self.m3
            + other.m3
            + delta * delta2 * na * nb * (na - nb) / (n * n)
            + 3.0 * delta * (na * other.m2 - nb * self.m2) / n
        )
        m4 = (
            self.m4
            + other.m4
            + delta2 * delta2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * delta2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * delta * (na * other.m3 - nb * self.m3) / n
        )
        self.mean += delta * nb / n
        self.n, self.m2, self.m3, self.m4 = n, m2, m3, m4

    @property
    def variance(self) -> float:
        """Unbiased sample variance (ddof=1)."""
        if self.n < 2:
            return 0.0
        return self.m2 / (self.n - 1)

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance))

    @property
    def sem(self) -> float:
        """Standard error of the mean: sample std / sqrt(n)."""
        if self.n < 1:
            return float("inf")
        return float(np.sqrt(self.variance / self.n))

    def variance_sem(self) -> float:
        """Approximate standard error of the sample variance.

        Uses Var(s^2) ~= (m4_hat - s^4 (n-3)/(n-1)) / n with the empirical
        fourth central moment.
        """
        if self.n < 4:
            return float("inf")
        n = self.n
        m4_hat = self.m4 / n
        s2 = self.variance
        v = (m4_hat - s2 * s2 * (n - 3) / (n - 1)) / n
        return float(np.sqrt(max(v, 0.0)))


def two_pass_variance(xs: np.ndarray) -> float:
    """Reference two-pass sample variance (ddof=1) for validating the one-pass path."""
    xs = np.asarray(xs, dtype=np.float64).ravel()
    if xs.size < 2:
        return 0.0
    mu = float(np.mean(xs))
    return float(np.sum((xs - mu) ** 2) / (xs.size - 1))


def rankdata_average(xs: np.ndarray) -> np.ndarray:
    """Ranks starting at 1, ties resolved to the average rank."""
    xs = np.asarray(xs, dtype=np.float64)
    order = np.argsort(xs, kind="stable")
    ranks = np.empty(xs.size, dtype=np.float64)
    sorted_vals = xs[order]
    i = 0
    while i < xs.size:
        j = i
        while j + 1 < xs.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        avg = 0.5 * (i + j) + 1.0
        ranks[order[i : j + 1]] = avg
        i = j + 1
    return ranks


def spearman(xs: np.ndarray, ys: np.ndarray) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks.

    Returns 0.0 when either input has no rank variation (all ties), where
    the correlation is undefined.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError(f"spearman expects equal-length 1-d arrays, got {xs.shape} and {ys.shape}")
    rx = rankdata_average(xs)
    ry = rankdata_average(ys)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    denom = np.sqrt(np.sum(dx * dx) * np.sum(dy * dy))
    if denom == 0.0:
        return 0.0
    return float(np.sum(dx * dy) / denom)


def sliding_window_variance(values: np.ndarray, window: int) -> np.ndarray:
    """Per-step trailing-window sample variance.

    Entry i holds the variance of values[i-window+1 .. i] and is NaN for
    i < window-1 (not enough history yet).
    """
    values = np.asarray(values, dtype=np.float64)
    out = np.full(values.shape, np.nan)
    if window < 2:
        raise ValueError("window must be >= 2")
    for i in range(window - 1, values.size):
        out[i] = np.var(values[i - window + 1 : i + 1], ddof=1)
    return out


def bootstrap_variance_gap_confidence(
    a: np.ndarray, b: np.ndarray, rng: np.random.Generator, resamples: int = 1000
) -> float:
    """Fraction of bootstrap resamples in which Var(a) > Var(b).

    One-sided evidence that the distribution behind `a` has larger variance
    than the one behind `b`; a and b are resampled independently.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    wins = 0
    for _ in range(resamples):
        ia = rng.integers(0, a.size, size=a.size)
        ib = rng.integers(0, b.size, size=b.size)
        if np.var(a[ia], ddof=1) > np.var(b[ib], ddof=1):
            wins += 1
    return wins / resamples
