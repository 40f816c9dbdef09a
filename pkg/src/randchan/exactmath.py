"""
Spanning probabilities for uniformly drawn labels.

If k labels are drawn uniformly with replacement from n linearly independent vectors,
the drawn vectors span exactly when every label appears, which happens with
probability p(n, k) = n! S(k, n) / n^k, S being the Stirling number of the second kind.
"""

from __future__ import annotations

import math
import threading
from collections.abc import Sequence
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from funlog import log_calls

from randchan.errors import InvalidInput
from randchan.streams import trial_rng

# Above this many draws, floats are evaluated in the log domain.
LOG_DOMAIN_MIN_K = 300

# First length included in the mean non-spanning length series. Starting at 2 gives the
# commonly tabulated values; start at n for the series over lengths k >= n only.
TABLE_SERIES_START = 2

# _columns[j][k] == S(k, j). Columns only ever grow, and column j is never longer
# than column j - 1.
_columns: dict[int, list[int]] = {}
_columns_lock = threading.Lock()


def _check_count(name: str, value: int, minimum: int = 0) -> None:
    if value < minimum:
        raise InvalidInput(f"{name} must be at least {minimum}, got {value}")


def _fill_columns(k: int, n: int) -> None:
    with _columns_lock:
        for j in range(n + 1):
            column = _columns.setdefault(j, [])
            previous = _columns.get(j - 1)
            while len(column) <= k:
                i = len(column)
                if j == 0:
                    column.append(1 if i == 0 else 0)
                elif i == 0:
                    column.append(0)
                else:
                    assert previous is not None
                    column.append(j * column[i - 1] + previous[i - 1])


def stirling2(k: int, n: int) -> int:
    """
    Stirling number of the second kind S(k, n): the number of ways to partition k
    objects into n nonempty subsets. Exact, memoized by the triangle recurrence
    S(k, n) = n S(k-1, n) + S(k-1, n-1).
    """
    _check_count("k", k)
    _check_count("n", n)
    if n > k:
        return 0
    column = _columns.get(n)
    if column is None or len(column) <= k:
        _fill_columns(k, n)
        column = _columns[n]
    return column[k]


def span_prob_exact(n: int, k: int) -> Fraction:
    """
    Exact probability n! S(k, n) / n^k that k uniform draws from n independent vectors
    span R^n.
    """
    _check_count("n", n, 1)
    _check_count("k", k)
    return Fraction(math.factorial(n) * stirling2(k, n), n**k)


def nonspan_prob_exact(n: int, k: int) -> Fraction:
    """
    Exact 1 - p(n, k), computed without cancellation.
    """
    _check_count("n", n, 1)
    _check_count("k", k)
    total = n**k
    return Fraction(total - math.factorial(n) * stirling2(k, n), total)


def span_prob_float(n: int, k: int) -> float:
    """
    p(n, k) as a float. For k above LOG_DOMAIN_MIN_K the ratio is formed in the log
    domain, since n^k is far outside float range there.
    """
    _check_count("n", n, 1)
    _check_count("k", k)
    if k <= LOG_DOMAIN_MIN_K:
        return float(span_prob_exact(n, k))
    count = stirling2(k, n)
    if count == 0:
        return 0.0
    log_p = math.lgamma(n + 1) + math.log(count) - k * math.log(n)
    return min(1.0, math.exp(log_p))


def span_prob_asymptotic(n: int, k: int) -> float:
    """
    Three-term expansion 1 - n((n-1)/n)^k + (n(n-1)/2)((n-2)/n)^k of p(n, k).
    """
    _check_count("n", n, 2)
    if k < n:
        raise InvalidInput(f"The expansion needs k >= n, got k={k}, n={n}")
    return 1 - n * ((n - 1) / n) ** k + (n * (n - 1) / 2) * ((n - 2) / n) ** k


@dataclass(frozen=True)
class SpanSeriesResult:
    """Truncated mean non-spanning length with a certified bound on the dropped tail."""

    n: int
    value: float
    terms_used: int
    truncation_bound: float
    first_k: int
    last_k: int


def tail_majorant(n: int, k: int) -> float:
    """
    Upper bound on sum_{j>k} j (1 - p(n, j)).

    Uses 1 - p(n, j) <= n r^j with r = (n-1)/n (some label is missed) and the closed
    form sum_{j>=N} j r^j = r^N (N - (N-1) r) / (1-r)^2.
    """
    r = (n - 1) / n
    first = k + 1
    return n * r**first * (first - (first - 1) * r) / (1 - r) ** 2


@log_calls(level="info", show_timing_only=True)
def mean_nonspan_length(
    n: int, tol: float = 1e-9, start_k: int = TABLE_SERIES_START
) -> SpanSeriesResult:
    """
    Evaluate M_n = sum_{k >= start_k} k (1 - n! S(k, n) / n^k), stopping once the tail
    majorant falls below `tol`.
    """
    _check_count("n", n, 2)
    _check_count("start_k", start_k, 1)
    if not tol > 0:
        raise InvalidInput(f"tol must be positive, got {tol}")

    terms: list[float] = []
    k = start_k
    while True:
        terms.append(k * float(nonspan_prob_exact(n, k)))
        bound = tail_majorant(n, k)
        if bound < tol:
            break
        k += 1

    return SpanSeriesResult(
        n=n,
        value=math.fsum(terms),
        terms_used=len(terms),
        truncation_bound=bound,
        first_k=start_k,
        last_k=k,
    )


def growth_fit(n_values: Sequence[int], tol: float = 1e-6) -> tuple[float, float, float]:
    """
    Least-squares quadratic c2 n^2 + c1 n + c0 through the mean non-spanning lengths.
    Returns (c2, c1, c0).
    """
    if len(n_values) < 3:
        raise InvalidInput("A quadratic fit needs at least three values of n")
    values = [mean_nonspan_length(n, tol).value for n in n_values]
    c2, c1, c0 = np.polyfit(np.asarray(n_values, dtype=float), np.asarray(values), 2)
    return float(c2), float(c1), float(c0)


@dataclass(frozen=True)
class SpanRow:
    n: int
    k: int
    p: float
    exact: Fraction


def spanning_table(n_values: Sequence[int], k_max: int) -> list[SpanRow]:
    """
    Rows (n, k, p) for every n in `n_values` and k = 1..k_max, ordered by (n, k).
    """
    for n in n_values:
        _check_count("n", n, 1)
    _check_count("k_max", k_max, 1)
    return [
        SpanRow(n=n, k=k, p=span_prob_float(n, k), exact=span_prob_exact(n, k))
        for n in sorted(set(n_values))
        for k in range(1, k_max + 1)
    ]


def sample_coverage(n: int, k: int, trials: int, seed: int) -> tuple[float, float]:
    """
    Monte Carlo frequency with which k uniform labels from {1..n} cover every label.
    Returns (frequency, binomial standard error).
    """
    _check_count("n", n, 1)
    _check_count("k", k)
    _check_count("trials", trials, 1)
    labels = trial_rng(seed, 0).integers(n, size=(trials, k))
    seen = (labels[:, :, None] == np.arange(n)).any(axis=1)
    freq = float(np.count_nonzero(seen.all(axis=1))) / trials
    return freq, math.sqrt(freq * (1 - freq) / trials)
