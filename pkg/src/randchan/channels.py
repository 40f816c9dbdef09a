"""
Random channel controllability and observability.

One column b_i of B (one channel) is active per step. Along a channel sequence
gamma(0..k-1) the reachable directions are {b_gamma(k-1), A b_gamma(k-2), ...,
A^(k-1) b_gamma(0)}; a system is random channel controllable (RCC) when every
length-n sequence that uses each channel at least once gives a spanning set.
Observability is the same test on the dual pair (A^T, C^T).

Channel indices are 0-based here; `ChannelSequence.labels` gives the 1-based labels
used in files and output.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Iterable, Iterator, Sequence
from contextlib import closing
from dataclasses import dataclass, field
from enum import StrEnum
from fractions import Fraction
from functools import cached_property

import numpy as np
from funlog import log_calls

from randchan.errors import CapExceeded, InvalidInput
from randchan.exactmath import span_prob_exact, stirling2
from randchan.linalg import (
    DEFAULT_TOL,
    FloatArray,
    Matrix,
    as_vector,
    is_exact,
    krylov_blocks,
    krylov_column,
    rank,
    solve_min_norm,
    to_exact,
    to_float,
)
from randchan.settings import get_settings
from randchan.streams import imap_ordered, run_blocks, trial_rng

log = logging.getLogger(__name__)

# Monte Carlo estimates within this many standard errors of the formula count as consistent.
MC_Z_THRESHOLD = 4.0

# Sequences handed to one worker at a time during exhaustive enumeration.
ENUMERATION_CHUNK = 4096


class Side(StrEnum):
    """Which channels are drawn at random."""

    INPUT = "input"
    OUTPUT = "output"


class FractionMode(StrEnum):
    EXACT = "exact"
    MONTE_CARLO = "monte-carlo"


class FormulaComparison(StrEnum):
    """How a spanning fraction compares with m! S(k, m) / m^k."""

    EQUALITY = "equality"
    STRICT = "strict"
    EXCEEDS = "exceeds"
    CONSISTENT = "consistent"


@dataclass(frozen=True, eq=False)
class LtiSystem:
    """
    The triple (A, B, C) of x(k+1) = A x(k) + B u(k), y(k) = C x(k).

    Matrices are float or exact (Fraction) arrays. C is optional; operations on the
    output side need it.
    """

    A: Matrix
    B: Matrix
    C: Matrix | None = None

    def __post_init__(self) -> None:
        a, b, c = self.A, self.B, self.C
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
            raise InvalidInput(f"A must be a nonempty square matrix, got shape {a.shape}")
        n = a.shape[0]
        if b.ndim != 2 or b.shape[0] != n or b.shape[1] < 1:
            raise InvalidInput(f"B must be {n}xm with m >= 1, got shape {b.shape}")
        if c is not None and (c.ndim != 2 or c.shape[1] != n or c.shape[0] < 1):
            raise InvalidInput(f"C must be qx{n} with q >= 1, got shape {c.shape}")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def q(self) -> int:
        return 0 if self.C is None else self.C.shape[0]

    @property
    def exact(self) -> bool:
        return any(is_exact(x) for x in (self.A, self.B, self.C) if x is not None)

    @cached_property
    def a_singular(self) -> bool:
        return rank(self.A) < self.n

    def require_output(self) -> Matrix:
        if self.C is None:
            raise InvalidInput("This operation needs an output matrix C")
        return self.C

    def dual(self) -> LtiSystem:
        """The dual system (A^T, C^T, B^T)."""
        return LtiSystem(A=self.A.T, B=self.require_output().T, C=self.B.T)

    def side_pair(self, side: Side) -> tuple[Matrix, Matrix]:
        """(A, B) for the input side, (A^T, C^T) for the output side."""
        if side == Side.INPUT:
            return self.A, self.B
        return self.A.T, self.require_output().T

    def to_float(self) -> LtiSystem:
        return LtiSystem(
            A=to_float(self.A),
            B=to_float(self.B),
            C=None if self.C is None else to_float(self.C),
        )

    def to_exact(self) -> LtiSystem:
        return LtiSystem(
            A=to_exact(self.A),
            B=to_exact(self.B),
            C=None if self.C is None else to_exact(self.C),
        )


@dataclass(frozen=True)
class ChannelSequence:
    """A realized channel sequence gamma(0..k-1), stored 0-based."""

    indices: tuple[int, ...]

    @classmethod
    def from_labels(cls, labels: Iterable[int]) -> ChannelSequence:
        given = tuple(labels)
        indices = tuple(int(label) - 1 for label in given)
        if any(i < 0 for i in indices):
            raise InvalidInput(f"Channel labels are 1-based, got {given}")
        return cls(indices)

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(i + 1 for i in self.indices)

    @property
    def k(self) -> int:
        return len(self.indices)

    def __len__(self) -> int:
        return len(self.indices)

    def validate(self, channels: int) -> None:
        bad = [label for label in self.labels if label > channels]
        if bad or any(i < 0 for i in self.indices):
            raise InvalidInput(
                f"Channel sequence {self} uses labels outside 1..{channels}"
            )

    def __str__(self) -> str:
        return "(" + ",".join(str(label) for label in self.labels) + ")"


@dataclass(frozen=True)
class RcVerdict:
    """Outcome of a random channel controllability or observability check."""

    holds: bool
    sequences_tested: int
    side: Side = Side.INPUT
    failures: int = 0
    counterexample: ChannelSequence | None = None
    warnings: tuple[str, ...] = ()
    stopped_early: bool = False


@dataclass(frozen=True)
class SpanningFraction:
    """
    Fraction of length-k channel sequences whose vector set spans R^n.

    Exact results keep the raw `count` over `total` = channels^k; Monte Carlo results
    carry the estimate, its binomial standard error and the trial count.
    """

    mode: FractionMode
    k: int
    channels: int
    value: Fraction | float
    count: int
    total: int
    stderr: float = 0.0
    side: Side = Side.INPUT

    @property
    def formula(self) -> Fraction:
        """The counting formula m! S(k, m) / m^k for this channel count."""
        return span_prob_exact(self.channels, self.k)

    @property
    def formula_count(self) -> int:
        """Numerator of the formula over channels^k, matching `count` over `total`."""
        return math.factorial(self.channels) * stirling2(self.k, self.channels)

    @property
    def comparison(self) -> FormulaComparison:
        formula = self.formula
        if self.mode == FractionMode.EXACT:
            value = Fraction(self.value)
            if value == formula:
                return FormulaComparison.EQUALITY
            return FormulaComparison.STRICT if value < formula else FormulaComparison.EXCEEDS

        diff = float(self.value) - float(formula)
        if self.stderr == 0.0:
            if diff == 0.0:
                return FormulaComparison.CONSISTENT
            return FormulaComparison.STRICT if diff < 0 else FormulaComparison.EXCEEDS
        z = diff / self.stderr
        if z <= -MC_Z_THRESHOLD:
            return FormulaComparison.STRICT
        if z >= MC_Z_THRESHOLD:
            return FormulaComparison.EXCEEDS
        return FormulaComparison.CONSISTENT


@dataclass(frozen=True)
class SteeringResult:
    """Per-step scalar inputs u(0..k-1) in time order and the terminal miss."""

    inputs: FloatArray
    residual: float
    reached: FloatArray = field(repr=False)


@dataclass(frozen=True)
class Reconstruction:
    x0: FloatArray
    residual: float


def _resolve_cap(cap: int | None) -> int:
    return get_settings().enumeration_cap if cap is None else cap


def _resolve_workers(workers: int | None) -> int:
    return get_settings().workers if workers is None else max(1, workers)


def _spanning_matrix(powers: Matrix, columns: Sequence[int]) -> Matrix:
    """
    Columns A^j b_{columns[j]} for j = 0..k-1, as an n x k matrix.

    `columns[j]` is the channel whose vector is multiplied by A^j, i.e. gamma(k-1-j).
    """
    k = len(columns)
    return powers[np.arange(k), :, np.asarray(columns, dtype=np.intp)].T


def _spans(powers: Matrix, columns: Sequence[int], n: int, tol: float) -> bool:
    if len(columns) < n:
        return False
    return rank(_spanning_matrix(powers, columns), tol) == n


def _gamma_from_columns(columns: Sequence[int]) -> ChannelSequence:
    return ChannelSequence(tuple(reversed(columns)))


def covering_columns(channels: int, length: int) -> Iterator[tuple[int, ...]]:
    """
    All length-`length` tuples over range(channels) that use every channel, generated
    directly (prefixes that can no longer cover are pruned) in lexicographic order.
    """
    full = (1 << channels) - 1
    prefix: list[int] = []

    def extend(mask: int) -> Iterator[tuple[int, ...]]:
        position = len(prefix)
        if position == length:
            if mask == full:
                yield tuple(prefix)
            return
        missing = channels - mask.bit_count()
        if missing > length - position:
            return
        for channel in range(channels):
            prefix.append(channel)
            yield from extend(mask | (1 << channel))
            prefix.pop()

    yield from extend(0)


def _chunks(items: Iterable[tuple[int, ...]], size: int) -> Iterator[list[tuple[int, ...]]]:
    iterator = iter(items)
    while chunk := list(itertools.islice(iterator, size)):
        yield chunk


def _failing_in_chunk(
    powers: Matrix, chunk: list[tuple[int, ...]], n: int, tol: float
) -> tuple[int, list[tuple[int, ...]]]:
    """Chunk size and the failing column tuples, in order."""
    return len(chunk), [columns for columns in chunk if not _spans(powers, columns, n, tol)]


def _count_spanning_in_chunk(
    powers: Matrix, chunk: list[tuple[int, ...]], n: int, tol: float
) -> int:
    return sum(1 for columns in chunk if _spans(powers, columns, n, tol))


def _krylov_matrix(a: Matrix, b: Matrix, n: int) -> Matrix:
    powers = krylov_blocks(a, b, n)
    return np.concatenate(list(powers), axis=1)


def kalman_controllable(sys: LtiSystem, tol: float = DEFAULT_TOL) -> bool:
    """True iff rank [B, AB, ..., A^(n-1) B] = n."""
    return rank(_krylov_matrix(sys.A, sys.B, sys.n), tol) == sys.n


def kalman_observable(sys: LtiSystem, tol: float = DEFAULT_TOL) -> bool:
    """True iff the dual pair (A^T, C^T) is controllable."""
    return kalman_controllable(sys.dual(), tol)


@log_calls(level="info", show_timing_only=True)
def is_rcc(
    sys: LtiSystem,
    tol: float = DEFAULT_TOL,
    side: Side = Side.INPUT,
    cap: int | None = None,
    workers: int | None = None,
    stop_at_first: bool = False,
) -> RcVerdict:
    """
    Check random channel controllability (or, with `side=OUTPUT`, observability).

    Every length-n sequence over the m channels that uses each channel at least once
    is tested, streamed in chunks. The reported counterexample is the first failure in
    enumeration order. With `stop_at_first` the check ends after the chunk holding that
    failure, so `failures` and `sequences_tested` cover only the chunks read.
    """
    a, b = sys.side_pair(side)
    n, m = sys.n, b.shape[1]
    if m > n:
        raise InvalidInput(
            f"No length-{n} sequence can use all {m} channels (need channels <= n)"
        )
    required = math.factorial(m) * stirling2(n, m)
    limit = _resolve_cap(cap)
    if required > limit:
        raise CapExceeded(required, limit, "covering sequences")

    warnings: list[str] = []
    if sys.a_singular:
        warnings.append(
            "A is singular; the random channel theory assumes an invertible A, "
            "so this verdict is outside its scope"
        )
        log.warning("Checking random channel %s with singular A", side)

    powers = krylov_blocks(a, b, n)
    results = imap_ordered(
        lambda chunk: _failing_in_chunk(powers, chunk, n, tol),
        _chunks(covering_columns(m, n), ENUMERATION_CHUNK),
        _resolve_workers(workers),
    )

    tested = failures = 0
    counterexample = None
    stopped_early = False
    with closing(results):
        for size, failing in results:
            tested += size
            failures += len(failing)
            if failing and counterexample is None:
                counterexample = _gamma_from_columns(failing[0])
                if stop_at_first:
                    stopped_early = tested < required
                    break

    return RcVerdict(
        holds=failures == 0,
        sequences_tested=tested,
        side=side,
        failures=failures,
        counterexample=counterexample,
        warnings=tuple(warnings),
        stopped_early=stopped_early,
    )


def is_rco(
    sys: LtiSystem,
    tol: float = DEFAULT_TOL,
    cap: int | None = None,
    workers: int | None = None,
    stop_at_first: bool = False,
) -> RcVerdict:
    """
    Random channel observability: every covering sequence over the rows of C gives
    {c_gamma(n-1)^T, A^T c_gamma(n-2)^T, ...} spanning R^n. Same as `is_rcc` on the
    dual pair.
    """
    return is_rcc(
        sys, tol, side=Side.OUTPUT, cap=cap, workers=workers, stop_at_first=stop_at_first
    )


def sequence_spans(
    sys: LtiSystem, gamma: ChannelSequence, side: Side = Side.INPUT, tol: float = DEFAULT_TOL
) -> bool:
    """
    Whether {b_gamma(k-1), A b_gamma(k-2), ..., A^(k-1) b_gamma(0)} spans R^n.
    """
    a, b = sys.side_pair(side)
    gamma.validate(b.shape[1])
    powers = krylov_blocks(a, b, max(gamma.k, 1))
    return _spans(powers, tuple(reversed(gamma.indices)), sys.n, tol)


@log_calls(level="info", show_timing_only=True)
def spanning_fraction_exact(
    sys: LtiSystem,
    k: int,
    side: Side = Side.INPUT,
    tol: float = DEFAULT_TOL,
    cap: int | None = None,
    workers: int | None = None,
) -> SpanningFraction:
    """
    Enumerate all m^k channel sequences of length k and count those whose vector set
    spans R^n.
    """
    a, b = sys.side_pair(side)
    n, m = sys.n, b.shape[1]
    if k < 0:
        raise InvalidInput(f"k must be nonnegative, got {k}")
    total = m**k
    limit = _resolve_cap(cap)
    if total > limit:
        raise CapExceeded(total, limit)

    count = 0
    if k >= n:
        powers = krylov_blocks(a, b, k)
        chunks = _chunks(itertools.product(range(m), repeat=k), ENUMERATION_CHUNK)
        counts = imap_ordered(
            lambda chunk: _count_spanning_in_chunk(powers, chunk, n, tol),
            chunks,
            _resolve_workers(workers),
        )
        count = sum(counts)

    return SpanningFraction(
        mode=FractionMode.EXACT,
        k=k,
        channels=m,
        value=Fraction(count, total),
        count=count,
        total=total,
        side=side,
    )


@log_calls(level="info", show_timing_only=True)
def spanning_fraction_mc(
    sys: LtiSystem,
    k: int,
    trials: int,
    seed: int,
    side: Side = Side.INPUT,
    tol: float = DEFAULT_TOL,
    workers: int | None = None,
) -> SpanningFraction:
    """
    Estimate the spanning fraction from `trials` uniformly drawn sequences.

    Trial t draws gamma(0..k-1) from stream t of `seed`, so the estimate depends only
    on (seed, trials). Spanning verdicts are cached per distinct sequence.
    """
    if trials < 1:
        raise InvalidInput(f"trials must be at least 1, got {trials}")
    if k < 0:
        raise InvalidInput(f"k must be nonnegative, got {k}")
    a, b = sys.side_pair(side)
    n, m = sys.n, b.shape[1]

    def make(hits: int) -> SpanningFraction:
        value = hits / trials
        return SpanningFraction(
            mode=FractionMode.MONTE_CARLO,
            k=k,
            channels=m,
            value=value,
            count=hits,
            total=trials,
            stderr=math.sqrt(value * (1 - value) / trials),
            side=side,
        )

    if k < n:
        return make(0)

    powers = krylov_blocks(a, b, k)

    def count_block(block: range) -> int:
        verdicts: dict[tuple[int, ...], bool] = {}
        hits = 0
        for t in block:
            gamma = trial_rng(seed, t).integers(m, size=k)
            columns = tuple(int(c) for c in gamma[::-1])
            spans = verdicts.get(columns)
            if spans is None:
                spans = verdicts[columns] = _spans(powers, columns, n, tol)
            hits += spans
        return hits

    hits = sum(run_blocks(count_block, trials, _resolve_workers(workers)))
    return make(hits)


def reach_matrix(sys: LtiSystem, gamma: ChannelSequence) -> FloatArray:
    """
    The n x k matrix whose column j is A^j b_gamma(k-1-j).
    """
    system = sys.to_float()
    gamma.validate(system.m)
    powers = krylov_blocks(system.A, system.B, gamma.k)
    return _spanning_matrix(powers, tuple(reversed(gamma.indices)))


def steer(
    sys: LtiSystem,
    gamma: ChannelSequence,
    x0: Sequence[float] | FloatArray,
    xf: Sequence[float] | FloatArray,
    tol: float = DEFAULT_TOL,
) -> SteeringResult:
    """
    Minimum-norm scalar inputs u(0..k-1) along `gamma` that bring x0 as close as
    possible to xf after k steps, with one channel active per step.
    """
    if gamma.k < 1:
        raise InvalidInput("Steering needs a channel sequence of length at least 1")
    system = sys.to_float()
    start = as_vector(x0, system.n)
    target = as_vector(xf, system.n)

    m = reach_matrix(system, gamma)
    drift = krylov_column(system.A, start, gamma.k)
    coeffs = solve_min_norm(m, target - drift, tol)
    reached = drift + m @ coeffs
    # Column j carries the input applied at time k-1-j.
    inputs = coeffs[::-1].copy()
    return SteeringResult(
        inputs=inputs,
        residual=float(np.linalg.norm(reached - target)),
        reached=reached,
    )


def observation_matrix(sys: LtiSystem, gamma: ChannelSequence) -> FloatArray:
    """
    Rows c_gamma(j) A^j for j = 0..k-1.
    """
    system = sys.to_float()
    c = system.require_output()
    gamma.validate(system.q)
    a_t = system.A.T
    rows = [krylov_column(a_t, c[i], j) for j, i in enumerate(gamma.indices)]
    return np.array(rows, dtype=np.float64).reshape(gamma.k, system.n)


def reconstruct_state(
    sys: LtiSystem,
    gamma: ChannelSequence,
    y_seq: Sequence[float] | FloatArray,
    tol: float = DEFAULT_TOL,
) -> Reconstruction:
    """
    Minimum-norm least-squares x(0) from zero-input outputs y(j) = c_gamma(j) A^j x(0).
    """
    outputs = np.asarray(y_seq, dtype=np.float64)
    if outputs.shape != (gamma.k,):
        raise InvalidInput(
            f"Got {outputs.size} outputs for a channel sequence of length {gamma.k}"
        )
    rows = observation_matrix(sys, gamma)
    x0 = solve_min_norm(rows, outputs, tol)
    return Reconstruction(x0=x0, residual=float(np.linalg.norm(rows @ x0 - outputs)))
