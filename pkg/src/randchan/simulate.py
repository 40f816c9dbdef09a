"""
Monte Carlo simulation of randomly switched loops and their moment analysis.

The scalar switching process multiplies x by `a` with probability p and by `b`
otherwise. Its mean grows by m1 = p a + (1-p) b per step and its second moment by
m2 = p a^2 + (1-p) b^2. The multi-channel closed loop applies u_j = k_j x on channel j
only while that channel is active.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np
import numpy.typing as npt
from funlog import log_calls

from randchan.channels import ChannelSequence, LtiSystem
from randchan.errors import InvalidInput
from randchan.linalg import FloatArray, Matrix, as_matrix, as_vector, to_float
from randchan.settings import get_settings
from randchan.streams import run_blocks, trial_rng

log = logging.getLogger(__name__)

BoolArray = npt.NDArray[np.bool_]

# Trajectory entries beyond this magnitude are clamped and the trajectory is flagged.
OVERFLOW_LIMIT = 1e300

# Tolerance on the sum of single-channel selection weights.
WEIGHT_SUM_TOL = 1e-12


class Moment(StrEnum):
    FIRST = "first"
    SECOND = "second"


class SchedulerKind(StrEnum):
    UNIFORM_SINGLE = "uniform-single"
    BERNOULLI_PATTERN = "bernoulli-pattern"


def _check_probability(name: str, p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise InvalidInput(f"{name} must lie in [0, 1], got {p}")


@dataclass(frozen=True)
class SwitchProcessParams:
    """x(k+1) = a x(k) with probability p, b x(k) otherwise."""

    a: float
    b: float
    p: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise InvalidInput(f"Multipliers must be finite, got a={self.a}, b={self.b}")
        _check_probability("p", self.p)


@dataclass(frozen=True)
class StabilityReport:
    mean_stable: bool
    second_moment_stable: bool
    m1: float
    m2: float

    @property
    def oscillatory_mean(self) -> bool:
        """The mean alternates in sign (m1 < 0) even when it decays."""
        return self.m1 < 0


def moment_multipliers(params: SwitchProcessParams) -> tuple[float, float]:
    """(m1, m2) = (p a + (1-p) b, p a^2 + (1-p) b^2)."""
    a, b, p = params.a, params.b, params.p
    return p * a + (1 - p) * b, p * a * a + (1 - p) * b * b


def stability_report(params: SwitchProcessParams) -> StabilityReport:
    m1, m2 = moment_multipliers(params)
    return StabilityReport(
        mean_stable=abs(m1) < 1,
        second_moment_stable=abs(m2) < 1,
        m1=m1,
        m2=m2,
    )


def max_stable_mode(n: int, moment: Moment) -> float:
    """
    Largest open-loop mode whose first (n/(n-1)) or second (sqrt(n/(n-1))) moment can
    still be stabilized when each of n channels is reached with probability 1/n.
    """
    if n < 2:
        raise InvalidInput(f"n must be at least 2, got {n}")
    bound = n / (n - 1)
    return bound if moment == Moment.FIRST else math.sqrt(bound)


def simulate_bernoulli(
    params: SwitchProcessParams, x0: float, horizon: int, seed: int
) -> FloatArray:
    """
    One trajectory x(0..horizon) of the switching process, drawn from stream 0 of `seed`.

    Step k takes the b branch iff its uniform draw is below 1 - p, exactly as the
    one-channel loop of `SimConfig.from_switch_process` activates its channel, so the
    two follow the same path for the same seed.
    """
    if horizon < 1:
        raise InvalidInput(f"horizon must be at least 1, got {horizon}")
    take_a = trial_rng(seed, 0).random(horizon) >= 1 - params.p
    factors = np.where(take_a, params.a, params.b)
    with np.errstate(over="ignore", invalid="ignore"):
        path = x0 * np.cumprod(factors)
    return np.concatenate([[float(x0)], path])


@dataclass(frozen=True)
class SchedulerSpec:
    """
    How channels become active: exactly one per step (uniformly, or with `weights`), or
    each independently with probability `p`.
    """

    kind: SchedulerKind = SchedulerKind.UNIFORM_SINGLE
    weights: tuple[float, ...] | None = None
    p: float | None = None

    def __post_init__(self) -> None:
        if self.kind == SchedulerKind.UNIFORM_SINGLE:
            if self.weights is not None:
                for w in self.weights:
                    _check_probability("Channel weight", w)
                if abs(math.fsum(self.weights) - 1.0) > WEIGHT_SUM_TOL:
                    raise InvalidInput(f"Channel weights must sum to 1, got {self.weights}")
        else:
            if self.p is None:
                raise InvalidInput("A bernoulli-pattern scheduler needs an activity probability p")
            _check_probability("p", self.p)

    def activation_probabilities(self, channels: int) -> FloatArray:
        if self.kind == SchedulerKind.BERNOULLI_PATTERN:
            assert self.p is not None
            return np.full(channels, self.p)
        if self.weights is None:
            return np.full(channels, 1.0 / channels)
        self._check_channels(channels)
        return np.asarray(self.weights, dtype=np.float64)

    def _check_channels(self, channels: int) -> None:
        if self.weights is not None and len(self.weights) != channels:
            raise InvalidInput(
                f"Scheduler has {len(self.weights)} weights for {channels} channels"
            )

    def draw(self, rng: np.random.Generator, channels: int, horizon: int) -> BoolArray:
        """Activity patterns for `horizon` steps, shape (horizon, channels)."""
        if self.kind == SchedulerKind.BERNOULLI_PATTERN:
            assert self.p is not None
            return rng.random((horizon, channels)) < self.p
        self._check_channels(channels)
        if self.weights is None:
            picks = rng.integers(channels, size=horizon)
        else:
            picks = rng.choice(channels, size=horizon, p=np.asarray(self.weights))
        active = np.zeros((horizon, channels), dtype=np.bool_)
        active[np.arange(horizon), picks] = True
        return active


@dataclass(frozen=True, eq=False)
class SimConfig:
    """A closed loop x(k+1) = A x(k) + sum over active j of b_j (k_j x(k))."""

    system: LtiSystem
    gains: FloatArray
    scheduler: SchedulerSpec
    x0: FloatArray
    horizon: int

    def __post_init__(self) -> None:
        n, m = self.system.n, self.system.m
        if self.gains.shape != (m, n):
            raise InvalidInput(
                f"Gains must have one row of length {n} per channel ({m}x{n}), "
                f"got shape {self.gains.shape}"
            )
        if self.x0.shape != (n,):
            raise InvalidInput(f"x0 must have length {n}, got {self.x0.size}")
        if self.horizon < 1:
            raise InvalidInput(f"horizon must be at least 1, got {self.horizon}")
        self.scheduler.activation_probabilities(m)

    @classmethod
    def build(
        cls,
        system: LtiSystem,
        gains: Sequence[Sequence[float]] | Matrix,
        scheduler: SchedulerSpec,
        x0: Sequence[float] | FloatArray,
        horizon: int,
    ) -> SimConfig:
        return cls(
            system=system.to_float(),
            gains=to_float(as_matrix(gains)),
            scheduler=scheduler,
            x0=as_vector(x0),
            horizon=horizon,
        )

    @classmethod
    def from_switch_process(
        cls, params: SwitchProcessParams, x0: float, horizon: int
    ) -> SimConfig:
        """
        The scalar switching process as a one-channel loop: A = (a), B = (1), gain
        b - a, channel active (giving b) with probability 1 - p.
        """
        system = LtiSystem(A=as_matrix([[params.a]]), B=as_matrix([[1.0]]))
        return cls.build(
            system,
            [[params.b - params.a]],
            SchedulerSpec(SchedulerKind.BERNOULLI_PATTERN, p=1 - params.p),
            [x0],
            horizon,
        )

    def decoupled_modes(self) -> list[SwitchProcessParams] | None:
        """
        Per-coordinate switching parameters when A is diagonal, B = I and the gains
        are diagonal: mode j multiplies by lambda_j while channel j is idle and by
        lambda_j + k_jj while it is active. None for any other structure.
        """
        a, b, k = self.system.A, self.system.B, self.gains
        n = self.system.n
        if b.shape != (n, n) or not np.array_equal(b, np.eye(n)):
            return None
        if not (np.array_equal(a, np.diag(np.diag(a))) and np.array_equal(k, np.diag(np.diag(k)))):
            return None
        active = self.scheduler.activation_probabilities(n)
        return [
            SwitchProcessParams(a=float(a[j, j]), b=float(a[j, j] + k[j, j]), p=float(1 - active[j]))
            for j in range(n)
        ]


@dataclass(frozen=True)
class ClosedLoopRun:
    """States x(0..horizon), activity pattern per step and the overflow flag."""

    states: FloatArray
    schedule: BoolArray
    overflowed: bool

    def active_channels(self, step: int) -> tuple[int, ...]:
        """1-based labels of the channels active at `step`."""
        return tuple(int(j) + 1 for j in np.flatnonzero(self.schedule[step]))


def _simulate_trials(
    config: SimConfig, seed: int, trials: range
) -> tuple[FloatArray, BoolArray, BoolArray]:
    """
    Simulate trials `trials` side by side. Returns states (T, horizon+1, n), schedules
    (T, horizon, m) and per-trial overflow flags.
    """
    system, horizon = config.system, config.horizon
    a, b, gains = system.A, system.B, config.gains
    m = system.m

    schedules = np.stack(
        [config.scheduler.draw(trial_rng(seed, t), m, horizon) for t in trials]
    ).reshape(len(trials), horizon, m)
    states = np.empty((len(trials), horizon + 1, system.n))
    flags = np.zeros(len(trials), dtype=np.bool_)

    x = np.tile(config.x0, (len(trials), 1))
    states[:, 0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(horizon):
            u = schedules[:, k] * (x @ gains.T)
            x = x @ a.T + u @ b.T
            bad = ~np.isfinite(x) | (np.abs(x) > OVERFLOW_LIMIT)
            if bad.any():
                flags |= bad.any(axis=1)
                x = np.clip(np.nan_to_num(x, nan=OVERFLOW_LIMIT), -OVERFLOW_LIMIT, OVERFLOW_LIMIT)
            states[:, k + 1] = x
    return states, schedules, flags


def simulate_closed_loop(config: SimConfig, seed: int) -> ClosedLoopRun:
    """
    One closed-loop trajectory. Uses stream 0 of `seed`, so it matches trial 0 of
    `run_ensemble` with the same seed.
    """
    states, schedules, flags = _simulate_trials(config, seed, range(1))
    return ClosedLoopRun(states=states[0], schedule=schedules[0], overflowed=bool(flags[0]))


def simulate_open_loop(
    system: LtiSystem,
    gamma: ChannelSequence,
    inputs: Sequence[float] | FloatArray,
    x0: Sequence[float] | FloatArray,
) -> FloatArray:
    """
    Replay x(k+1) = A x(k) + b_gamma(k) u(k); returns x(0..k).
    """
    sys = system.to_float()
    gamma.validate(sys.m)
    u = as_vector(inputs, gamma.k)
    x = as_vector(x0, sys.n)
    path = [x]
    for step, channel in enumerate(gamma.indices):
        x = sys.A @ x + sys.B[:, channel] * u[step]
        path.append(x)
    return np.array(path)


@dataclass
class _Moments:
    """Per-step count, mean, sum of squared deviations and max magnitude."""

    count: int
    mean: FloatArray
    m2: FloatArray
    max_abs: FloatArray

    @classmethod
    def of(cls, states: FloatArray, shape: tuple[int, int]) -> _Moments:
        if len(states) == 0:
            return cls(0, np.zeros(shape), np.zeros(shape), np.zeros(shape))
        mean = states.mean(axis=0)
        return cls(
            count=len(states),
            mean=mean,
            m2=((states - mean) ** 2).sum(axis=0),
            max_abs=np.abs(states).max(axis=0),
        )

    def merge(self, other: _Moments) -> _Moments:
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        total = self.count + other.count
        delta = other.mean - self.mean
        return _Moments(
            count=total,
            mean=self.mean + delta * (other.count / total),
            m2=self.m2 + other.m2 + delta**2 * (self.count * other.count / total),
            max_abs=np.maximum(self.max_abs, other.max_abs),
        )


@dataclass(frozen=True)
class EnsembleStats:
    """
    Per-step statistics over an ensemble, arrays of shape (horizon+1, n).

    Overflowed trajectories are left out of `mean`, `variance` and `percentiles` and
    counted in `excluded`; `max_abs` covers every trajectory.
    """

    mean: FloatArray
    variance: FloatArray
    max_abs: FloatArray
    trials: int
    excluded: int
    percentiles: dict[float, FloatArray] = field(default_factory=dict)
    samples: FloatArray | None = None

    @property
    def used(self) -> int:
        return self.trials - self.excluded

    @property
    def second_moment(self) -> FloatArray:
        """Empirical E[x^2] per step and coordinate."""
        n = self.used
        return self.variance * (n - 1) / n + self.mean**2

    @property
    def mean_stderr(self) -> FloatArray:
        return np.sqrt(self.variance / self.used)


@log_calls(level="info", show_timing_only=True)
def run_ensemble(
    config: SimConfig,
    trials: int,
    seed: int,
    workers: int | None = None,
    percentiles: Sequence[float] = (),
    keep: int = 0,
) -> EnsembleStats:
    """
    Run `trials` independent trajectories (trial t on stream t of `seed`) and collect
    per-step mean, unbiased variance, max magnitude and optional nearest-rank
    percentiles. The first `keep` trajectories are returned as samples.
    """
    if trials < 2:
        raise InvalidInput(f"An ensemble needs at least 2 trials, got {trials}")
    for q in percentiles:
        if not 0 <= q <= 100:
            raise InvalidInput(f"Percentiles must lie in [0, 100], got {q}")
    shape = (config.horizon + 1, config.system.n)
    workers = get_settings().workers if workers is None else max(1, workers)

    def run_block(block: range) -> tuple[_Moments, FloatArray, FloatArray, int]:
        states, _, flags = _simulate_trials(config, seed, block)
        clean = states[~flags]
        moments = _Moments.of(clean, shape)
        moments.max_abs = np.abs(states).max(axis=0)
        kept = states[: max(0, keep - block.start)]
        return moments, clean if percentiles else states[:0], kept, int(flags.sum())

    results = run_blocks(run_block, trials, workers)

    total = _Moments(0, np.zeros(shape), np.zeros(shape), np.zeros(shape))
    max_abs = np.zeros(shape)
    excluded = 0
    for moments, _, _, flagged in results:
        max_abs = np.maximum(max_abs, moments.max_abs)
        total = total.merge(moments)
        excluded += flagged

    if total.count < 2:
        log.warning("Only %d of %d trajectories stayed finite", total.count, trials)
        variance = np.full(shape, np.nan)
    else:
        variance = total.m2 / (total.count - 1)
    if excluded:
        log.warning("%d of %d trajectories overflowed and were excluded", excluded, trials)

    ranks: dict[float, FloatArray] = {}
    if percentiles and total.count:
        pooled = np.concatenate([clean for _, clean, _, _ in results])
        for q in percentiles:
            ranks[q] = np.percentile(pooled, q, axis=0, method="inverted_cdf")

    samples = None
    if keep > 0:
        samples = np.concatenate([kept for _, _, kept, _ in results])[:keep]

    return EnsembleStats(
        mean=total.mean if total.count else np.full(shape, np.nan),
        variance=variance,
        max_abs=max_abs,
        trials=trials,
        excluded=excluded,
        percentiles=ranks,
        samples=samples,
    )


def log_slope(series: Sequence[float] | FloatArray) -> float:
    """
    Least-squares slope of log|series| against the step index, i.e. the log of the
    per-step growth factor.
    """
    values = np.abs(np.asarray(series, dtype=np.float64))
    if values.size < 2 or not np.all(values > 0):
        raise InvalidInput("log_slope needs at least two nonzero values")
    slope, _ = np.polyfit(np.arange(values.size, dtype=np.float64), np.log(values), 1)
    return float(slope)


@dataclass(frozen=True)
class WaitingTimeStats:
    """
    Gaps between consecutive activations of each channel under uniform single-channel
    selection. The gaps are geometric with mean m and variance (1-p)/p^2, p = 1/m.
    """

    mean: FloatArray
    variance: FloatArray
    mean_stderr: FloatArray
    variance_stderr: FloatArray
    gaps: npt.NDArray[np.int64]
    trials: int

    @property
    def channels(self) -> int:
        return len(self.mean)

    @property
    def expected_mean(self) -> float:
        return float(self.channels)

    @property
    def expected_variance(self) -> float:
        p = 1.0 / self.channels
        return (1 - p) / p**2


@log_calls(level="info", show_timing_only=True)
def waiting_time_stats(
    m: int, trials: int, horizon: int, seed: int, workers: int | None = None
) -> WaitingTimeStats:
    """
    Simulate `trials` runs of `horizon` uniform single-channel selections and collect
    per-channel gap statistics.
    """
    if m < 1:
        raise InvalidInput(f"m must be at least 1, got {m}")
    if trials < 1 or horizon < 2:
        raise InvalidInput("waiting_time_stats needs trials >= 1 and horizon >= 2")
    scheduler = SchedulerSpec()
    workers = get_settings().workers if workers is None else max(1, workers)

    def gaps_in_block(block: range) -> list[npt.NDArray[np.int64]]:
        per_channel: list[list[npt.NDArray[np.int64]]] = [[] for _ in range(m)]
        for t in block:
            picks = scheduler.draw(trial_rng(seed, t), m, horizon).argmax(axis=1)
            for j in range(m):
                per_channel[j].append(np.diff(np.flatnonzero(picks == j)))
        return [np.concatenate(chunks) for chunks in per_channel]

    blocks = run_blocks(gaps_in_block, trials, workers)
    gaps = [np.concatenate([block[j] for block in blocks]) for j in range(m)]

    mean = np.full(m, np.nan)
    variance = np.full(m, np.nan)
    mean_se = np.full(m, np.nan)
    var_se = np.full(m, np.nan)
    for j, g in enumerate(gaps):
        if g.size < 2:
            continue
        values = g.astype(np.float64)
        mean[j] = values.mean()
        variance[j] = values.var(ddof=1)
        mean_se[j] = math.sqrt(variance[j] / values.size)
        fourth = float(((values - mean[j]) ** 4).mean())
        var_se[j] = math.sqrt(max(fourth - variance[j] ** 2, 0.0) / values.size)

    return WaitingTimeStats(
        mean=mean,
        variance=variance,
        mean_stderr=mean_se,
        variance_stderr=var_se,
        gaps=np.array([g.size for g in gaps], dtype=np.int64),
        trials=trials,
    )
