import math
from fractions import Fraction

import numpy as np
import pytest

from randchan import channels
from randchan.channels import (
    ChannelSequence,
    FormulaComparison,
    FractionMode,
    LtiSystem,
    Side,
    SpanningFraction,
    covering_columns,
    is_rcc,
    is_rco,
    kalman_controllable,
    kalman_observable,
    observation_matrix,
    reach_matrix,
    reconstruct_state,
    sequence_spans,
    spanning_fraction_exact,
    spanning_fraction_mc,
    steer,
)
from randchan.errors import CapExceeded, InvalidInput
from randchan.exactmath import stirling2
from randchan.linalg import as_matrix
from randchan.simulate import simulate_open_loop

SHARED_B = [[0, 1], [1, 0], [1, 0]]
MIXED_B = [[0, 1], [1, 1], [1, 0]]


def system(a, b, c=None, exact: bool = False) -> LtiSystem:
    return LtiSystem(
        A=as_matrix(a, exact=exact),
        B=as_matrix(b, exact=exact),
        C=None if c is None else as_matrix(c, exact=exact),
    )


def diagonal(lams, exact: bool = False) -> LtiSystem:
    n = len(lams)
    eye = np.eye(n).tolist()
    return system(np.diag(lams).tolist(), eye, eye, exact)


def shared_channel(lams=(2, 3, 5), b=SHARED_B) -> LtiSystem:
    return system(np.diag(lams).tolist(), b, np.array(b).T.tolist())


def random_integer_system(rng: np.random.Generator, n: int, m: int, q: int) -> LtiSystem:
    return system(
        rng.integers(-1, 2, size=(n, n)).tolist(),
        rng.integers(-1, 2, size=(n, m)).tolist(),
        rng.integers(-1, 2, size=(q, n)).tolist(),
    )


## Systems and sequences


def test_system_shapes_and_dual():
    sys = shared_channel()
    assert (sys.n, sys.m, sys.q) == (3, 2, 2)
    assert sys.C is not None
    dual = sys.dual()
    np.testing.assert_array_equal(dual.A, sys.A.T)
    np.testing.assert_array_equal(dual.B, sys.C.T)
    np.testing.assert_array_equal(dual.C, sys.B.T)


def test_system_validation():
    with pytest.raises(InvalidInput):
        system([[1, 0]], [[1]])
    with pytest.raises(InvalidInput):
        system([[1, 0], [0, 1]], [[1], [0], [0]])
    with pytest.raises(InvalidInput):
        system([[1, 0], [0, 1]], [[1], [0]], [[1, 0, 0]])
    with pytest.raises(InvalidInput):
        system([[1]], [[1]]).dual()


def test_singular_flag():
    assert diagonal([2, 0, 5]).a_singular
    assert not diagonal([2, 3, 5]).a_singular


def test_channel_sequence_labels():
    gamma = ChannelSequence.from_labels([2, 2, 1])
    assert gamma.indices == (1, 1, 0)
    assert gamma.labels == (2, 2, 1)
    assert str(gamma) == "(2,2,1)"
    assert gamma.k == len(gamma) == 3
    with pytest.raises(InvalidInput):
        ChannelSequence.from_labels([0, 1])
    with pytest.raises(InvalidInput):
        gamma.validate(1)


def test_covering_columns():
    tuples = list(covering_columns(2, 3))
    assert tuples == [(0, 0, 1), (0, 1, 0), (0, 1, 1), (1, 0, 0), (1, 0, 1), (1, 1, 0)]
    for m, n in [(1, 4), (2, 5), (3, 5), (4, 4)]:
        assert len(list(covering_columns(m, n))) == math.factorial(m) * stirling2(n, m)
    assert list(covering_columns(3, 2)) == []


## Kalman tests


def test_kalman_controllable():
    assert kalman_controllable(diagonal([2, 3, 5]))
    assert not kalman_controllable(shared_channel((2, 3, 3)))
    assert kalman_controllable(shared_channel((2, 3, 5)))
    assert not kalman_controllable(system([[1, 0], [0, 2]], [[1], [0]]))


def test_kalman_observable():
    assert kalman_observable(system([[1, 2], [0, 3]], [[1], [0]], [[1, 0], [0, 1]]))
    assert kalman_observable(diagonal([2, 3, 5]))
    assert not kalman_observable(system([[1, 0], [0, 2]], [[1], [1]], [[0, 0]]))


## Random channel controllability and observability


def test_rcc_decoupled_modes():
    verdict = is_rcc(diagonal([2, 3, 5]))
    assert verdict.holds
    assert verdict.sequences_tested == 6
    assert verdict.failures == 0
    assert verdict.counterexample is None
    assert verdict.warnings == ()


def test_rcc_shared_channel_fails():
    sys = shared_channel()
    verdict = is_rcc(sys)
    assert not verdict.holds
    assert verdict.counterexample is not None
    assert verdict.counterexample.labels == (2, 2, 1)
    assert verdict.failures == 3
    assert verdict.sequences_tested == 6
    assert not sequence_spans(sys, verdict.counterexample)


def test_rcc_stop_at_first(monkeypatch: pytest.MonkeyPatch):
    sys = shared_channel()
    monkeypatch.setattr(channels, "ENUMERATION_CHUNK", 2)
    full = is_rcc(sys, workers=2)
    assert (full.failures, full.sequences_tested, full.stopped_early) == (3, 6, False)

    for workers in (1, 2):
        first = is_rcc(sys, workers=workers, stop_at_first=True)
        assert not first.holds
        assert first.counterexample == full.counterexample
        # The first failure sits in the second chunk of two.
        assert (first.failures, first.sequences_tested, first.stopped_early) == (1, 4, True)

    holds = is_rcc(diagonal([2, 3, 5]), stop_at_first=True)
    assert holds.holds and not holds.stopped_early
    assert holds.sequences_tested == 6


def test_rcc_shared_channel_fails_for_any_first_mode():
    for lam in (-4.0, 0.5, 2.0, 11.0):
        verdict = is_rcc(shared_channel((lam, 3, 5)))
        assert not verdict.holds
        assert verdict.counterexample is not None
        assert verdict.counterexample.labels == (2, 2, 1)


def test_rcc_mixed_channel_holds():
    assert is_rcc(shared_channel(b=MIXED_B)).holds
    assert is_rcc(shared_channel(b=MIXED_B), workers=3).holds


def test_rcc_zero_mode():
    verdict = is_rcc(diagonal([2, 0, 5]))
    assert not verdict.holds
    assert verdict.warnings
    assert verdict.counterexample is not None
    assert not sequence_spans(diagonal([2, 0, 5]), verdict.counterexample)


def test_rcc_exact_matches_float():
    for sys in (diagonal([2, 3, 5]), shared_channel(), shared_channel(b=MIXED_B)):
        exact = is_rcc(sys.to_exact())
        assert exact.holds == is_rcc(sys).holds
        assert exact.counterexample == is_rcc(sys).counterexample


def test_rcc_exact_rational_entries():
    sys = system([["1/2", 0], [0, "1/3"]], [[1, 0], [0, 1]], exact=True)
    assert is_rcc(sys).holds


def test_rcc_preconditions():
    with pytest.raises(InvalidInput):
        is_rcc(system([[1, 0], [0, 2]], [[1, 0, 1], [0, 1, 1]]))
    with pytest.raises(CapExceeded):
        is_rcc(diagonal([2, 3, 5]), cap=5)
    with pytest.raises(InvalidInput):
        is_rco(system([[1]], [[1]]))


def test_rco_examples():
    assert is_rco(shared_channel(b=MIXED_B)).holds
    verdict = is_rco(shared_channel())
    assert not verdict.holds
    assert verdict.side == Side.OUTPUT
    assert is_rco(diagonal([2, 3, 5])).holds


def test_rco_is_rcc_of_dual():
    rng = np.random.default_rng(21)
    for _ in range(200):
        n = int(rng.integers(1, 6))
        q = int(rng.integers(1, n + 1))
        sys = random_integer_system(rng, n, 1, q)
        observed = is_rco(sys)
        assert sys.C is not None
        dual = LtiSystem(A=sys.A.T, B=sys.C.T)
        controlled = is_rcc(dual)
        assert observed.holds == controlled.holds
        assert observed.failures == controlled.failures
        assert observed.counterexample == controlled.counterexample


def test_rcc_implies_kalman():
    rng = np.random.default_rng(22)
    checked = 0
    for _ in range(200):
        n = int(rng.integers(1, 5))
        m = int(rng.integers(1, n + 1))
        sys = random_integer_system(rng, n, m, 1)
        verdict = is_rcc(sys)
        if verdict.holds:
            checked += 1
            assert kalman_controllable(sys)
        elif verdict.counterexample is not None:
            assert not sequence_spans(sys, verdict.counterexample)
    assert checked > 0


def test_rcc_independent_of_workers():
    rng = np.random.default_rng(23)
    for _ in range(20):
        sys = random_integer_system(rng, 5, 3, 1)
        assert is_rcc(sys, workers=1) == is_rcc(sys, workers=4)


## Spanning fractions


def test_spanning_fraction_decoupled_three():
    result = spanning_fraction_exact(diagonal([2, 3, 5]), 3)
    assert result.mode == FractionMode.EXACT
    assert (result.count, result.total) == (6, 27)
    assert result.value == Fraction(6, 27)
    assert result.comparison == FormulaComparison.EQUALITY


def test_spanning_fraction_short_sequences():
    result = spanning_fraction_exact(diagonal([2, 3]), 1)
    assert result.value == 0
    assert spanning_fraction_exact(diagonal([2, 3, 5]), 2).count == 0


def test_spanning_fraction_equals_formula_for_decoupled_modes():
    cases = [(n, k) for n in (1, 2, 3) for k in range(0, 9)] + [(4, k) for k in range(0, 9)]
    for n, k in cases:
        sys = diagonal([2, 3, 5, 7][:n])
        result = spanning_fraction_exact(sys, k)
        assert result.count == math.factorial(n) * stirling2(k, n)
        assert result.comparison == FormulaComparison.EQUALITY


def test_spanning_fraction_strict_for_shared_channel():
    sys = shared_channel()
    for k in range(3, 9):
        result = spanning_fraction_exact(sys, k)
        # Spanning needs channel 2 at least once and channel 1 at least twice.
        assert result.count == 2**k - 2 - k
        assert result.value < result.formula
        assert result.comparison == FormulaComparison.STRICT


def test_spanning_fraction_exceeds_with_spare_directions():
    # One channel already controls the pair, so non-covering sequences span too.
    sys = system([[0, 1], [-2, 3]], [[0, 1], [1, 0]])
    result = spanning_fraction_exact(sys, 2)
    assert result.comparison == FormulaComparison.EXCEEDS


def test_spanning_fraction_output_side():
    sys = shared_channel()
    assert spanning_fraction_exact(sys, 4, side=Side.OUTPUT).count == 10
    with pytest.raises(InvalidInput):
        spanning_fraction_exact(system([[1]], [[1]]), 1, side=Side.OUTPUT)


def test_spanning_fraction_exact_cap():
    with pytest.raises(CapExceeded):
        spanning_fraction_exact(diagonal([2, 3, 5]), 10, cap=1000)


def test_spanning_fraction_mc_matches_exact():
    result = spanning_fraction_mc(diagonal([2, 3, 5]), 3, trials=100_000, seed=7)
    assert result.mode == FractionMode.MONTE_CARLO
    assert abs(result.value - 6 / 27) <= 4 * result.stderr
    assert result.comparison == FormulaComparison.CONSISTENT

    mixed = shared_channel(b=MIXED_B)
    exact = spanning_fraction_exact(mixed, 6)
    estimate = spanning_fraction_mc(mixed, 6, trials=20_000, seed=8)
    assert abs(estimate.value - float(exact.value)) <= 4 * estimate.stderr


def test_spanning_fraction_mc_short_sequences():
    result = spanning_fraction_mc(diagonal([2, 3, 5]), 2, trials=50, seed=1)
    assert result.value == 0
    assert result.count == 0


def test_spanning_fraction_mc_is_deterministic():
    sys = shared_channel(b=MIXED_B)
    first = spanning_fraction_mc(sys, 4, trials=3000, seed=99, workers=1)
    assert first == spanning_fraction_mc(sys, 4, trials=3000, seed=99, workers=4)


def test_monte_carlo_comparison_classes():
    def estimate(value: float, stderr: float) -> SpanningFraction:
        return SpanningFraction(
            mode=FractionMode.MONTE_CARLO,
            k=3,
            channels=3,
            value=value,
            count=0,
            total=1,
            stderr=stderr,
        )

    assert estimate(6 / 27 - 0.1, 0.01).comparison == FormulaComparison.STRICT
    assert estimate(6 / 27 + 0.1, 0.01).comparison == FormulaComparison.EXCEEDS
    assert estimate(6 / 27 + 0.01, 0.01).comparison == FormulaComparison.CONSISTENT


## Steering


def test_steer_decoupled_pair():
    sys = diagonal([2, 3])
    result = steer(sys, ChannelSequence.from_labels([1, 2]), [0, 0], [2, 3])
    np.testing.assert_allclose(result.inputs, [1.0, 3.0], atol=1e-12)
    assert result.residual == pytest.approx(0.0, abs=1e-12)


def test_steer_to_origin_is_zero():
    sys = shared_channel(b=MIXED_B)
    result = steer(sys, ChannelSequence.from_labels([1, 2, 1, 2]), [0, 0, 0], [0, 0, 0])
    assert result.inputs.tolist() == [0.0, 0.0, 0.0, 0.0]
    assert result.residual == 0.0


def test_steer_unreachable_target():
    sys = shared_channel()
    gamma = ChannelSequence.from_labels([2, 2, 1])
    result = steer(sys, gamma, [0, 0, 0], [0, 1, -1])
    # The reachable span is e1 and (0, 1, 1); the target is orthogonal to both.
    assert result.residual == pytest.approx(math.sqrt(2), rel=1e-9)
    assert np.linalg.matrix_rank(reach_matrix(sys, gamma)) == 2


def test_steer_rejects_bad_sequences():
    sys = diagonal([2, 3])
    with pytest.raises(InvalidInput):
        steer(sys, ChannelSequence(()), [0, 0], [1, 1])
    with pytest.raises(InvalidInput):
        steer(sys, ChannelSequence.from_labels([1, 3]), [0, 0], [1, 1])
    with pytest.raises(InvalidInput):
        steer(sys, ChannelSequence.from_labels([1, 2]), [0, 0], [1, 1, 1])


def test_steering_round_trip():
    rng = np.random.default_rng(31)
    accepted = 0
    while accepted < 500:
        n = int(rng.integers(1, 6))
        m = int(rng.integers(1, n + 1))
        sys = LtiSystem(A=rng.normal(size=(n, n)) / math.sqrt(n), B=rng.normal(size=(n, m)))
        gamma = ChannelSequence(tuple(int(i) for i in rng.integers(m, size=rng.integers(n, 2 * n + 1))))
        if not sequence_spans(sys, gamma) or np.linalg.cond(reach_matrix(sys, gamma)) > 1e6:
            continue
        x0, xf = rng.normal(size=n), rng.normal(size=n)
        result = steer(sys, gamma, x0, xf)
        path = simulate_open_loop(sys, gamma, result.inputs, x0)
        assert np.linalg.norm(path[-1] - xf) <= 1e-8 * (1 + np.linalg.norm(xf))
        accepted += 1


## Reconstruction


def test_reconstruct_decoupled_pair():
    result = reconstruct_state(diagonal([2, 3]), ChannelSequence.from_labels([1, 2]), [5, 21])
    np.testing.assert_allclose(result.x0, [5.0, 7.0], atol=1e-12)
    assert result.residual == pytest.approx(0.0, abs=1e-12)


def test_reconstruct_zero_outputs():
    sys = shared_channel(b=MIXED_B)
    result = reconstruct_state(sys, ChannelSequence.from_labels([1, 2, 1]), [0, 0, 0])
    assert result.x0.tolist() == [0.0, 0.0, 0.0]


def test_reconstruct_round_trip():
    sys = shared_channel(b=MIXED_B)
    assert is_rco(sys).holds
    x0 = np.array([0.7, -1.2, 2.5])
    for labels in covering_columns(2, 3):
        gamma = ChannelSequence(labels)
        c = sys.C
        assert c is not None
        outputs = [c[i] @ np.linalg.matrix_power(sys.A, j) @ x0 for j, i in enumerate(gamma.indices)]
        result = reconstruct_state(sys, gamma, outputs)
        np.testing.assert_allclose(result.x0, x0, atol=1e-8)


def test_observation_matrix_rows():
    rows = observation_matrix(diagonal([2, 3]), ChannelSequence.from_labels([2, 1, 2]))
    np.testing.assert_allclose(rows, [[0, 1], [2, 0], [0, 9]])


def test_reconstruct_length_mismatch():
    with pytest.raises(InvalidInput):
        reconstruct_state(diagonal([2, 3]), ChannelSequence.from_labels([1, 2]), [1.0])
