"""
randchan: analyze linear systems whose channels are reached one at a time, at random.

Run 'randchan --help' for the list of commands.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

import numpy as np
from prettyfmt import fmt_path
from rich.logging import RichHandler
from rich_argparse.contrib import ParagraphRichHelpFormatter

from randchan.channels import (
    ChannelSequence,
    FormulaComparison,
    FractionMode,
    RcVerdict,
    Side,
    SpanningFraction,
    is_rcc,
    is_rco,
    kalman_controllable,
    kalman_observable,
    reconstruct_state,
    spanning_fraction_exact,
    spanning_fraction_mc,
    steer,
)
from randchan.errors import CapExceeded, Inexact, InvalidInput
from randchan.exactmath import (
    TABLE_SERIES_START,
    growth_fit,
    mean_nonspan_length,
    spanning_table,
    stirling2,
)
from randchan.linalg import DEFAULT_TOL
from randchan.outputs import RunManifest, csv_text, fmt_number, json_text, write_text
from randchan.settings import get_settings
from randchan.shell_utils import (
    console,
    emit,
    print_error,
    print_status,
    print_subtle,
    print_success,
    print_warning,
)
from randchan.simulate import (
    Moment,
    SimConfig,
    SwitchProcessParams,
    max_stable_mode,
    moment_multipliers,
    run_ensemble,
    simulate_closed_loop,
    stability_report,
    waiting_time_stats,
)
from randchan.system_file import load_sim_config, load_system, sim_config_to_dict

APP_NAME = "randchan"

DESCRIPTION = f"{APP_NAME}: Random channel access for linear systems: spanning probabilities, controllability checks, steering and Monte Carlo simulation"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INEXACT = 3
EXIT_CAP = 4


def get_app_version() -> str:
    try:
        from importlib.metadata import version

        return "v" + version(APP_NAME)
    except Exception:
        return "unknown"


def _split(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def int_list(text: str) -> list[int]:
    """Comma-separated integers, e.g. `2,3,4`."""
    try:
        return [int(part) for part in _split(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def float_list(text: str) -> list[float]:
    """Comma-separated numbers, e.g. `0,1,-1`."""
    try:
        values = [float(part) for part in _split(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not all(math.isfinite(v) for v in values):
        raise argparse.ArgumentTypeError(f"values must be finite, got {text!r}")
    return values


def _digits(args: argparse.Namespace) -> int:
    return args.digits if args.digits is not None else get_settings().digits


def _workers(args: argparse.Namespace) -> int | None:
    return args.workers


def _fmt(args: argparse.Namespace) -> Callable[[float], str]:
    digits = _digits(args)
    return lambda value: fmt_number(float(value), digits)


def _fmt_values(values: Sequence[float] | np.ndarray, fmt: Callable[[float], str]) -> str:
    return ", ".join(fmt(float(v)) for v in values)


def _write_output(
    args: argparse.Namespace, text: str, parameters: dict[str, Any], extra: Sequence[Path] = ()
) -> None:
    """Print `text` or, with --out, write it along with a run manifest."""
    if args.out is None:
        sys.stdout.write(text)
        return
    out = Path(args.out)
    write_text(out, text)
    manifest = RunManifest(
        command=args.command,
        parameters=parameters,
        version=get_app_version(),
        outputs=[str(p) for p in (out, *extra)],
    )
    manifest_file = manifest.write(out)
    print_success(f"Wrote {manifest.describe()}")
    print_subtle(f"Manifest: {fmt_path(manifest_file)}")


def cmd_stirling(args: argparse.Namespace) -> int:
    emit(str(stirling2(args.k, args.n)))
    return EXIT_OK


def cmd_span_prob(args: argparse.Namespace) -> int:
    fmt = _fmt(args)
    rows = spanning_table(args.n, args.kmax)
    if args.format == "json":
        text = json_text(
            [
                {
                    "n": row.n,
                    "k": row.k,
                    "p_exact_num": row.exact.numerator,
                    "p_exact_den": row.exact.denominator,
                    "p_float": row.p,
                }
                for row in rows
            ]
        )
    else:
        text = csv_text(
            ["n", "k", "p_exact_num", "p_exact_den", "p_float"],
            (
                [row.n, row.k, row.exact.numerator, row.exact.denominator, fmt(row.p)]
                for row in rows
            ),
        )
    _write_output(
        args,
        text,
        {"n": args.n, "kmax": args.kmax, "format": args.format, "digits": _digits(args)},
    )
    return EXIT_OK


def cmd_mean_span(args: argparse.Namespace) -> int:
    fmt = _fmt(args)
    results = [mean_nonspan_length(n, args.tol, start_k=args.kstart) for n in args.n]
    if args.format == "json":
        text = json_text(
            [
                {
                    "n": n,
                    "mean": result.value,
                    "tail_bound": result.truncation_bound,
                    "first_k": result.first_k,
                    "last_k": result.last_k,
                }
                for n, result in zip(args.n, results, strict=True)
            ]
        )
    elif args.format == "csv":
        text = csv_text(
            ["n", "mean", "tail_bound", "first_k", "last_k"],
            (
                [n, fmt(r.value), fmt_number(r.truncation_bound, 2), r.first_k, r.last_k]
                for n, r in zip(args.n, results, strict=True)
            ),
        )
    else:
        text = "".join(
            f"M_{n} = {fmt(r.value)} "
            f"(tail bound {fmt_number(r.truncation_bound, 2)}, k = {r.first_k}..{r.last_k})\n"
            for n, r in zip(args.n, results, strict=True)
        )
    _write_output(
        args,
        text,
        {
            "n": args.n,
            "tol": args.tol,
            "kstart": args.kstart,
            "format": args.format,
            "digits": _digits(args),
        },
    )
    if args.fit:
        c2, c1, c0 = growth_fit(args.n, args.tol)
        print_subtle(f"Quadratic fit: {fmt(c2)} n^2 + {fmt(c1)} n + {fmt(c0)}")
    return EXIT_OK


def _report_verdict(label: str, verdict: RcVerdict) -> None:
    for warning in verdict.warnings:
        print_warning(warning)
    if verdict.holds:
        emit(f"{label}: yes ({verdict.sequences_tested} sequences tested)")
    elif verdict.stopped_early:
        emit(
            f"{label}: no; counterexample γ={verdict.counterexample} "
            f"(stopped after {verdict.sequences_tested} sequences)"
        )
    else:
        emit(
            f"{label}: no; counterexample γ={verdict.counterexample} "
            f"({verdict.failures} of {verdict.sequences_tested} sequences fail)"
        )


def cmd_check(args: argparse.Namespace) -> int:
    system = load_system(args.system, exact=True if args.exact else None).system
    if args.mode == "kalman":
        emit(f"Controllable: {'yes' if kalman_controllable(system, args.tol) else 'no'}")
        if system.C is not None:
            emit(f"Observable: {'yes' if kalman_observable(system, args.tol) else 'no'}")
    elif args.mode == "rcc":
        verdict = is_rcc(
            system, args.tol, workers=_workers(args), stop_at_first=args.first_failure
        )
        _report_verdict("RCC", verdict)
    else:
        verdict = is_rco(
            system, args.tol, workers=_workers(args), stop_at_first=args.first_failure
        )
        _report_verdict("RCO", verdict)
    return EXIT_OK


_RELATION = {
    FormulaComparison.EQUALITY: "=",
    FormulaComparison.STRICT: "<",
    FormulaComparison.EXCEEDS: ">",
    FormulaComparison.CONSISTENT: "~",
}


def _describe_fraction(result: SpanningFraction, fmt: Callable[[float], str]) -> str:
    relation = _RELATION[result.comparison]
    formula = f"{result.formula_count}/{result.channels**result.k}"
    if result.mode == FractionMode.EXACT:
        return f"{result.count}/{result.total} {relation} formula {formula}: {result.comparison}"
    return (
        f"{fmt(float(result.value))} ± {fmt(result.stderr)} ({result.count}/{result.total} trials) "
        f"{relation} formula {formula} = {fmt(float(result.formula))}: {result.comparison}"
    )


def cmd_span_fraction(args: argparse.Namespace) -> int:
    system = load_system(args.system).system
    side = Side(args.side)
    if args.exact:
        result = spanning_fraction_exact(system, args.k, side, args.tol, workers=_workers(args))
    else:
        if args.seed is None:
            raise InvalidInput("Monte Carlo estimates need an explicit --seed")
        result = spanning_fraction_mc(
            system, args.k, args.trials, args.seed, side, args.tol, workers=_workers(args)
        )
    emit(_describe_fraction(result, _fmt(args)))
    return EXIT_OK


def _check_residual(residual: float, scale: float, tol: float) -> None:
    limit = tol * (1 + scale)
    if residual > limit:
        raise Inexact(residual, limit)


def cmd_steer(args: argparse.Namespace) -> int:
    system = load_system(args.system).system
    gamma = ChannelSequence.from_labels(args.gamma)
    x0 = args.x0 if args.x0 is not None else [0.0] * system.n
    result = steer(system, gamma, x0, args.xf, args.tol)
    fmt = _fmt(args)
    emit(f"u = {_fmt_values(result.inputs, fmt)}; residual {fmt(result.residual)}")
    _check_residual(result.residual, float(np.linalg.norm(args.xf)), args.tol)
    return EXIT_OK


def cmd_reconstruct(args: argparse.Namespace) -> int:
    system = load_system(args.system).system
    gamma = ChannelSequence.from_labels(args.gamma)
    result = reconstruct_state(system, gamma, args.y, args.tol)
    fmt = _fmt(args)
    emit(f"x0 = {_fmt_values(result.x0, fmt)}; residual {fmt(result.residual)}")
    _check_residual(result.residual, float(np.linalg.norm(args.y)), args.tol)
    return EXIT_OK


def _report_multipliers(config: SimConfig, fmt: Callable[[float], str]) -> None:
    modes = config.decoupled_modes()
    if modes is None:
        return
    for j, params in enumerate(modes, start=1):
        m1, m2 = moment_multipliers(params)
        print_status(f"Mode {j}: m1 = {fmt(m1)}, m2 = {fmt(m2)}")


def cmd_simulate(args: argparse.Namespace) -> int:
    config = load_sim_config(args.config)
    run = simulate_closed_loop(config, args.seed)
    fmt = _fmt(args)
    n = config.system.n
    rows: list[list[Any]] = []
    for step, state in enumerate(run.states):
        active = run.active_channels(step) if step < config.horizon else ()
        rows.append([step, *(fmt(v) for v in state), ";".join(str(j) for j in active)])
    text = csv_text(["step", *(f"x{i}" for i in range(1, n + 1)), "active_channels"], rows)
    if run.overflowed:
        print_warning("Trajectory overflowed and was clamped")
    _write_output(
        args,
        text,
        {"config": sim_config_to_dict(config), "seed": args.seed, "digits": _digits(args)},
    )
    return EXIT_OK


def _percentile_name(q: float) -> str:
    return f"p{int(q):02d}" if float(q).is_integer() else f"p{q:g}"


def cmd_ensemble(args: argparse.Namespace) -> int:
    config = load_sim_config(args.config)
    if args.keep and args.out is None:
        raise InvalidInput("--keep needs --out to name the samples file")
    fmt = _fmt(args)
    _report_multipliers(config, fmt)
    stats = run_ensemble(
        config,
        args.trials,
        args.seed,
        workers=_workers(args),
        percentiles=args.percentiles,
        keep=args.keep,
    )
    if stats.excluded:
        print_warning(f"{stats.excluded} of {stats.trials} trajectories overflowed and were excluded")

    n = config.system.n
    header = ["step", "coord", "mean", "var", *(_percentile_name(q) for q in stats.percentiles)]
    rows: list[list[Any]] = []
    for step in range(config.horizon + 1):
        for coord in range(n):
            rows.append(
                [
                    step,
                    coord + 1,
                    fmt(stats.mean[step, coord]),
                    fmt(stats.variance[step, coord]),
                    *(fmt(stats.percentiles[q][step, coord]) for q in stats.percentiles),
                ]
            )

    extra: list[Path] = []
    if stats.samples is not None and args.out is not None:
        samples_path = Path(args.out).with_suffix(".samples.csv")
        sample_rows = [
            [trial, step, *(fmt(v) for v in state)]
            for trial, trajectory in enumerate(stats.samples)
            for step, state in enumerate(trajectory)
        ]
        write_text(
            samples_path,
            csv_text(["trial", "step", *(f"x{i}" for i in range(1, n + 1))], sample_rows),
        )
        extra.append(samples_path)

    _write_output(
        args,
        csv_text(header, rows),
        {
            "config": sim_config_to_dict(config),
            "seed": args.seed,
            "trials": args.trials,
            "workers": _workers(args) or get_settings().workers,
            "percentiles": args.percentiles,
            "keep": args.keep,
            "digits": _digits(args),
        },
        extra,
    )
    return EXIT_OK


def cmd_moments(args: argparse.Namespace) -> int:
    fmt = _fmt(args)
    switch_args = (args.a, args.b, args.p)
    if all(v is None for v in switch_args) and args.n is None:
        raise InvalidInput("Give --a, --b and --p, or --n, or both")
    if any(v is not None for v in switch_args):
        if any(v is None for v in switch_args):
            raise InvalidInput("--a, --b and --p must be given together")
        params = SwitchProcessParams(a=args.a, b=args.b, p=args.p)
        report = stability_report(params)
        emit(f"m1 = {fmt(report.m1)}")
        emit(f"m2 = {fmt(report.m2)}")
        emit(f"mean stable: {'yes' if report.mean_stable else 'no'}")
        emit(f"second moment stable: {'yes' if report.second_moment_stable else 'no'}")
        if report.oscillatory_mean:
            print_warning("m1 < 0: the mean alternates in sign")
    if args.n is not None:
        for moment in Moment:
            emit(f"max stable mode ({moment} moment, n={args.n}) = {fmt(max_stable_mode(args.n, moment))}")
    return EXIT_OK


def cmd_waiting_time(args: argparse.Namespace) -> int:
    fmt = _fmt(args)
    stats = waiting_time_stats(args.m, args.trials, args.horizon, args.seed, workers=_workers(args))
    for j in range(stats.channels):
        emit(
            f"channel {j + 1}: mean {fmt(stats.mean[j])} ± {fmt(stats.mean_stderr[j])} "
            f"(expected {fmt(stats.expected_mean)}), "
            f"variance {fmt(stats.variance[j])} ± {fmt(stats.variance_stderr[j])} "
            f"(expected {fmt(stats.expected_variance)}), {stats.gaps[j]} gaps"
        )
    return EXIT_OK


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


def main(argv: Sequence[str] | None = None) -> int:
    """
    Main entry point for the CLI.
    """
    parser = build_parser()
    arguments = list(sys.argv[1:] if argv is None else argv)

    # If no arguments, show help
    if not arguments:
        parser.print_help()
        return EXIT_OK

    args = parser.parse_args(arguments)
    setup_logging(args.verbose)

    try:
        return args.func(args)
    except InvalidInput as e:
        print_error(str(e))
        return EXIT_USAGE
    except Inexact as e:
        print_error(str(e))
        return EXIT_INEXACT
    except CapExceeded as e:
        print_error(str(e))
        return EXIT_CAP


def build_parser() -> argparse.ArgumentParser:
    """
    Build the argument parser with rich formatting.
    """

    class CustomFormatter(ParagraphRichHelpFormatter):
        def __init__(self, *args: Any, **kwargs: Any) -> None:
            super().__init__(*args, width=88, **kwargs)

    parser = argparse.ArgumentParser(
        prog=APP_NAME,
        description=DESCRIPTION,
        epilog="Bundled systems (e.g. 'shared_channel', 'three_mode_feedback') can be named without a path. Negative lists need '=', as in --x0=-1,2.",
        formatter_class=CustomFormatter,
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"{APP_NAME} {get_app_version()}",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Log progress and timings")

    subparsers = parser.add_subparsers(title="commands", dest="command", required=True)

    def add(name: str, summary: str, func: Callable[[argparse.Namespace], int]) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=summary, formatter_class=CustomFormatter)
        sub.set_defaults(func=func)
        return sub

    stirling_parser = add("stirling", "Print the Stirling number of the second kind S(k, n)", cmd_stirling)
    stirling_parser.add_argument("--k", type=int, required=True, help="Number of objects")
    stirling_parser.add_argument("--n", type=int, required=True, help="Number of nonempty blocks")

    span_parser = add("span-prob", "Tabulate spanning probabilities p(n, k) = n! S(k, n) / n^k", cmd_span_prob)
    span_parser.add_argument("--n", type=int_list, required=True, help="Comma-separated values of n")
    span_parser.add_argument("--kmax", type=int, required=True, help="Largest k (rows for k = 1..kmax)")
    span_parser.add_argument("--format", choices=["csv", "json"], default="csv", help="Output format (default: csv)")
    _add_out(span_parser)
    _add_digits(span_parser)

    mean_parser = add("mean-span", "Mean non-spanning sequence length M_n", cmd_mean_span)
    mean_parser.add_argument("--n", type=int_list, required=True, help="Comma-separated values of n")
    mean_parser.add_argument("--tol", type=float, default=1e-9, help="Bound on the truncated tail (default: 1e-9)")
    mean_parser.add_argument(
        "--kstart",
        type=int,
        default=TABLE_SERIES_START,
        help=f"First sequence length in the series (default: {TABLE_SERIES_START}, the tabulated convention)",
    )
    mean_parser.add_argument("--fit", action="store_true", help="Also report a quadratic fit in n")
    mean_parser.add_argument("--format", choices=["text", "csv", "json"], default="text", help="Output format (default: text)")
    _add_out(mean_parser)
    _add_digits(mean_parser)

    check_parser = add("check", "Check (random channel) controllability or observability", cmd_check)
    _add_system(check_parser)
    check_parser.add_argument("--mode", choices=["rcc", "rco", "kalman"], default="rcc", help="Which property to check (default: rcc)")
    check_parser.add_argument("--exact", action="store_true", help="Use exact rational arithmetic")
    check_parser.add_argument("--first-failure", action="store_true", help="Stop at the first failing chunk instead of counting every failure")
    _add_tol(check_parser)
    _add_workers(check_parser)

    fraction_parser = add("span-fraction", "Fraction of length-k channel sequences that span", cmd_span_fraction)
    _add_system(fraction_parser)
    fraction_parser.add_argument("--k", type=int, required=True, help="Sequence length")
    how = fraction_parser.add_mutually_exclusive_group(required=True)
    how.add_argument("--exact", action="store_true", help="Enumerate all m^k sequences")
    how.add_argument("--trials", type=int, help="Estimate from this many random sequences")
    fraction_parser.add_argument("--seed", type=int, help="Random seed (required with --trials)")
    fraction_parser.add_argument("--side", choices=[s.value for s in Side], default=Side.INPUT.value, help="Input channels (B) or output channels (C)")
    _add_tol(fraction_parser)
    _add_workers(fraction_parser)
    _add_digits(fraction_parser)

    steer_parser = add("steer", "Minimum-norm inputs along a channel sequence", cmd_steer)
    _add_system(steer_parser)
    _add_gamma(steer_parser)
    steer_parser.add_argument("--x0", type=float_list, help="Initial state (default: zero)")
    steer_parser.add_argument("--xf", type=float_list, required=True, help="Target state")
    _add_tol(steer_parser)
    _add_digits(steer_parser)

    recon_parser = add("reconstruct", "Recover x(0) from outputs read along a channel sequence", cmd_reconstruct)
    _add_system(recon_parser)
    _add_gamma(recon_parser)
    recon_parser.add_argument("--y", type=float_list, required=True, help="Outputs y(0), ..., y(k-1)")
    _add_tol(recon_parser)
    _add_digits(recon_parser)

    sim_parser = add("simulate", "Simulate one closed-loop trajectory", cmd_simulate)
    _add_config(sim_parser)
    _add_seed(sim_parser)
    _add_out(sim_parser)
    _add_digits(sim_parser)

    ens_parser = add("ensemble", "Per-step mean and variance over many closed-loop trajectories", cmd_ensemble)
    _add_config(ens_parser)
    ens_parser.add_argument("--trials", type=int, default=1000, help="Number of trajectories (default: 1000)")
    _add_seed(ens_parser)
    ens_parser.add_argument("--percentiles", type=float_list, default=[], help="Nearest-rank percentiles to add, e.g. 5,50,95")
    ens_parser.add_argument("--keep", type=int, default=0, help="Also write the first N trajectories to <out>.samples.csv")
    _add_out(ens_parser)
    _add_workers(ens_parser)
    _add_digits(ens_parser)

    moments_parser = add("moments", "Moment multipliers and stability of the switching process", cmd_moments)
    moments_parser.add_argument("--a", type=float, help="Multiplier taken with probability p")
    moments_parser.add_argument("--b", type=float, help="Multiplier taken with probability 1-p")
    moments_parser.add_argument("--p", type=float, help="Probability of the a branch")
    moments_parser.add_argument("--n", type=int, help="Also print the largest stabilizable mode for n channels")
    _add_digits(moments_parser)

    wait_parser = add("waiting-time", "Gaps between activations under uniform channel selection", cmd_waiting_time)
    wait_parser.add_argument("--m", type=int, required=True, help="Number of channels")
    wait_parser.add_argument("--trials", type=int, default=100, help="Number of runs (default: 100)")
    wait_parser.add_argument("--horizon", type=int, default=1000, help="Steps per run (default: 1000)")
    _add_seed(wait_parser)
    _add_workers(wait_parser)
    _add_digits(wait_parser)

    return parser


def _add_system(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--system", required=True, help="System file (JSON or YAML) or bundled system name")


def _add_config(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="Simulation config file or bundled config name")


def _add_gamma(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--gamma", type=int_list, required=True, help="Channel labels gamma(0), ..., gamma(k-1), 1-based")


def _add_seed(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, required=True, help="Random seed")


def _add_tol(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--tol", type=float, default=DEFAULT_TOL, help=f"Rank and residual tolerance (default: {DEFAULT_TOL:g})")


def _add_out(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", help="Write results to this file (plus a .manifest.json) instead of stdout")


def _add_workers(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--workers", type=int, help="Worker threads (default: RANDCHAN_WORKERS or 1)")


def _add_digits(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--digits", type=int, help="Significant digits for floats (default: RANDCHAN_DIGITS or 9)")


if __name__ == "__main__":
    sys.exit(main())
