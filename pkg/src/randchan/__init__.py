__all__ = (
    "main",
    "LtiSystem",
    "ChannelSequence",
    "is_rcc",
    "is_rco",
    "kalman_controllable",
    "kalman_observable",
    "spanning_fraction_exact",
    "spanning_fraction_mc",
    "steer",
    "reconstruct_state",
    "stirling2",
    "span_prob_exact",
    "span_prob_float",
    "mean_nonspan_length",
    "SwitchProcessParams",
    "SimConfig",
    "run_ensemble",
    "simulate_closed_loop",
)

from .channels import (
    ChannelSequence,
    LtiSystem,
    is_rcc,
    is_rco,
    kalman_controllable,
    kalman_observable,
    reconstruct_state,
    spanning_fraction_exact,
    spanning_fraction_mc,
    steer,
)
from .exactmath import mean_nonspan_length, span_prob_exact, span_prob_float, stirling2
from .randchan import main
from .simulate import SimConfig, SwitchProcessParams, run_ensemble, simulate_closed_loop
