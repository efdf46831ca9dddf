"""Crash injection, recovery and verification against the reference oracle."""

from gpupm.harness.bundle import Bundle, load_bundle, replay_bundle, write_bundle
from gpupm.harness.recovery import (
    Action, Marks, Recovered, RecoveryError, RecoveryInterrupted, RecoveryPolicy,
    launch_finished, recover, recover_and_resume, resume,
)
from gpupm.harness.sweep import (
    RecoveryOutcome, Sampling, SweepFailure, SweepResult, check_crash_point, config_for,
    ordering_checks, sweep_crash_points,
)

__all__ = [
    "Action", "Bundle", "Marks", "Recovered", "RecoveryError", "RecoveryInterrupted",
    "RecoveryOutcome", "RecoveryPolicy", "Sampling", "SweepFailure", "SweepResult",
    "check_crash_point", "config_for", "launch_finished", "load_bundle", "ordering_checks",
    "recover", "recover_and_resume", "replay_bundle", "resume", "sweep_crash_points",
    "write_bundle",
]
