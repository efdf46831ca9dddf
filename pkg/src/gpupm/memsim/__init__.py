"""Memory-hierarchy simulator with persistent-memory crash semantics."""

from gpupm.memsim.checks import (
    epoch_cta_violations, epoch_loop_violations, persist_atomicity_violations, replay_mismatch,
    strict_order_violations,
)
from gpupm.memsim.config import MachineConfig, desk_config
from gpupm.memsim.machine import Machine, SimInvariantError, SimStats
from gpupm.memsim.simulate import SimOutcome, simulate
from gpupm.memsim.trace import DurabilityTrace, TraceEntry

__all__ = [
    "DurabilityTrace", "Machine", "MachineConfig", "SimInvariantError", "SimOutcome", "SimStats",
    "TraceEntry", "desk_config", "epoch_cta_violations", "epoch_loop_violations",
    "persist_atomicity_violations", "replay_mismatch", "simulate", "strict_order_violations",
]
