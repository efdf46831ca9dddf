"""One simulated run of a program, optionally halted at a crash point."""

from __future__ import annotations

from dataclasses import dataclass, field

from gpupm.lang.ir import GridConfig, Program
from gpupm.memsim.config import MachineConfig
from gpupm.memsim.machine import Boundary, LaunchProfile, Machine, SimStats, StoreRec
from gpupm.memsim.trace import DurabilityTrace
from gpupm.refexec.image import MemoryImage


@dataclass
class SimOutcome:
    final_image: MemoryImage  # volatile architectural view at the end or crash point
    persistent_image: MemoryImage  # what survives a crash here
    trace: DurabilityTrace
    stats: SimStats
    start_image: MemoryImage  # persistent image before the first event
    events: int
    crashed: bool
    launches: list[LaunchProfile] = field(default_factory=list)
    boundaries: list[Boundary] = field(default_factory=list)
    atomicity_violations: list[str] = field(default_factory=list)
    thread_stores: dict[tuple[int, int, int], list[StoreRec]] = field(default_factory=dict)
    durable_at: dict[int, int] = field(default_factory=dict)  # store id -> trace event

    def persistent_at(self, crash_at: int) -> MemoryImage:
        """Persistent image after event ``crash_at``, by trace-prefix replay."""
        return self.trace.replay(self.start_image, crash_at)


def simulate(program: Program, grid: GridConfig, cfg: MachineConfig, image: MemoryImage,
             crash_at: int | None = None, seed: int = 0) -> SimOutcome:
    """Run ``program`` on the machine; with ``crash_at`` stop after that many events."""
    m = Machine(program, grid, cfg, image, seed)
    crashed = m.run(crash_at)
    m.stats.events = m.event
    if not crashed:
        m.stats.cycles = max(m.stats.cycles, 0)
    return SimOutcome(
        final_image=m.arch.copy(), persistent_image=m.persistent_image(), trace=m.trace,
        stats=m.stats, start_image=m.start_image, events=m.event, crashed=crashed,
        launches=m.launches, boundaries=m.boundaries,
        atomicity_violations=m.atomicity_violations, thread_stores=m.thread_stores,
        durable_at=m.dur_event,
    )
