"""Crash-point sweeps: simulate, crash, recover, resume and compare against the oracle."""

from __future__ import annotations

import bisect
import random
from dataclasses import dataclass, field
from pathlib import Path

from gpupm.harness.recovery import Action, RecoveryError, recover, resume
from gpupm.lang.ir import Model, PersistencyDirective, Scope
from gpupm.memsim import (
    MachineConfig, SimOutcome, epoch_cta_violations, epoch_loop_violations,
    persist_atomicity_violations, replay_mismatch, simulate, strict_order_violations,
)
from gpupm.passes.compile import Compiled
from gpupm.refexec.image import MemoryImage
from gpupm.refexec.interp import ExecFault, run_reference


@dataclass(frozen=True)
class Sampling:
    """Which crash points to test: every event, every k-th, or n seeded picks."""

    kind: str = "exhaustive"  # exhaustive | stride | seeded
    n: int = 1

    def __post_init__(self):
        if self.kind not in ("exhaustive", "stride", "seeded"):
            raise ValueError(f"unknown sampling {self.kind!r}")
        if self.n <= 0:
            raise ValueError("sampling parameter must be positive")

    @classmethod
    def parse(cls, text: str) -> "Sampling":
        """``exhaustive``, ``stride:K`` or ``seeded:N``."""
        kind, _, arg = text.partition(":")
        return cls(kind, int(arg) if arg else 1)

    def __str__(self) -> str:
        return self.kind if self.kind == "exhaustive" else f"{self.kind}:{self.n}"

    def select(self, events: int, seed: int = 0) -> list[int]:
        """Crash points in ``0..events`` (0 is before the first event)."""
        points = range(events + 1)
        if self.kind == "exhaustive":
            return list(points)
        if self.kind == "stride":
            out = list(points[::self.n])
            return out if out[-1] == events else out + [events]
        return sorted(random.Random(seed).sample(points, min(self.n, events + 1)))


@dataclass
class RecoveryOutcome:
    crash_at: int
    actions: list[Action]
    recovered_image: MemoryImage | None
    passed: bool
    mismatch: list[str] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"


@dataclass
class SweepResult:
    label: str
    mode: str  # recovery | ordering
    events: int
    seed: int
    sampling: str
    outcomes: list[RecoveryOutcome] = field(default_factory=list)
    checks: dict[str, list[str]] = field(default_factory=dict)
    bundle: Path | None = None

    @property
    def failures(self) -> list[RecoveryOutcome]:
        return [o for o in self.outcomes if not o.passed]

    @property
    def pass_rate(self) -> float:
        return (len(self.outcomes) - len(self.failures)) / len(self.outcomes) if self.outcomes \
            else 1.0

    @property
    def ordering_ok(self) -> bool:
        return not any(self.checks.values())

    @property
    def passed(self) -> bool:
        return self.ordering_ok and not self.failures

    def action_stats(self) -> tuple[int, int, float]:
        counts = [len(o.actions) for o in self.outcomes] or [0]
        return min(counts), max(counts), sum(counts) / len(counts)

    def summary(self) -> str:
        lines = [f"{self.label}: mode={self.mode} events={self.events} seed={self.seed}"]
        for name, bad in sorted(self.checks.items()):
            lines.append(f"  {name}: {'pass' if not bad else f'{len(bad)} violations'}")
        if self.mode == "recovery":
            lo, hi, mean = self.action_stats()
            lines.append(f"  crash points: {len(self.outcomes)} ({self.sampling}), "
                         f"pass rate {self.pass_rate:.1%}, recovery actions "
                         f"min {lo} max {hi} mean {mean:.2f}")
            for o in self.failures[:1]:
                lines.append(f"  first failure at event {o.crash_at}: {'; '.join(o.mismatch)}")
        else:
            lines.append("  recoverability: not guaranteed (no transaction)")
        if self.bundle is not None:
            lines.append(f"  repro bundle: {self.bundle}")
        return "\n".join(lines)


class SweepFailure(Exception):
    def __init__(self, result: SweepResult):
        super().__init__(result.summary())
        self.result = result


def config_for(cfg: MachineConfig, d: PersistencyDirective | None) -> MachineConfig:
    """The directive's pct option decides whether the WPQs are durable."""
    return cfg if d is None else cfg.with_(wpq_durable=d.durable_wpq)


def ordering_checks(out: SimOutcome, compiled: Compiled) -> dict[str, list[str]]:
    """Trace invariants that apply to the compiled directive."""
    d = compiled.directive
    checks = {"persist_atomicity": persist_atomicity_violations(out),
              "trace_replay": replay_mismatch(out)}
    if d is None:
        return checks
    if d.model is Model.STRICT:
        checks["strict_order"] = strict_order_violations(out)
    elif d.scope is Scope.CTA and not _promoted(compiled):
        checks["epoch_cta"] = epoch_cta_violations(out)
    elif d.scope is Scope.LOOP and not _promoted(compiled):
        checks["epoch_loop"] = epoch_loop_violations(out)
    return checks


def _promoted(compiled: Compiled) -> bool:
    return any(lt.scope != compiled.directive.scope.value for lt in compiled.launches)


def check_crash_point(compiled: Compiled, persistent: MemoryImage, inputs: MemoryImage,
                      oracle: MemoryImage, crash_at: int) -> RecoveryOutcome:
    try:
        rec = recover(persistent, compiled, inputs)
        final = resume(rec, compiled)
    except (RecoveryError, ExecFault) as err:
        return RecoveryOutcome(crash_at, [], None, False, [f"recovery error: {err}"])
    diff = final.diff(oracle)
    return RecoveryOutcome(crash_at, rec.actions, final, not diff, diff)


def sweep_crash_points(compiled: Compiled, cfg: MachineConfig, inputs: MemoryImage, *,
                       sampling: Sampling = Sampling(), seed: int = 0,
                       bundle_dir: str | Path | None = None,
                       stop_on_fail: bool = True) -> SweepResult:
    """Crash the simulated run at each selected event and verify recovery.

    Non-transactional directives run in ordering-check mode: the trace
    invariants are verified, recoverability is not claimed. Crash points that
    share a durability-trace prefix share a persistent image, so recovery runs
    once per distinct prefix. The first failure stops the sweep (unless
    ``stop_on_fail`` is off) and writes a repro bundle when ``bundle_dir`` is given.
    """
    label = compiled.directive.label if compiled.directive else "baseline"
    cfg = config_for(cfg, compiled.directive)
    out = simulate(compiled.program, compiled.grid, cfg, inputs, seed=seed)
    res = SweepResult(label, "recovery" if compiled.transactional else "ordering",
                      out.events, seed, str(sampling), checks=ordering_checks(out, compiled))
    if not compiled.transactional:
        return res
    oracle = run_reference(compiled.original, compiled.grid, inputs)
    stamps = [e.event for e in out.trace]
    memo: dict[int, RecoveryOutcome] = {}
    for k in sampling.select(out.events, seed):
        prefix = bisect.bisect_right(stamps, k)
        hit = memo.get(prefix)
        if hit is None:
            hit = memo[prefix] = check_crash_point(compiled, out.persistent_at(k), inputs,
                                                   oracle, k)
        res.outcomes.append(RecoveryOutcome(k, hit.actions, hit.recovered_image, hit.passed,
                                            hit.mismatch))
        if not hit.passed and stop_on_fail:
            break
    if res.failures and bundle_dir is not None:
        from gpupm.harness.bundle import write_bundle

        res.bundle = write_bundle(bundle_dir, compiled, cfg, inputs, seed,
                                  res.failures[0].crash_at, out.trace, res.failures[0].mismatch)
    return res
