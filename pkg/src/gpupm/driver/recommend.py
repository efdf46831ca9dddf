"""Kernel profiling, classification and the persistency-model recommendation.

The mechanism choice is a heuristic approximation of measured per-kernel
preferences:

* CTA scope: ``wt`` when every global store is a top-level statement (a
  streaming or trailing store pattern, where write-through skips the
  allocate-then-flush round trip); ``clwb`` when stores sit inside loops or
  branches, where a write-back cache can merge repeated updates first.
* Loop scope: ``l2wb`` for the epoch model and ``clwb`` for the transaction when
  the loop rewrites at least one shared word per thread (heavy shared state
  whose persists overlap well); ``wt`` otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

from gpupm.lang.ir import (
    GridConfig, KernelProgram, Mech, Model, PersistencyDirective, Program, Scope,
)
from gpupm.memsim import MachineConfig, simulate
from gpupm.passes.classify import KernelClass, KernelProfile, classify_kernel
from gpupm.passes.common import PassError
from gpupm.passes.epoch import find_loop, shadow_decls
from gpupm.passes.idempotency import IdempotencyResult, analyze_idempotency
from gpupm.refexec.image import MemoryImage
from gpupm.refexec.interp import launch_contexts


@dataclass(frozen=True)
class Recommendation:
    kernel: str
    kernel_class: KernelClass
    persistency: PersistencyDirective
    transaction: PersistencyDirective
    reason: str


def profile_launches(program: Program, grid: GridConfig, cfg: MachineConfig,
                     inputs: MemoryImage, seed: int = 0) -> list[KernelProfile]:
    """Per-launch timing of the uninstrumented program."""
    out = simulate(program, grid, cfg.with_(wpq_durable=False), inputs, seed=seed)
    return [KernelProfile(p.kernel, p.cycles, tuple(p.cta_cycles[c] for c in sorted(p.cta_cycles)))
            for p in out.launches]


def _streaming_stores(kernel: KernelProgram) -> bool:
    top = {id(s) for s in kernel.body}
    return all(id(s) in top for s in kernel.global_stores())


def _shared_heavy(kernel: KernelProgram, grid: GridConfig) -> bool:
    try:
        loop = find_loop(kernel)
    except PassError:
        return False
    words = sum(n for _, n in shadow_decls(kernel, loop).values())
    return words >= grid.cta_dim


def choose_mech(kernel: KernelProgram, scope: Scope, grid: GridConfig, tx: bool) -> Mech:
    if scope is Scope.KERNEL:
        return Mech.L2WB
    if scope is Scope.CTA:
        return Mech.WT if _streaming_stores(kernel) else Mech.CLWB
    if _shared_heavy(kernel, grid):
        return Mech.CLWB if tx else Mech.L2WB
    return Mech.WT


def recommend_model(kernel: KernelProgram, profile: KernelProfile, idem: IdempotencyResult | None,
                    threshold: float, grid: GridConfig, *, durable_wpq: bool = True
                    ) -> Recommendation:
    """Persistency and transaction directives for one launch of ``kernel``.

    ``idem`` is the idempotency verdict at the transaction scope; when the
    scope is idempotent (or, at kernel scope, only part of the output needs
    logging) the idempotency optimization is switched on.
    """
    cls = classify_kernel(profile, threshold)
    scope = {KernelClass.SHORT: Scope.KERNEL, KernelClass.LONG_SHORT_CTA: Scope.CTA,
             KernelClass.LONG_LONG_CTA: Scope.LOOP}[cls]
    if scope is Scope.LOOP and not kernel.loops():
        scope = Scope.CTA
    pm = PersistencyDirective(Model.EPOCH, scope, choose_mech(kernel, scope, grid, False),
                              durable_wpq)
    tx_scope, why = scope, f"class {cls.value}"
    if kernel.has_atomics() and scope is not Scope.KERNEL:
        tx_scope, why = Scope.KERNEL, f"class {cls.value}; atomics force kernel-level transactions"
    use_idem = False
    if idem is not None:
        use_idem = idem.idempotent or (tx_scope is Scope.KERNEL and bool(idem.must_log)
                                       and not idem.whole_arrays and not idem.opaque_writes)
    dt = PersistencyDirective(Model.EPOCH, tx_scope, choose_mech(kernel, tx_scope, grid, True),
                              durable_wpq, tx=True, idem=use_idem)
    return Recommendation(kernel.name, cls, pm, dt, why)


def recommend_program(program: Program, grid: GridConfig, cfg: MachineConfig,
                      inputs: MemoryImage, threshold: float, *, seed: int = 0,
                      durable_wpq: bool = True) -> list[Recommendation]:
    """One recommendation per launch of ``program``."""
    profiles = profile_launches(program, grid, cfg, inputs, seed)
    out = []
    for ctx, prof in zip(launch_contexts(program, grid), profiles):
        first = recommend_model(ctx.kernel, prof, None, threshold, ctx.grid,
                                durable_wpq=durable_wpq)
        idem = analyze_idempotency(first.transaction.scope.value, ctx=ctx)
        out.append(recommend_model(ctx.kernel, prof, idem, threshold, ctx.grid,
                                   durable_wpq=durable_wpq))
    return out


def program_directive(recs: list[Recommendation], transaction: bool = True
                      ) -> PersistencyDirective:
    """A single directive covering every launch.

    Launches that disagree fall back to the widest scope among them (kernel
    beats CTA beats loop), since a kernel-level protocol protects any kernel.
    """
    picks = [r.transaction if transaction else r.persistency for r in recs]
    order = {Scope.KERNEL: 0, Scope.CTA: 1, Scope.LOOP: 2}
    best = min(picks, key=lambda d: order[d.scope])
    if all(p == best for p in picks):
        return best
    same = [p for p in picks if p.scope is best.scope]
    return PersistencyDirective(best.model, best.scope, same[0].mech, best.durable_wpq, best.tx,
                                all(p.idem for p in same))

