"""Ordering invariants stated over a finished run's durability trace."""

from __future__ import annotations

from gpupm.memsim.simulate import SimOutcome

INF = float("inf")


def strict_order_violations(out: SimOutcome) -> list[str]:
    """Per thread, a store to another line never becomes durable before an earlier store.

    Stores that never became durable count as durable at infinity, so a lost
    store followed by a durable one is a violation.
    """
    bad = []
    for (launch, cta, tid), recs in sorted(out.thread_stores.items()):
        for j, later in enumerate(recs):
            dj = out.durable_at.get(later.sid, INF)
            if dj == INF:
                continue
            for earlier in recs[:j]:
                di = out.durable_at.get(earlier.sid, INF)
                if earlier.line != later.line and not di < dj:
                    bad.append(f"launch {launch} cta {cta} thread {tid}: "
                               f"{earlier.array}[{earlier.index}] durable at {di}, after "
                               f"{later.array}[{later.index}] at {dj}")
    return bad


def persist_atomicity_violations(out: SimOutcome) -> list[str]:
    """Durability events for one word carry non-decreasing store ids (recomputed from the trace)."""
    last: dict[tuple[str, int], int] = {}
    bad = []
    for e in out.trace:
        for i, _, sid in e.words:
            key = (e.array, i)
            if sid < last.get(key, 0):
                bad.append(f"event {e.event}: {e.array}[{i}] store {sid} after {last[key]}")
            last[key] = max(sid, last.get(key, 0))
    return bad


def epoch_loop_violations(out: SimOutcome) -> list[str]:
    """At every annotated loop iteration end, the warp's earlier global stores are durable."""
    return [f"launch {b.launch} cta {b.cta} warp {b.warp} iteration {b.iteration}: "
            f"{b.undurable} stores not durable"
            for b in out.boundaries if b.kind == "loop" and b.undurable]


def epoch_cta_violations(out: SimOutcome) -> list[str]:
    """At every CTA end, all of the CTA's global stores are durable."""
    return [f"launch {b.launch} cta {b.cta}: {b.undurable} stores not durable at CTA end"
            for b in out.boundaries if b.kind == "cta" and b.undurable]


def replay_mismatch(out: SimOutcome) -> list[str]:
    """Differences between the projected persistent image and a full trace replay."""
    replayed = out.persistent_at(out.events)
    diff = replayed.diff(out.persistent_image)
    aux = [k for k in out.persistent_image.arrays
           if replayed.arrays.get(k) != out.persistent_image.arrays[k]]
    if replayed.flags != out.persistent_image.flags:
        diff.append("host flags differ")
    return diff + [f"{k}: auxiliary region differs" for k in aux if k.startswith("__")]
