"""The nine acceptance criteria. Each prints a PASS/FAIL line in the run summary."""

from __future__ import annotations

from contextlib import contextmanager

import pytest

import test_golden
from conftest import ACCEPTANCE
from gpupm import corpus
from gpupm.driver import program_directive, recommend_program
from gpupm.harness import config_for, sweep_crash_points
from gpupm.lang import parse_label
from gpupm.memsim import (
    desk_config, epoch_loop_violations, persist_atomicity_violations, simulate,
    strict_order_violations,
)
from gpupm.passes import analyze_idempotency, compile_program
from gpupm.refexec import cta_region, kernel_region, loop_region, record_rw_sets, run_region_twice
from gpupm.refexec.interp import launch_contexts
from gpupm.refexec.regions import state_before

NAMES = sorted(corpus.CORPUS)
SEEDS = range(10)


@contextmanager
def criterion(n: int, title: str, note: str = ""):
    try:
        yield
    except BaseException:
        ACCEPTANCE.append((n, title, False, note))
        print(f"criterion {n} {title}: FAIL")
        raise
    ACCEPTANCE.append((n, title, True, ""))
    print(f"criterion {n} {title}: PASS")


def _sim(e, label, seed=0, cfg=None, **kw):
    d = parse_label(label)
    c = compile_program(e.program(), d, e.grid, **kw)
    return c, simulate(c.program, c.grid, config_for(cfg or desk_config(), d), e.inputs(seed),
                       seed=seed)


def _has_loop(e) -> bool:
    return any(k.loops() for k in e.program().kernels)


# ------------------------------------------------------------------ 1

def test_criterion_1_exhaustive_crash_recovery():
    with criterion(1, "crash-recovery exhaustiveness"):
        cfg = desk_config()
        for name in NAMES:
            e = corpus.get(name)
            assert e.grid.grid_dim <= 4 and e.grid.cta_dim <= 8
            recs = recommend_program(e.program(), e.grid, cfg, e.inputs(0),
                                     corpus.CLASS_THRESHOLD)
            c = compile_program(e.program(), program_directive(recs, True), e.grid)
            res = sweep_crash_points(c, cfg, e.inputs(0))
            assert res.mode == "recovery" and len(res.outcomes) == res.events + 1, name
            assert res.pass_rate == 1.0 and res.passed, res.summary()


# ------------------------------------------------------------------ 2

def test_criterion_2_ordering_invariants():
    with criterion(2, "ordering invariants"):
        for name in NAMES:
            e = corpus.get(name)
            for seed in SEEDS:
                for label in ("SP_wt", "SP_clwb", "SP_clwb_pct"):
                    _, out = _sim(e, label, seed)
                    assert strict_order_violations(out) == [], (name, label, seed)
                    assert persist_atomicity_violations(out) == [], (name, label, seed)
                for label in ("EP_C_clwb", "Undo_C_wt", "Undo_K"):
                    _, out = _sim(e, label, seed)
                    assert persist_atomicity_violations(out) == [], (name, label, seed)
                if _has_loop(e):
                    for label in ("EP_L_l2wb", "EP_L_clwb_pct"):
                        _, out = _sim(e, label, seed)
                        assert any(b.kind == "loop" for b in out.boundaries)
                        assert epoch_loop_violations(out) == [], (name, label, seed)
                        assert persist_atomicity_violations(out) == [], (name, label, seed)


# ------------------------------------------------------------------ 3

ALL_LABELS = ["baseline", "SP_wt", "SP_clwb", "SP_clwb_pct", "EP_K", "EP_K_pct", "EP_C_wt",
              "EP_C_clwb", "EP_C_clwb_pct", "EP_C_l2wb", "EP_C_l2wb_pct", "EP_L_l2wb",
              "EP_L_clwb_pct", "Undo_K", "Undo_K_idem_pct", "Undo_C_wt", "Undo_C_clwb_pct",
              "Undo_C_wt_idem", "Undo_L_l2wb", "Undo_L_clwb_pct"]


def test_criterion_3_instruction_postconditions():
    with criterion(3, "instruction semantics postconditions"):
        runs = 0
        for name in NAMES:
            e = corpus.get(name)
            for label in ALL_LABELS:
                if "_L" in label and not _has_loop(e):
                    continue
                for seed in (0, 1):
                    # SimInvariantError would fire inside the run on any broken postcondition
                    c, out = _sim(e, label, seed) if label != "baseline" else (None, simulate(
                        e.program(), e.grid, desk_config(), e.inputs(seed), seed=seed))
                    s = out.stats
                    assert s.l2wb_checks == s.l2wb_count
                    volatile = c is not None and not c.directive.durable_wpq
                    assert s.pcommit_checks == (s.pcommit_count if volatile else 0)
                    clwb_events = sum(1 for t in out.trace if t.cause == "clwb")
                    assert clwb_events <= s.clwb_count - s.clwb_clean
                    runs += 1
        assert runs > 100


# ------------------------------------------------------------------ 4

TABLE_VERDICTS = [  # (kernel, launch, scope checked, idempotent)
    ("mini-lbm", 0, "cta", True),
    ("mini-lbm", 0, "kernel", True),
    ("mini-tpacf", 0, "loop", False),
    ("mini-histo", 0, "kernel", False),
    ("mini-bfs1", 0, "kernel", False),
]


def _regions(e, li, scope):
    prog = e.program()
    ctx = launch_contexts(prog, e.grid)[li]
    if scope == "kernel":
        return [kernel_region(prog, e.grid, li)]
    if scope == "cta":
        return [cta_region(prog, e.grid, c, li) for c in range(ctx.grid.grid_dim)]
    return [loop_region(prog, e.grid, c, it, li)
            for c in range(ctx.grid.grid_dim) for it in range(2)]


def test_criterion_4_idempotency_correctness():
    with criterion(4, "idempotency correctness"):
        for name, li, scope, want in TABLE_VERDICTS:
            ctx = launch_contexts(corpus.get(name).program(), corpus.get(name).grid)[li]
            assert analyze_idempotency(scope, ctx=ctx).idempotent is want, (name, scope)
        checked = 0
        for name in NAMES:
            e = corpus.get(name)
            for li, ctx in enumerate(launch_contexts(e.program(), e.grid)):
                scopes = ["kernel", "cta"] + (["loop"] if ctx.kernel.loops() else [])
                for scope in scopes:
                    try:
                        verdict = analyze_idempotency(scope, ctx=ctx)
                    except Exception:
                        continue
                    if not verdict.idempotent:
                        continue
                    for seed in SEEDS:
                        s = state_before(e.program(), e.grid, e.inputs(seed), li)
                        for region in _regions(e, li, scope):
                            assert run_region_twice(region, s), (name, scope, seed)
                            checked += 1
        assert checked > 0


# ------------------------------------------------------------------ 5

AFFINE = [("mini-lbm", 0), ("mini-stencil", 0), ("mini-bfs1", 0), ("mini-histo", 1),
          ("mini-tpacf", 0)]


def test_criterion_5_log_minimisation():
    with criterion(5, "log minimisation"):
        e = corpus.get("mini-bfs1")
        ctx = launch_contexts(e.program(), e.grid)[0]
        r = analyze_idempotency("kernel", ctx=ctx)
        full = 4 * len(e.inputs(0).arrays["cost"])
        assert 0 < r.log_bytes({"cost": 32}) < full
        for name, li in (("mini-lbm", 0), ("mini-stencil", 0), ("mini-histo", 1)):
            e = corpus.get(name)
            ctx = launch_contexts(e.program(), e.grid)[li]
            for scope in ("kernel", "cta"):
                r = analyze_idempotency(scope, ctx=ctx)
                assert r.idempotent and r.log_bytes({}) == 0, (name, scope)
        for name, li in AFFINE:
            e = corpus.get(name)
            ctx = launch_contexts(e.program(), e.grid)[li]
            for scope in ("kernel", "cta"):
                r = analyze_idempotency(scope, ctx=ctx)
                for seed in SEEDS:
                    s = state_before(e.program(), e.grid, e.inputs(seed), li)
                    dyn = set()
                    for region in _regions(e, li, scope):
                        dyn |= record_rw_sets(region, s).overwritten_live_in
                    assert set(r.must_log) == dyn, (name, scope, seed)


# ------------------------------------------------------------------ 6

# (directive without tx, directive with tx, compile options) at each kernel's effective scope.
# Kernel-scope logs are device-resident (unified, forced) so they reach NVM at all.
TX_PAIRS = {
    "mini-lbm": ("EP_C_clwb", "Undo_C_clwb", {}),
    "mini-stencil": ("EP_C_clwb", "Undo_C_clwb", {}),
    "mini-bfs1": ("EP_C_clwb", "Undo_C_clwb", {}),
    "mini-tpacf": ("EP_L_l2wb", "Undo_L_l2wb", {}),
    "mini-histo": ("EP_K", "Undo_K", {"unified": True, "force_log": True}),
    "mini-bfs2": ("EP_K", "Undo_K", {"unified": True, "force_log": True}),
}

IDEM_PAIRS = [  # idempotent scopes: (kernel, no-tx directive, idem directive, options)
    ("mini-lbm", "EP_C_wt", "Undo_C_wt_idem", {}),
    ("mini-lbm", "EP_C_clwb", "Undo_C_clwb_idem", {}),
    ("mini-lbm", "EP_K", "Undo_K_idem", {"unified": True}),
    ("mini-stencil", "EP_C_clwb", "Undo_C_clwb_idem", {}),
    ("mini-stencil", "EP_K", "Undo_K_idem", {"unified": True}),
    ("mini-tpacf", "EP_C_clwb", "Undo_C_clwb_idem", {}),
    ("mini-histo", "EP_C_wt", "Undo_C_wt_idem", {}),
]


def test_criterion_6_write_count_trends():
    with criterion(6, "write-count trends"):
        for name in NAMES:
            e = corpus.get(name)
            _, ep = _sim(e, "EP_C_clwb")
            _, sp = _sim(e, "SP_wt")
            assert ep.stats.nvm_line_writes <= sp.stats.nvm_line_writes, name
            plain, tx, opts = TX_PAIRS[name]
            _, a = _sim(e, plain)
            _, b = _sim(e, tx, **opts)
            assert b.stats.nvm_line_writes > a.stats.nvm_line_writes, (name, tx)
        for name, plain, idem, opts in IDEM_PAIRS:
            e = corpus.get(name)
            _, a = _sim(e, plain)
            c, b = _sim(e, idem, **opts)
            moved = b.stats.data_line_writes + b.stats.log_line_writes
            assert b.stats.log_line_writes == 0 and moved == a.stats.nvm_line_writes, (name, idem)


# ------------------------------------------------------------------ 7

def _cycles(e, label, seed, cfg=None):
    if label == "baseline":
        return simulate(e.program(), e.grid, cfg or desk_config(), e.inputs(0),
                        seed=seed).stats.cycles
    c = compile_program(e.program(), parse_label(label), e.grid)
    d = c.directive
    return simulate(c.program, c.grid, config_for(cfg or desk_config(), d), e.inputs(0),
                    seed=seed).stats.cycles


def test_criterion_7_strict_overhead_not_below_epoch():
    with criterion(7, "timing trends"):
        e = corpus.get("mini-lbm")
        for seed in SEEDS:
            base = _cycles(e, "baseline", seed)
            sp = _cycles(e, "SP_clwb_pct", seed) - base
            ep = _cycles(e, "EP_C_clwb_pct", seed) - base
            assert sp >= ep, (seed, sp, ep)


CLWB_LABELS = ["SP_clwb", "EP_C_clwb", "EP_L_clwb", "Undo_C_clwb", "Undo_C_clwb_idem",
               "Undo_L_clwb", "Undo_L_clwb_idem"]


def _durable_slower(cfg=None) -> list[str]:
    bad = []
    for name in NAMES:
        e = corpus.get(name)
        for label in CLWB_LABELS:
            if "_L" in label and not _has_loop(e):
                continue
            for seed in range(3):
                durable = _cycles(e, label, seed, cfg)
                volatile = _cycles(e, label + "_pct", seed, cfg)
                if durable > volatile:
                    bad.append(f"{name} {label} seed {seed}: {durable} > {volatile}")
    return bad


@pytest.mark.xfail(strict=True, reason=(
    "mini-bfs2 under SP_clwb and EP_L_clwb: with 8-entry WPQs the durable mode stalls on "
    "queue backpressure and issues extra clwb writebacks of atomically updated lines, so it "
    "runs slower than the volatile mode; the clause holds with 64-entry queues"))
def test_criterion_7_durable_queue_never_slower():
    with criterion(7, "timing trends", "durable-WPQ clause fails on mini-bfs2 at desk WPQ depth"):
        bad = _durable_slower()
        assert bad == [], bad


def test_criterion_7_durable_queue_clause_holds_with_deep_queues():
    assert _durable_slower(desk_config(wpq_depth=64)) == []


# ------------------------------------------------------------------ 8

CANARIES = [
    ("flag_before_log", "mini-bfs1", "Undo_C_wt"),
    ("no_output_persist", "mini-lbm", "Undo_C_wt"),
    ("no_pcommit", "mini-lbm", "Undo_C_clwb_pct"),
    ("unpersisted_log", "mini-bfs1", "Undo_C_clwb_pct"),
]


def test_criterion_8_mutation_canaries():
    with criterion(8, "mutation canaries"):
        for mutation, name, label in CANARIES:
            e = corpus.get(name)
            good = compile_program(e.program(), parse_label(label), e.grid)
            assert sweep_crash_points(good, desk_config(), e.inputs(0)).passed
            bad = compile_program(e.program(), parse_label(label), e.grid, mutate=mutation)
            res = sweep_crash_points(bad, desk_config(), e.inputs(0), stop_on_fail=False)
            assert res.failures, mutation


# ------------------------------------------------------------------ 9

def test_criterion_9_transform_golden_files():
    with criterion(9, "transform golden files"):
        for case in sorted(test_golden.CASES):
            test_golden.test_golden(case)
        for fn in ("test_golden_lbm_sp_clwb", "test_golden_lbm_sp_clwb_pct",
                   "test_golden_lbm_ep_cta_clwb", "test_golden_lbm_undo_cta_clwb_pct",
                   "test_golden_lbm_undo_cta_clwb_idem_pct", "test_golden_lbm_undo_cta_wt",
                   "test_golden_tpacf_ep_loop_l2wb", "test_golden_tpacf_undo_loop_l2wb"):
            getattr(test_golden, fn)()
