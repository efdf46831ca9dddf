"""Instrumentation passes, idempotency analysis and classification."""

from __future__ import annotations

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from gpupm import corpus
from gpupm.lang import directive, format_kernel, format_program, parse, parse_label
from gpupm.lang.ir import GridConfig, Mech, Model, PersistencyDirective, Scope
from gpupm.passes import (
    KernelClass, KernelProfile, PassError, analyze_idempotency, classify_kernel, compile_program,
    transform_epoch_cta, transform_strict,
)
from gpupm.passes.idempotency import ANTI_DEPENDENCY, CLEAN, HAS_ATOMIC, OPAQUE_ALIAS
from gpupm.refexec import cta_region, kernel_region, loop_region, record_rw_sets, run_reference
from gpupm.refexec.interp import launch_contexts
from gpupm.refexec.regions import state_before

LABELS = [
    "SP_wt", "SP_clwb", "SP_clwb_pct", "EP_K", "EP_K_pct", "EP_C_wt", "EP_C_clwb",
    "EP_C_clwb_pct", "EP_C_l2wb", "EP_L_l2wb", "EP_L_clwb_pct", "Undo_K", "Undo_K_idem",
    "Undo_C_wt", "Undo_C_wt_idem", "Undo_C_clwb_pct", "Undo_L_l2wb", "Undo_L_wt_idem",
]


def _kernel_text(c, name: str) -> list[str]:
    k = c.program.kernel(name)
    return [ln.strip() for ln in format_kernel(k).splitlines()]


def _host_text(c) -> list[str]:
    text = format_program(c.program)
    host = text[text.index("host {"):]
    return [ln.strip() for ln in host.splitlines()[1:-1]]


def _compile(name: str, label: str | None, **kw):
    e = corpus.get(name)
    d = parse_label(label) if label else None
    return e, compile_program(e.program(), d, e.grid, **kw)


def _loopless(e, label: str) -> bool:
    return "_L" in label and not any(k.loops() for k in e.program().kernels)


# ------------------------------------------------------------------ semantic preservation

@given(st.sampled_from(sorted(corpus.CORPUS)), st.sampled_from(LABELS), st.integers(0, 50))
def test_instrumentation_preserves_failure_free_results(name, label, seed):
    assume(not _loopless(corpus.get(name), label))
    e, c = _compile(name, label)
    inputs = e.inputs(seed)
    want = run_reference(e.program(), e.grid, inputs)
    got = run_reference(c.program, c.grid, inputs)
    assert got.same_data(want), got.diff(want)[:5]


def test_instrumented_programs_reparse(entry):
    for label in LABELS:
        if _loopless(entry, label):
            continue
        c = compile_program(entry.program(), parse_label(label), entry.grid)
        assert parse(format_program(c.program)) == c.program


def test_baseline_is_untouched(entry):
    c = compile_program(entry.program(), None, entry.grid)
    assert c.program is c.original and not c.transactional


def test_unknown_mutation_rejected():
    e = corpus.get("mini-lbm")
    with pytest.raises(PassError, match="mutation"):
        compile_program(e.program(), parse_label("Undo_C_wt"), e.grid, mutate="bogus")


# ------------------------------------------------------------------ strict persistency

def test_strict_wt_writes_through_and_fences_each_store():
    _, c = _compile("mini-lbm", "SP_wt")
    lines = _kernel_text(c, "lbm")
    stores = [i for i, ln in enumerate(lines) if ln.startswith("st.wt dst")]
    assert len(stores) == 2
    assert all(lines[i + 1] == "sfence" for i in stores)
    assert not any(ln.startswith("dst[") for ln in lines)


@pytest.mark.parametrize("pct", [False, True])
def test_strict_clwb_persists_each_store_in_order(pct):
    _, c = _compile("mini-lbm", "SP_clwb" + ("_pct" if pct else ""))
    lines = _kernel_text(c, "lbm")
    tail = ["sfence", "pcommit", "sfence"] if pct else ["sfence"]
    for target in ("dst[gid]", "dst[gid + n]"):
        i = next(i for i, ln in enumerate(lines) if ln.startswith(target + " ="))
        assert lines[i + 1] == f"clwb {target}"
        assert lines[i + 2:i + 2 + len(tail)] == tail


def test_strict_clwb_covers_atomics():
    _, c = _compile("mini-histo", "SP_clwb")
    lines = _kernel_text(c, "histo1")
    i = next(i for i, ln in enumerate(lines) if "atomic.add" in ln)
    assert lines[i + 1].startswith("clwb bins[") and lines[i + 2] == "sfence"


def test_transform_strict_rejects_other_models():
    k = corpus.get("mini-lbm").program().kernel("lbm")
    with pytest.raises(PassError):
        transform_strict(k, parse_label("EP_C_clwb"))


# ------------------------------------------------------------------ epoch persistency

@pytest.mark.parametrize("pct", [False, True])
def test_epoch_cta_clwb_persists_all_stores_once_at_exit(pct):
    _, c = _compile("mini-lbm", "EP_C_clwb" + ("_pct" if pct else ""))
    lines = _kernel_text(c, "lbm")
    body = lines[1:-1]
    tail = ["sfence", "pcommit", "sfence"] if pct else ["sfence"]
    assert body[-len(tail) - 2:] == ["clwb dst[gid]", "clwb dst[gid + n]"] + tail
    assert body.count("sfence") == len([t for t in tail if t == "sfence"])


def test_epoch_cta_wt_fences_once():
    _, c = _compile("mini-lbm", "EP_C_wt")
    lines = _kernel_text(c, "lbm")[1:-1]
    assert lines[-1] == "sfence" and lines.count("sfence") == 1
    assert sum(ln.startswith("st.wt dst") for ln in lines) == 2


def test_epoch_cta_l2wb_flushes_from_one_thread_after_a_barrier():
    _, c = _compile("mini-lbm", "EP_C_l2wb")
    lines = _kernel_text(c, "lbm")[1:-1]
    assert lines[-5:] == ["syncthreads", "if tid == 0 {", "l2wb", "sfence", "}"]


def test_single_store_kernel_matches_strict_under_epoch_cta():
    _, ep = _compile("mini-stencil", "EP_C_clwb")
    _, sp = _compile("mini-stencil", "SP_clwb")
    assert format_program(ep.program) == format_program(sp.program)


def test_epoch_cta_reports_unsliceable_address():
    p = parse("kernel k(global a, global b) {\n  j = a[tid]\n  a[tid] = 0\n  b[j] = 1\n"
              "  j = 0\n}\nhost {\n  alloc a 8\n  alloc b 8\n  launch k(a, b)\n}\n")
    with pytest.raises(PassError, match="cannot regenerate"):
        transform_epoch_cta(p.kernel("k"), parse_label("EP_C_clwb"))


def test_epoch_kernel_adds_host_flush_between_launches():
    _, c = _compile("mini-histo", "EP_K")
    host = _host_text(c)
    first = host.index(next(s for s in host if s.startswith("launch histo1")))
    assert host[first + 1:first + 4] == ["sync", "l2wb", "sync"]
    second = host.index(next(s for s in host if s.startswith("launch histo2")))
    assert host[second + 1:second + 4] == ["sync", "l2wb", "sync"]
    assert c.program.kernels == c.original.kernels


def test_epoch_kernel_pct_commits_after_flush():
    _, c = _compile("mini-lbm", "EP_K_pct")
    host = _host_text(c)
    i = host.index("l2wb")
    assert host[i - 1:i + 3] == ["sync", "l2wb", "pcommit", "sync"]


def test_epoch_loop_shadows_shared_state():
    _, c = _compile("mini-tpacf", "EP_L_l2wb")
    names = {d.name for d in c.program.devices}
    assert "__shadow_tpacf_s_hists" in names
    lines = _kernel_text(c, "tpacf")
    i = lines.index("s_hists[tid * 4 + bin] = h + 1")
    assert lines[i + 1].startswith("__shadow_tpacf_s_hists[")
    assert lines.count("l2wb") == 2


def test_epoch_loop_requires_a_loop():
    e = corpus.get("mini-lbm")
    with pytest.raises(PassError, match="no loop"):
        compile_program(e.program(), parse_label("EP_L_l2wb"), e.grid)


# ------------------------------------------------------------------ transactions

def test_undo_cta_protocol_order():
    _, c = _compile("mini-lbm", "Undo_C_wt")
    lines = _kernel_text(c, "lbm")
    log = max(i for i, ln in enumerate(lines) if ln.startswith("st.wt __log_lbm_dst"))
    intx = lines.index("st.wt __flag_lbm[ctaid], 1")
    out = min(i for i, ln in enumerate(lines) if ln.startswith("st.wt dst["))
    done = lines.index("st.wt __flag_lbm[ctaid], 2")
    assert log < intx < out < done
    assert "sfence" in lines[log:intx] and "sfence" in lines[intx:out]
    assert lines[intx + 1] == "sfence" and lines[done + 1] == "sfence"
    launch = c.launches[0]
    assert launch.scope == "cta" and not launch.idempotent
    assert launch.log_map == {"__log_lbm_dst": "dst"}


def test_undo_cta_idempotent_drops_the_log():
    _, c = _compile("mini-lbm", "Undo_C_wt_idem")
    assert not any(d.name.startswith("__log") for d in c.program.devices)
    assert c.launches[0].idempotent
    lines = _kernel_text(c, "lbm")
    assert lines.count("st.wt __flag_lbm[ctaid], 1") == 1
    assert "if tid == 0 {" in lines


def test_undo_cta_clwb_pct_commits_log_before_flag():
    _, c = _compile("mini-lbm", "Undo_C_clwb_pct")
    lines = _kernel_text(c, "lbm")
    log = max(i for i, ln in enumerate(lines) if ln.startswith("st.wt __log"))
    assert lines[log + 1:log + 4] == ["sfence", "pcommit", "sfence"]
    i = lines.index("clwb dst[gid + n]")
    assert lines[i - 1] == "clwb dst[gid]" and lines[i + 1:i + 4] == ["sfence", "pcommit", "sfence"]


def test_atomics_promote_cta_transaction_to_kernel():
    _, c = _compile("mini-histo", "Undo_C_wt")
    by_kernel = {t.kernel: t for t in c.launches}
    assert by_kernel["histo1"].scope == "kernel"
    assert by_kernel["histo2"].scope == "cta"
    assert any("histo1" in m and "promoted" in m for m in c.diagnostics)
    assert "flag __tx_histo1_0 = InTx" in _host_text(c)


def test_atomics_inside_loop_promote_loop_transaction():
    _, c = _compile("mini-bfs2", "Undo_L_l2wb")
    assert c.launches[0].scope == "kernel"
    assert c.diagnostics


def test_undo_loop_logs_shadow_per_iteration():
    _, c = _compile("mini-tpacf", "Undo_L_l2wb")
    lines = _kernel_text(c, "tpacf")
    assert any(ln.startswith("st.wt __last_log_iter_tpacf[ctaid]") for ln in lines)
    assert any(ln.startswith("st.wt __last_iter_tpacf[ctaid]") for ln in lines)
    assert c.launches[0].scope == "loop"
    assert _host_text(c)[-3:] == ["sync", "flag __done_tpacf_0 = Complete", "consume hists"]


def test_kernel_transaction_host_protocol():
    _, c = _compile("mini-bfs1", "Undo_K", unified=True)
    host = _host_text(c)
    copy = host.index("memcpy __log_k0_cost, cost, 0, 32")
    flag = host.index("flag __tx_bfs1_0 = InTx")
    launch = host.index("launch bfs1(cost)")
    done = host.index("flag __tx_bfs1_0 = Complete")
    assert copy < flag < launch < done
    assert host[launch + 1:launch + 4] == ["sync", "l2wb", "sync"]


def test_host_copy_serves_as_kernel_log_without_unified_memory():
    _, c = _compile("mini-bfs1", "Undo_K")
    assert c.launches[0].log_ranges == [] and c.launches[0].host_backed == {"cost"}
    assert not any(s.startswith("memcpy") for s in _host_text(c))


def test_kernel_idem_log_is_minimised_to_must_log():
    _, full = _compile("mini-bfs1", "Undo_K", unified=True)
    _, idem = _compile("mini-bfs1", "Undo_K_idem", unified=True)
    assert idem.launches[0].log_ranges == [("__log_k0_cost", "cost", 0, 16)]
    assert full.launches[0].log_ranges == [("__log_k0_cost", "cost", 0, 32)]


# ------------------------------------------------------------------ idempotency analysis

def _ctx(name: str, i: int = 0):
    e = corpus.get(name)
    return e, launch_contexts(e.program(), e.grid)[i]


@pytest.mark.parametrize("name,launch,scope,idem,reason", [
    ("mini-lbm", 0, "kernel", True, CLEAN),
    ("mini-lbm", 0, "cta", True, CLEAN),
    ("mini-histo", 0, "kernel", False, HAS_ATOMIC),
    ("mini-histo", 1, "cta", True, CLEAN),
    ("mini-stencil", 0, "cta", True, CLEAN),
    ("mini-stencil", 0, "loop", True, CLEAN),
    ("mini-tpacf", 0, "cta", True, CLEAN),
    ("mini-tpacf", 0, "loop", False, OPAQUE_ALIAS),
    ("mini-bfs1", 0, "kernel", False, ANTI_DEPENDENCY),
    ("mini-bfs2", 0, "kernel", False, HAS_ATOMIC),
])
def test_idempotency_verdicts(name, launch, scope, idem, reason):
    _, ctx = _ctx(name, launch)
    r = analyze_idempotency(scope, ctx=ctx)
    assert (r.idempotent, r.reason) == (idem, reason)


def test_histo_atomic_logs_whole_array():
    _, ctx = _ctx("mini-histo")
    r = analyze_idempotency("kernel", ctx=ctx)
    assert "bins" in r.whole_arrays
    assert r.log_bytes({"bins": 4}) == 16


def test_bfs1_must_log_is_exact():
    e, ctx = _ctx("mini-bfs1")
    r = analyze_idempotency("kernel", ctx=ctx)
    assert r.must_log == {("cost", i) for i in range(16)}
    assert r.ranges() == [("cost", 0, 16)]
    s = state_before(e.program(), e.grid, e.inputs(0), 0)
    assert record_rw_sets(kernel_region(e.program(), e.grid), s).overwritten_live_in == r.must_log


def _dynamic_regions(e, li, scope):
    prog = e.program()
    if scope == "kernel":
        return [kernel_region(prog, e.grid, li)]
    ctx = launch_contexts(prog, e.grid)[li]
    if scope == "cta":
        return [cta_region(prog, e.grid, c, li) for c in range(ctx.grid.grid_dim)]
    return [loop_region(prog, e.grid, c, 0, li) for c in range(ctx.grid.grid_dim)]


@pytest.mark.parametrize("name,li,scope", [
    ("mini-lbm", 0, "kernel"), ("mini-lbm", 0, "cta"), ("mini-histo", 1, "cta"),
    ("mini-stencil", 0, "kernel"), ("mini-tpacf", 0, "cta"), ("mini-bfs1", 0, "kernel"),
    ("mini-bfs1", 0, "cta"), ("mini-histo", 0, "kernel"), ("mini-bfs2", 0, "kernel"),
])
@pytest.mark.parametrize("seed", range(4))
def test_must_log_covers_dynamic_overwritten_live_in(name, li, scope, seed):
    e, ctx = _ctx(name, li)
    r = analyze_idempotency(scope, ctx=ctx)
    s = state_before(e.program(), e.grid, e.inputs(seed), li)
    for region in _dynamic_regions(e, li, scope):
        dyn = record_rw_sets(region, s).overwritten_live_in
        assert r.covers(dyn), (region.describe(), sorted(dyn)[:4])
        if r.idempotent:
            assert not dyn


def test_must_log_is_tight_for_affine_kernels():
    for name in ("mini-lbm", "mini-bfs1", "mini-stencil"):
        e, ctx = _ctx(name)
        r = analyze_idempotency("kernel", ctx=ctx)
        s = state_before(e.program(), e.grid, e.inputs(0), 0)
        dyn = record_rw_sets(kernel_region(e.program(), e.grid), s).overwritten_live_in
        assert set(r.must_log) == dyn


def test_opaque_write_aliasing_a_read_is_not_idempotent():
    p = parse("kernel k(global a, global idx) {\n  j = idx[tid]\n  v = a[tid]\n"
              "  a[j] = v + 1\n}\nhost {\n  alloc a 8\n  alloc idx 8\n  launch k(a, idx)\n}\n")
    ctx = launch_contexts(p, GridConfig(1, 8))[0]
    r = analyze_idempotency("kernel", ctx=ctx)
    assert r.reason == OPAQUE_ALIAS and "a" in r.whole_arrays


def test_analysis_requires_context():
    with pytest.raises(ValueError):
        analyze_idempotency("kernel")


# ------------------------------------------------------------------ classification

@pytest.mark.parametrize("cycles,ctas,want", [
    (100, (50, 50), KernelClass.SHORT),
    (2000, (100, 200), KernelClass.LONG_SHORT_CTA),
    (2000, (1500, 1700), KernelClass.LONG_LONG_CTA),
    (2000, (), KernelClass.SHORT),
    (960, (959, 959), KernelClass.LONG_SHORT_CTA),
    (960, (960,), KernelClass.LONG_LONG_CTA),
])
def test_classify_kernel(cycles, ctas, want):
    assert classify_kernel(KernelProfile("k", cycles, ctas), 960) is want


@given(st.integers(0, 10 ** 6), st.lists(st.integers(0, 10 ** 6), min_size=1, max_size=8),
       st.integers(1, 10 ** 6))
def test_classification_respects_threshold(cycles, ctas, threshold):
    cls = classify_kernel(KernelProfile("k", cycles, tuple(ctas)), threshold)
    if cycles < threshold:
        assert cls is KernelClass.SHORT
    else:
        mean = sum(ctas) / len(ctas)
        assert cls is (KernelClass.LONG_LONG_CTA if mean >= threshold else KernelClass.LONG_SHORT_CTA)


def test_directive_helpers_agree():
    assert directive("epoch cta clwb pct") == PersistencyDirective(
        Model.EPOCH, Scope.CTA, Mech.CLWB, False, False, False)
