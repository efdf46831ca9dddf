"""Crash recovery, crash-point sweeps and repro bundles."""

from __future__ import annotations

import json

import pytest

from gpupm import corpus
from gpupm.harness import (
    RecoveryError, RecoveryInterrupted, RecoveryPolicy, Sampling, load_bundle, recover,
    recover_and_resume, replay_bundle, resume, sweep_crash_points,
)
from gpupm.lang import parse_label
from gpupm.lang.ir import Flag, GridConfig
from gpupm.memsim import desk_config
from gpupm.passes import compile_program
from gpupm.refexec import run_reference


def _setup(name: str, label: str, grid: GridConfig | None = None, seed: int = 0, **kw):
    e = corpus.get(name)
    g = grid or e.grid
    c = compile_program(e.program(), parse_label(label), g, **kw)
    inputs = e.inputs(seed)
    return c, inputs, run_reference(e.program(), g, inputs)


def _finished(c, inputs):
    return run_reference(c.program, c.grid, inputs)


# ------------------------------------------------------------------ recover

def test_all_complete_needs_no_action():
    c, inputs, oracle = _setup("mini-lbm", "Undo_C_wt")
    rec = recover(_finished(c, inputs), c, inputs)
    assert rec.marks is None and rec.actions == []
    assert resume(rec, c).same_data(oracle)


def _lbm_cta_in_tx(label: str, cta: int = 2):
    c, inputs, oracle = _setup("mini-lbm", label)
    img = _finished(c, inputs)
    img.arrays["__flag_lbm"][cta] = Flag.IN_TX.value
    for g in range(cta * 8, cta * 8 + 8):
        img.arrays["dst"][g] = img.arrays["dst"][g + 32] = 999
    return c, inputs, oracle, img


def test_cta_in_transaction_is_restored_and_rerun():
    c, inputs, oracle, img = _lbm_cta_in_tx("Undo_C_wt")
    rec = recover(img, c, inputs)
    kinds = [(a.kind, a.cta) for a in rec.actions]
    assert ("reexecuted_cta", 2) in kinds and ("restored_range", 2) in kinds
    assert {a.cta for a in rec.actions} == {2} and rec.marks.ctas == [2]
    assert all(rec.image.arrays["dst"][g] == 0 for g in range(16, 24))
    assert resume(rec, c).same_data(oracle)


def test_idempotent_cta_is_rerun_without_restore():
    c, inputs, oracle, img = _lbm_cta_in_tx("Undo_C_wt_idem")
    assert RecoveryPolicy.of(c.launches[0]).idempotent_reexec
    rec = recover(img, c, inputs)
    assert [a.kind for a in rec.actions] == ["reexecuted_cta"]
    assert resume(rec, c).same_data(oracle)


def test_initial_cta_runs_without_recovery_action():
    c, inputs, oracle = _setup("mini-lbm", "Undo_C_wt")
    img = _finished(c, inputs)
    img.arrays["__flag_lbm"][3] = Flag.INITIAL.value
    rec = recover(img, c, inputs)
    assert rec.actions == [] and rec.marks.ctas == [3]
    assert resume(rec, c).same_data(oracle)


def test_recover_is_idempotent():
    c, inputs, _, img = _lbm_cta_in_tx("Undo_C_wt")
    once = recover(img, c, inputs)
    twice = recover(once.image, c, inputs)
    assert twice.image == once.image and twice.actions == once.actions


@pytest.mark.parametrize("label", ["Undo_C_wt", "Undo_C_wt_idem"])
def test_crash_during_recovery_recovers_again(label):
    c, inputs, oracle, img = _lbm_cta_in_tx(label)
    interrupted = 0
    for budget in range(0, 24):
        rec = recover(img, c, inputs)
        try:
            resume(rec, c, budget=budget)
        except RecoveryInterrupted:
            interrupted += 1
            final, _ = recover_and_resume(rec.image, c, inputs)
            assert final.same_data(oracle), budget
    assert interrupted > 0


def test_corrupt_flag_is_reported():
    c, inputs, _ = _setup("mini-lbm", "Undo_C_wt")
    img = _finished(c, inputs)
    img.arrays["__flag_lbm"][1] = 7
    with pytest.raises(RecoveryError, match="corrupt flag"):
        recover(img, c, inputs)


def test_missing_flag_region_is_reported():
    c, inputs, _ = _setup("mini-lbm", "Undo_C_wt")
    img = _finished(c, inputs)
    del img.arrays["__flag_lbm"]
    with pytest.raises(RecoveryError, match="missing"):
        recover(img, c, inputs)


def test_kernel_transaction_restores_host_inputs():
    c, inputs, oracle = _setup("mini-bfs1", "Undo_K")
    img = _finished(c, inputs)
    img.flags["__tx_bfs1_0"] = Flag.IN_TX
    img.arrays["cost"][3] = -1
    rec = recover(img, c, inputs)
    assert [a.kind for a in rec.actions] == ["restored_range", "reexecuted_kernel"]
    assert resume(rec, c).same_data(oracle)
    with pytest.raises(RecoveryError, match="host input copy"):
        recover(img, c, None)


def test_loop_transaction_resumes_mid_loop():
    c, inputs, oracle = _setup("mini-tpacf", "Undo_L_l2wb")
    res = sweep_crash_points(c, desk_config(), inputs, sampling=Sampling("stride", 7))
    assert res.passed, res.summary()
    iters = {a.iteration for o in res.outcomes for a in o.actions
             if a.kind == "reexecuted_iteration"}
    assert iters - {0}


# ------------------------------------------------------------------ sweeps

def test_lbm_two_cta_exhaustive_sweep_passes():
    c, inputs, _ = _setup("mini-lbm", "Undo_C_wt", GridConfig(2, 8))
    res = sweep_crash_points(c, desk_config(), inputs)
    assert res.mode == "recovery" and res.passed
    assert len(res.outcomes) == res.events + 1 and res.pass_rate == 1.0
    lo, hi, _ = res.action_stats()
    assert lo == 0 and hi >= 2


@pytest.mark.parametrize("name,label", [
    ("mini-histo", "Undo_C_wt"), ("mini-bfs1", "Undo_C_clwb_pct"), ("mini-stencil", "Undo_K_idem"),
    ("mini-bfs2", "Undo_K"), ("mini-tpacf", "Undo_C_l2wb_idem"),
])
def test_sampled_sweeps_pass(name, label):
    c, inputs, _ = _setup(name, label, seed=3)
    res = sweep_crash_points(c, desk_config(), inputs, sampling=Sampling("seeded", 40), seed=3)
    assert res.passed, res.summary()


def test_non_transactional_directive_runs_ordering_checks_only():
    c, inputs, _ = _setup("mini-lbm", "EP_C_clwb")
    res = sweep_crash_points(c, desk_config(), inputs)
    assert res.mode == "ordering" and res.outcomes == [] and res.passed
    assert "epoch_cta" in res.checks
    assert "not guaranteed" in res.summary()


CANARIES = [
    ("flag_before_log", "mini-bfs1", "Undo_C_wt"),
    ("no_output_persist", "mini-lbm", "Undo_C_wt"),
    ("no_pcommit", "mini-lbm", "Undo_C_clwb_pct"),
    ("unpersisted_log", "mini-bfs1", "Undo_C_clwb_pct"),
]


@pytest.mark.parametrize("mutation,name,label", CANARIES)
def test_injected_protocol_bugs_are_caught(mutation, name, label, tmp_path):
    c, inputs, _ = _setup(name, label, mutate=mutation)
    res = sweep_crash_points(c, desk_config(), inputs, bundle_dir=tmp_path / "b")
    assert not res.passed and res.failures
    assert res.bundle is not None
    replayed = replay_bundle(res.bundle)
    assert not replayed.passed and replayed.crash_at == res.failures[0].crash_at


def test_bundle_round_trip(tmp_path):
    c, inputs, _ = _setup("mini-lbm", "Undo_C_wt", mutate="no_output_persist")
    res = sweep_crash_points(c, desk_config(), inputs, bundle_dir=tmp_path)
    meta = json.loads((tmp_path / "bundle.json").read_text())
    assert meta["label"] == "Undo_C_wt" and meta["options"]["mutate"] == "no_output_persist"
    b = load_bundle(tmp_path)
    assert b.crash_at == res.failures[0].crash_at and b.inputs == inputs
    assert b.cfg == desk_config(wpq_durable=True)


def test_bundle_with_edited_instrumentation_is_rejected(tmp_path):
    c, inputs, _ = _setup("mini-lbm", "Undo_C_wt", mutate="no_output_persist")
    sweep_crash_points(c, desk_config(), inputs, bundle_dir=tmp_path)
    path = tmp_path / "instrumented.gpm"
    path.write_text(path.read_text().replace("sfence", "pcommit", 1))
    with pytest.raises(ValueError, match="differs"):
        load_bundle(tmp_path)


# ------------------------------------------------------------------ sampling

def test_sampling_selection():
    assert Sampling().select(3) == [0, 1, 2, 3]
    assert Sampling("stride", 4).select(10) == [0, 4, 8, 10]
    s = Sampling.parse("seeded:5")
    assert s.select(100, 1) == s.select(100, 1) and len(s.select(100, 1)) == 5
    assert str(s) == "seeded:5" and Sampling.parse("exhaustive") == Sampling()
    with pytest.raises(ValueError):
        Sampling.parse("sometimes")
    with pytest.raises(ValueError):
        Sampling("stride", 0)
