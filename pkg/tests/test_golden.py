"""Snapshots of instrumented programs. Set UPDATE_GOLDEN=1 to rewrite them."""

from __future__ import annotations

import os
from pathlib import Path

import pytest

from gpupm import corpus
from gpupm.lang import format_program, parse_label
from gpupm.passes import compile_program

GOLDEN = Path(__file__).parent / "golden"

CASES = {
    "lbm_sp_clwb": ("mini-lbm", "SP_clwb"),
    "lbm_sp_clwb_pct": ("mini-lbm", "SP_clwb_pct"),
    "lbm_ep_cta_clwb": ("mini-lbm", "EP_C_clwb"),
    "lbm_ep_cta_clwb_pct": ("mini-lbm", "EP_C_clwb_pct"),
    "lbm_undo_cta_wt": ("mini-lbm", "Undo_C_wt"),
    "lbm_undo_cta_wt_idem": ("mini-lbm", "Undo_C_wt_idem"),
    "lbm_undo_cta_clwb_pct": ("mini-lbm", "Undo_C_clwb_pct"),
    "lbm_undo_cta_clwb_idem_pct": ("mini-lbm", "Undo_C_clwb_idem_pct"),
    "tpacf_ep_loop_l2wb": ("mini-tpacf", "EP_L_l2wb"),
    "tpacf_ep_loop_l2wb_pct": ("mini-tpacf", "EP_L_l2wb_pct"),
    "tpacf_undo_loop_l2wb": ("mini-tpacf", "Undo_L_l2wb"),
    "histo_undo_cta_promoted": ("mini-histo", "Undo_C_wt"),
    "bfs1_undo_kernel_idem": ("mini-bfs1", "Undo_K_idem"),
}


def _text(name: str, label: str) -> str:
    e = corpus.get(name)
    return format_program(compile_program(e.program(), parse_label(label), e.grid).program)


@pytest.mark.parametrize("case", sorted(CASES))
def test_golden(case):
    text = _text(*CASES[case])
    path = GOLDEN / f"{case}.gpm"
    if os.environ.get("UPDATE_GOLDEN"):
        GOLDEN.mkdir(exist_ok=True)
        path.write_text(text)
    assert path.read_text() == text


def _ops(text: str, kernel_only: bool = True) -> list[str]:
    body = text.split("host {")[0] if kernel_only else text
    out = []
    for ln in body.splitlines():
        ln = ln.strip()
        head = ln.split()[0] if ln else ""
        if head in ("sfence", "pcommit", "l2wb", "clwb", "syncthreads", "st.wt"):
            out.append(head)
        elif "=" in ln and "[" in ln.split("=")[0] and not ln.startswith(("if", "for")):
            out.append("st")
    return out


def test_golden_lbm_sp_clwb():
    assert _ops(_text("mini-lbm", "SP_clwb")) == ["st", "clwb", "sfence"] * 2


def test_golden_lbm_sp_clwb_pct():
    assert _ops(_text("mini-lbm", "SP_clwb_pct")) == \
        ["st", "clwb", "sfence", "pcommit", "sfence"] * 2


def test_golden_lbm_ep_cta_clwb():
    assert _ops(_text("mini-lbm", "EP_C_clwb")) == ["st", "st", "clwb", "clwb", "sfence"]
    assert _ops(_text("mini-lbm", "EP_C_clwb_pct")) == \
        ["st", "st", "clwb", "clwb", "sfence", "pcommit", "sfence"]


def test_golden_lbm_undo_cta_clwb_pct():
    fence = ["sfence", "pcommit", "sfence"]
    assert _ops(_text("mini-lbm", "Undo_C_clwb_pct")) == (
        ["st.wt", "st.wt"] + fence + ["syncthreads", "st.wt"] + fence + ["syncthreads"]
        + ["st", "st", "clwb", "clwb"] + fence + ["syncthreads", "st.wt"] + fence)


def test_golden_lbm_undo_cta_clwb_idem_pct():
    fence = ["sfence", "pcommit", "sfence"]
    # InTx needs only ordering here: a lost InTx leaves Initial, which re-executes too
    assert _ops(_text("mini-lbm", "Undo_C_clwb_idem_pct")) == (
        ["st.wt", "sfence", "st", "st", "clwb", "clwb"] + fence + ["syncthreads", "st.wt"]
        + fence)


def test_golden_lbm_undo_cta_wt():
    assert _ops(_text("mini-lbm", "Undo_C_wt")) == [
        "st.wt", "st.wt", "sfence", "syncthreads", "st.wt", "sfence", "syncthreads",
        "st.wt", "st.wt", "sfence", "syncthreads", "st.wt", "sfence"]
    assert _ops(_text("mini-lbm", "Undo_C_wt_idem")) == [
        "st.wt", "sfence", "st.wt", "st.wt", "sfence", "syncthreads", "st.wt", "sfence"]


def test_golden_tpacf_ep_loop_l2wb():
    ops = _ops(_text("mini-tpacf", "EP_L_l2wb"))
    # shared init, then per iteration the shared store and its shadow mirror
    assert ops == ["st", "st", "st", "sfence", "syncthreads", "l2wb", "sfence",
                   "syncthreads", "syncthreads", "st", "sfence", "syncthreads", "l2wb", "sfence"]


def test_golden_tpacf_undo_loop_l2wb():
    text = _text("mini-tpacf", "Undo_L_l2wb")
    ops = _ops(text)
    assert ops.count("l2wb") == 2
    assert "st.wt __last_log_iter_tpacf[ctaid], i" in text
    body = text.split("host {")[0]
    order = [body.index(s) for s in ("st.wt __last_log_iter_tpacf[ctaid], i",
                                     "st.wt __flag_tpacf[ctaid], 1",
                                     "__shadow_tpacf_s_hists[ctaid * 32 + (tid * 4 + bin)]",
                                     "st.wt __last_iter_tpacf[ctaid], i",
                                     "st.wt __flag_tpacf[ctaid], 2")]
    assert order == sorted(order)
