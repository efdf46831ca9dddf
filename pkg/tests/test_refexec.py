"""Reference interpreter, memory images and the dynamic idempotency oracle."""

from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpupm import corpus
from gpupm.lang import parse
from gpupm.lang.ir import Flag, GridConfig
from gpupm.refexec import (
    ExecFault, MemoryImage, cta_region, kernel_region, loop_region, record_rw_sets,
    run_reference, run_region_twice,
)
from gpupm.refexec.regions import state_before


def _run(name: str, seed: int = 0):
    e = corpus.get(name)
    inputs = e.inputs(seed)
    return e, inputs, run_reference(e.program(), e.grid, inputs)


# ------------------------------------------------------------------ independent oracles

def _tdiv(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return q if (a >= 0) == (b >= 0) else -q


@pytest.mark.parametrize("seed", range(5))
def test_lbm_matches_scalar_evaluation(seed):
    e, inputs, out = _run("mini-lbm", seed)
    src = inputs.arrays["src"]
    n = e.grid.grid_dim * e.grid.cta_dim
    want = [0] * 64
    for g in range(n):
        a, b = src[g], src[g + n]
        m = _tdiv(a + b, 2)
        want[g], want[g + n] = a + m, b - m
    assert out.arrays["dst"] == want
    assert out.arrays["src"] == src


@pytest.mark.parametrize("seed", range(5))
def test_histo_matches_host_histogram(seed):
    _, inputs, out = _run("mini-histo", seed)
    bins = [0] * 4
    for v in inputs.arrays["data"]:
        bins[v & 3] += 1
    assert out.arrays["bins"] == bins
    assert out.arrays["sat"] == [min(c, 3) for c in bins]


@pytest.mark.parametrize("seed", range(3))
def test_stencil_matches_scalar_evaluation(seed):
    _, inputs, out = _run("mini-stencil", seed)
    a = inputs.arrays["a0"]
    n = len(a)
    want = [sum(a[min(max(g + k, 0), n - 1)] for k in (-1, 0, 1)) + a[g] for g in range(n)]
    assert out.arrays["anext"] == want


@pytest.mark.parametrize("seed", range(3))
def test_tpacf_matches_scalar_evaluation(seed):
    e, inputs, out = _run("mini-tpacf", seed)
    pts = inputs.arrays["pts"]
    grid, cta = e.grid.grid_dim, e.grid.cta_dim
    n = grid * cta
    hists = [0] * 16
    for c in range(grid):
        for t in range(cta):
            g = c * cta + t
            for i in range(4):
                for k in range(2):
                    d = pts[g] - pts[(g + i * 2 + k + 1) % n]
                    b = (d + (d >> 2)) & 3
                    if b < 4:
                        hists[c * 4 + b] += 1
    assert out.arrays["hists"] == hists


@pytest.mark.parametrize("seed", range(3))
def test_bfs_kernels_match_scalar_evaluation(seed):
    _, inputs, out = _run("mini-bfs1", seed)
    cost = inputs.arrays["cost"]
    want = list(cost)
    for g in range(16):
        want[g] = cost[g] + cost[g + 16] + 1
    assert out.arrays["cost"] == want

    _, inputs, out = _run("mini-bfs2", seed)
    edges = inputs.arrays["edges"]
    dist = [100] * 8
    for g in range(16):
        for i in range(10):
            e = edges[g * 10 + i] & 7
            dist[e] = min(dist[e], i + 1)
    assert out.arrays["dist"] == dist
    assert out.arrays["visits"] == [10, 10]


def test_no_store_kernel_is_identity():
    p = parse("kernel k(global a) {\n  x = a[tid]\n  y = x * 3\n}\n"
              "host {\n  alloc a 8\n  launch k(a)\n}\n")
    img = MemoryImage({"a": list(range(8))})
    assert run_reference(p, GridConfig(1, 8), img).arrays == img.arrays


def test_reference_is_deterministic(entry):
    inputs = entry.inputs(3)
    a = run_reference(entry.program(), entry.grid, inputs)
    b = run_reference(entry.program(), entry.grid, inputs)
    assert a.dumps() == b.dumps()


# ------------------------------------------------------------------ faults

def test_out_of_bounds_reports_thread_coordinates():
    p = parse("kernel k(global a) {\n  a[tid + 6] = 1\n}\nhost {\n  alloc a 8\n  launch k(a)\n}\n")
    with pytest.raises(ExecFault) as info:
        run_reference(p, GridConfig(1, 4), MemoryImage())
    assert info.value.ctaid == 0 and info.value.tid == 2
    assert "out-of-bounds" in str(info.value)


def test_barrier_divergence_faults():
    p = parse("kernel k(global a) {\n  if tid < 2 {\n    syncthreads\n  }\n}\n"
              "host {\n  alloc a 8\n  launch k(a)\n}\n")
    with pytest.raises(ExecFault, match="barrier divergence"):
        run_reference(p, GridConfig(1, 8), MemoryImage())


def test_zero_loop_step_faults():
    p = parse("kernel k(global a) {\n  s = tid - tid\n  for i = 0, 4, s {\n    a[i] = 1\n  }\n}\n"
              "host {\n  alloc a 8\n  launch k(a)\n}\n")
    with pytest.raises(ExecFault, match="step is zero"):
        run_reference(p, GridConfig(1, 4), MemoryImage())


def test_input_size_mismatch_is_rejected():
    e = corpus.get("mini-lbm")
    with pytest.raises(ValueError, match="elements"):
        run_reference(e.program(), e.grid, MemoryImage({"src": [0] * 3}))


# ------------------------------------------------------------------ images

images = st.builds(
    MemoryImage,
    st.dictionaries(st.from_regex(r"[a-z_]{1,6}", fullmatch=True),
                    st.lists(st.integers(-2 ** 31, 2 ** 31 - 1), max_size=6), max_size=4),
    st.dictionaries(st.from_regex(r"__done_[a-z]{1,4}_[0-9]", fullmatch=True),
                    st.sampled_from(list(Flag)), max_size=3),
    st.dictionaries(st.from_regex(r"[a-z]{1,5}", fullmatch=True),
                    st.integers(-100, 100), max_size=2),
)


@given(images)
def test_image_text_round_trip(img):
    again = MemoryImage.loads(img.dumps())
    assert again == img
    assert again.dumps() == img.dumps()


def test_image_rejects_bad_flag_and_record():
    with pytest.raises(ValueError, match="line 1"):
        MemoryImage.loads("f __done_k_0 Halfway\n")
    with pytest.raises(ValueError, match="unknown record"):
        MemoryImage.loads("z nope\n")


def test_diff_ignores_auxiliary_arrays():
    a = MemoryImage({"x": [1, 2], "__log_k_x": [0]})
    b = MemoryImage({"x": [1, 2], "__log_k_x": [9]})
    assert a.same_data(b)
    b.arrays["x"][1] = 5
    assert a.diff(b) == ["x[1]: 2 != 5"]


# ------------------------------------------------------------------ regions

def _state(name: str, seed: int = 0, launch: int = 0):
    e = corpus.get(name)
    return e, state_before(e.program(), e.grid, e.inputs(seed), launch)


def test_read_only_region_is_idempotent():
    p = parse("kernel k(global a) {\n  x = a[tid]\n}\nhost {\n  alloc a 8\n  launch k(a)\n}\n")
    img = MemoryImage({"a": list(range(8))})
    assert run_region_twice(kernel_region(p, GridConfig(1, 8)), img)


def test_lbm_cta_is_idempotent():
    e, s = _state("mini-lbm")
    for c in range(e.grid.grid_dim):
        assert run_region_twice(cta_region(e.program(), e.grid, c), s)


def test_tpacf_loop_iteration_is_not_idempotent():
    e, s = _state("mini-tpacf")
    assert not run_region_twice(loop_region(e.program(), e.grid, 0, 1), s)


def test_atomic_region_reported_without_execution():
    e, s = _state("mini-histo")
    assert not run_region_twice(kernel_region(e.program(), e.grid, 0), s)


def test_bfs1_kernel_is_not_idempotent():
    e, s = _state("mini-bfs1")
    assert not run_region_twice(kernel_region(e.program(), e.grid), s)


def test_rw_sets_store_only():
    p = parse("kernel k(global out) {\n  out[tid] = 7\n}\nhost {\n  alloc out 4\n  launch k(out)\n}\n")
    rec = record_rw_sets(kernel_region(p, GridConfig(1, 4)), MemoryImage({"out": [0] * 4}))
    assert rec.write_set == {("out", i) for i in range(4)}
    assert rec.overwritten_live_in == set()


def test_rw_sets_read_modify_write():
    p = parse("kernel k(global x) {\n  v = x[tid]\n  x[tid] = v + 1\n}\n"
              "host {\n  alloc x 2\n  launch k(x)\n}\n")
    rec = record_rw_sets(kernel_region(p, GridConfig(1, 2, 2)), MemoryImage({"x": [5, 6]}))
    assert rec.overwritten_live_in == {("x", 0), ("x", 1)}


def test_bfs1_overwrites_only_part_of_its_input():
    e, s = _state("mini-bfs1")
    rec = record_rw_sets(kernel_region(e.program(), e.grid), s)
    assert 0 < len(rec.overwritten_live_in) < len(s.arrays["cost"])


def _regions(e):
    from gpupm.refexec.regions import annotated_loop, launch_context

    prog = e.program()
    n_launch = len(prog.host.launches())
    for li in range(n_launch):
        ctx = launch_context(prog, e.grid, li)
        yield li, kernel_region(prog, e.grid, li)
        for c in range(ctx.grid.grid_dim):
            yield li, cta_region(prog, e.grid, c, li)
        loop = annotated_loop(ctx.kernel)
        if loop is not None and any(s is loop for s in ctx.kernel.body):
            for c in range(ctx.grid.grid_dim):
                yield li, loop_region(prog, e.grid, c, 0, li)


def test_rw_record_consistency(entry):
    for seed in (0, 1):
        for li, region in _regions(entry):
            s = state_before(entry.program(), entry.grid, entry.inputs(seed), li)
            rec = record_rw_sets(region, s)
            assert rec.overwritten_live_in <= rec.write_set
            first = {}
            for kind, name, idx in rec.events:
                first.setdefault((name, idx), kind)
            for loc in rec.overwritten_live_in:
                assert first[loc] == "r", (region.describe(), loc)
