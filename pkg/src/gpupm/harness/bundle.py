"""Repro bundles: everything needed to replay one failing crash point."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from gpupm.lang.ir import GridConfig, PersistencyDirective, directive
from gpupm.lang.parser import parse
from gpupm.lang.printer import format_program
from gpupm.memsim import DurabilityTrace, MachineConfig, simulate
from gpupm.passes.compile import Compiled, compile_program
from gpupm.refexec.image import MemoryImage
from gpupm.refexec.interp import run_reference

FILES = ("bundle.json", "original.gpm", "instrumented.gpm", "input.img", "config.txt",
         "trace.txt")


def write_bundle(path: str | Path, compiled: Compiled, cfg: MachineConfig, inputs: MemoryImage,
                 seed: int, crash_at: int, trace: DurabilityTrace,
                 mismatch: list[str] = ()) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    d = compiled.directive
    meta = {
        "directive": d.pragma_text() if d else None,
        "label": d.label if d else "baseline",
        "grid": [compiled.grid.grid_dim, compiled.grid.cta_dim, compiled.grid.warp_size],
        "seed": seed,
        "crash_at": crash_at,
        "options": compiled.options,
        "mismatch": list(mismatch),
    }
    (root / "bundle.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (root / "original.gpm").write_text(format_program(compiled.original))
    (root / "instrumented.gpm").write_text(format_program(compiled.program))
    inputs.save(root / "input.img")
    (root / "config.txt").write_text(cfg.dumps())
    (root / "trace.txt").write_text(trace.dumps())
    return root


@dataclass
class Bundle:
    compiled: Compiled
    cfg: MachineConfig
    inputs: MemoryImage
    seed: int
    crash_at: int
    trace_text: str


def load_bundle(path: str | Path) -> Bundle:
    """Read a bundle and recompile; the instrumented IR must match the recorded one."""
    root = Path(path)
    meta = json.loads((root / "bundle.json").read_text())
    d: PersistencyDirective | None = directive(meta["directive"]) if meta["directive"] else None
    grid = GridConfig(*meta["grid"])
    compiled = compile_program(parse((root / "original.gpm").read_text()), d, grid,
                               **meta["options"])
    if format_program(compiled.program) != (root / "instrumented.gpm").read_text():
        raise ValueError("recompiled program differs from the bundle's instrumented IR")
    return Bundle(compiled, MachineConfig.load(root / "config.txt"),
                  MemoryImage.load(root / "input.img"), meta["seed"], meta["crash_at"],
                  (root / "trace.txt").read_text())


def replay_bundle(path: str | Path):
    """Re-run the recorded crash by halting the simulator at the crash event."""
    from gpupm.harness.sweep import check_crash_point

    b = load_bundle(path)
    out = simulate(b.compiled.program, b.compiled.grid, b.cfg, b.inputs,
                   crash_at=b.crash_at, seed=b.seed)
    oracle = run_reference(b.compiled.original, b.compiled.grid, b.inputs)
    return check_crash_point(b.compiled, out.persistent_image, b.inputs, oracle, b.crash_at)
