"""Model-comparison experiments over one program."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path

from gpupm import corpus
from gpupm.harness.sweep import Sampling, config_for, sweep_crash_points
from gpupm.lang.ir import GridConfig, PersistencyDirective, Program, parse_label
from gpupm.lang.parser import parse
from gpupm.memsim import MachineConfig, desk_config, simulate
from gpupm.passes.compile import compile_program
from gpupm.refexec.image import MemoryImage
from gpupm.refexec.interp import run_reference


class ExperimentError(Exception):
    pass


def random_inputs(program: Program, seed: int, hi: int = 99) -> MemoryImage:
    """Seeded inputs for a program outside the corpus: each host array gets ints in 0..hi."""
    rng = random.Random(seed)
    return MemoryImage({name: [rng.randint(0, hi) for _ in range(size)]
                        for name, size in sorted(program.host_arrays().items())})


@dataclass
class Workload:
    """A program, its grid and a seeded input generator."""

    name: str
    program: Program
    grid: GridConfig
    corpus_entry: corpus.CorpusEntry | None = None

    def inputs(self, seed: int) -> MemoryImage:
        if self.corpus_entry is not None:
            return self.corpus_entry.inputs(seed)
        return random_inputs(self.program, seed)


def load_workload(kernel: str, grid: GridConfig | None = None) -> Workload:
    """A corpus name (``mini-lbm``) or a path to a kernel-language file."""
    if kernel in corpus.CORPUS:
        e = corpus.get(kernel)
        return Workload(kernel, e.program(), grid or e.grid, e)
    path = Path(kernel)
    if not path.exists():
        raise ExperimentError(f"{kernel!r} is neither a corpus kernel nor a file")
    if grid is None:
        raise ExperimentError("a grid is required for kernels outside the corpus")
    return Workload(path.stem, parse(path.read_text()), grid)


@dataclass
class ExperimentSpec:
    kernel: str
    directives: list[str]  # labels such as ``baseline``, ``SP_wt``, ``Undo_C_wt_idem``
    grid: GridConfig | None = None
    seed: int = 0
    config: MachineConfig = field(default_factory=desk_config)
    overrides: dict = field(default_factory=dict)
    sampling: Sampling | None = None  # None skips crash sweeps
    output_dir: Path | None = None


@dataclass(frozen=True)
class ReportRow:
    directive: str
    scopes: str  # transaction scope actually used per launch, or "-"
    cycles: int
    baseline_cycles: int
    nvm_line_writes: int
    sp_wt_writes: int
    log_bytes: int
    sweep_points: int  # 0 when no sweep ran
    sweep_pass_rate: float | None
    notes: str = ""

    @property
    def norm_time(self) -> float:
        return self.cycles / self.baseline_cycles if self.baseline_cycles else 0.0

    @property
    def norm_writes(self) -> float:
        return self.nvm_line_writes / self.sp_wt_writes if self.sp_wt_writes else 0.0


@dataclass
class Report:
    kernel: str
    seed: int
    rows: list[ReportRow] = field(default_factory=list)

    def row(self, label: str) -> ReportRow:
        for r in self.rows:
            if r.directive == label:
                return r
        raise KeyError(label)


def _measure(w: Workload, d: PersistencyDirective | None, cfg: MachineConfig, inputs, oracle,
             seed: int):
    c = compile_program(w.program, d, w.grid)
    out = simulate(c.program, c.grid, config_for(cfg, d), inputs, seed=seed)
    diff = out.final_image.diff(oracle)
    if diff:
        raise ExperimentError(f"failure-free run differs from the reference: {diff[:3]}")
    return c, out


def run_experiment(spec: ExperimentSpec) -> Report:
    w = load_workload(spec.kernel, spec.grid)
    cfg = spec.config.with_(**spec.overrides) if spec.overrides else spec.config
    inputs = w.inputs(spec.seed)
    oracle = run_reference(w.program, w.grid, inputs)
    _, base = _measure(w, None, cfg, inputs, oracle, spec.seed)
    _, sp = _measure(w, parse_label("SP_wt"), cfg, inputs, oracle, spec.seed)
    report = Report(w.name, spec.seed)
    for label in spec.directives:
        try:
            d = parse_label(label)
            c, out = _measure(w, d, cfg, inputs, oracle, spec.seed)
            points, rate = 0, None
            if c.transactional and spec.sampling is not None:
                bundle = spec.output_dir / f"bundle-{label}" if spec.output_dir else None
                res = sweep_crash_points(c, cfg, inputs, sampling=spec.sampling,
                                         seed=spec.seed, bundle_dir=bundle)
                points, rate = len(res.outcomes), res.pass_rate
        except Exception as err:
            raise ExperimentError(f"{label}: {err}") from err
        scopes = ",".join(lt.scope for lt in c.launches) or "-"
        report.rows.append(ReportRow(
            d.label if d else "baseline", scopes, out.stats.cycles, base.stats.cycles,
            out.stats.nvm_line_writes, sp.stats.nvm_line_writes, out.stats.log_bytes,
            points, rate, "; ".join(c.diagnostics)))
    return report
