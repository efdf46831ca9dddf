"""Command line: compile, run, sweep, experiment, replay and recommend."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from gpupm import corpus
from gpupm.driver.experiment import ExperimentError, ExperimentSpec, load_workload, run_experiment
from gpupm.driver.recommend import program_directive, recommend_program
from gpupm.driver.report import FORMATS, emit_report
from gpupm.harness import (
    RecoveryError, Sampling, check_crash_point, config_for, replay_bundle, sweep_crash_points,
)
from gpupm.lang.ir import (
    GridConfig, LangError, Mech, Model, PersistencyDirective, Scope, parse_label,
)
from gpupm.lang.printer import format_program
from gpupm.memsim import MachineConfig, desk_config, simulate
from gpupm.passes import PassError, compile_program
from gpupm.refexec.interp import run_reference


def _grid(text: str | None) -> GridConfig | None:
    if text is None:
        return None
    try:
        parts = [int(p) for p in text.replace("x", ",").split(",")]
        return GridConfig(*parts)
    except (TypeError, ValueError) as err:
        raise click.BadParameter(f"expected GRID,CTA[,WARP]: {err}") from None


def _config(path: str | None) -> MachineConfig:
    """A config file overrides the full-size defaults; without one, the desk preset."""
    if path is None:
        return desk_config()
    try:
        return MachineConfig.load(path)
    except ValueError as err:
        raise click.BadParameter(str(err), param_hint="--config") from None


def directive_options(f):
    opts = [
        click.option("--directive", "label", help="Directive label, e.g. Undo_C_wt_idem."),
        click.option("--model", type=click.Choice([m.value for m in Model])),
        click.option("--scope", type=click.Choice([s.value for s in Scope])),
        click.option("--mech", type=click.Choice([m.value for m in Mech])),
        click.option("--pct", is_flag=True, help="Volatile WPQs: emit pcommit."),
        click.option("--tx", is_flag=True, help="Durable transaction (undo logging)."),
        click.option("--idem", is_flag=True, help="Use idempotency analysis to shrink logs."),
        click.option("--grid", "grid_text", help="GRID,CTA[,WARP] launch shape."),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False)),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def _directive(label, model, scope, mech, pct, tx, idem) -> PersistencyDirective | None:
    try:
        if label is not None:
            return parse_label(label)
        if model is None:
            if scope or mech or tx or idem:
                raise click.UsageError("--model is required with --scope/--mech/--tx/--idem")
            return None
        m = Model(model)
        s = Scope(scope) if scope else None
        default = Mech.L2WB if s is Scope.KERNEL else Mech.WT
        return PersistencyDirective(m, s, Mech(mech) if mech else default, not pct, tx, idem)
    except LangError as err:
        raise click.UsageError(str(err)) from None


def _setup(kernel, label, model, scope, mech, pct, tx, idem, grid_text, mutate=None):
    try:
        w = load_workload(kernel, _grid(grid_text))
        d = _directive(label, model, scope, mech, pct, tx, idem)
        return w, d, compile_program(w.program, d, w.grid, mutate=mutate)
    except (ExperimentError, PassError, LangError) as err:
        raise click.ClickException(str(err)) from None


@click.group()
def main():
    """Persistency-model toolkit for a miniature SIMT kernel language."""


@main.command("compile")
@click.argument("kernel")
@directive_options
def compile_cmd(kernel, label, model, scope, mech, pct, tx, idem, grid_text, seed, config_path):
    """Print the instrumented program for KERNEL (corpus name or file)."""
    _, _, c = _setup(kernel, label, model, scope, mech, pct, tx, idem, grid_text)
    click.echo(format_program(c.program), nl=False)
    for msg in c.diagnostics:
        click.echo(f"// note: {msg}")


@main.command()
@click.argument("kernel")
@directive_options
@click.option("--crash-at", type=int, help="Halt after this many events and recover.")
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False),
              help="Write the durability trace here.")
def run(kernel, label, model, scope, mech, pct, tx, idem, grid_text, seed, config_path, crash_at,
        trace_path):
    """Simulate one directive and print statistics."""
    w, d, c = _setup(kernel, label, model, scope, mech, pct, tx, idem, grid_text)
    cfg = config_for(_config(config_path), d)
    inputs = w.inputs(seed)
    oracle = run_reference(w.program, w.grid, inputs)
    out = simulate(c.program, c.grid, cfg, inputs, crash_at=crash_at, seed=seed)
    if trace_path:
        Path(trace_path).write_text(out.trace.dumps())
    click.echo(f"directive: {d.label if d else 'baseline'}")
    for msg in c.diagnostics:
        click.echo(f"note: {msg}")
    click.echo(out.stats.dumps(), nl=False)
    if crash_at is None:
        ok = out.final_image.same_data(oracle)
        click.echo(f"final image matches reference: {'yes' if ok else 'no'}")
        sys.exit(0 if ok else 1)
    click.echo(f"crashed after event {out.events}")
    if not c.transactional:
        lost = out.persistent_image.diff(oracle)
        click.echo(f"persistent image differs from reference at {len(lost)}+ words; "
                   "no transaction to recover with")
        return
    try:
        res = check_crash_point(c, out.persistent_image, inputs, oracle, out.events)
    except RecoveryError as err:
        raise click.ClickException(str(err)) from None
    for a in res.actions:
        click.echo(f"recovery: {a.describe()}")
    click.echo(f"recovered: {res.verdict}")
    for m in res.mismatch:
        click.echo(f"  {m}")
    sys.exit(0 if res.passed else 1)


@main.command()
@click.argument("kernel")
@directive_options
@click.option("--sampling", default="exhaustive", show_default=True,
              help="exhaustive, stride:K or seeded:N")
@click.option("--bundle-dir", type=click.Path(file_okay=False),
              help="Write a repro bundle here on failure.")
@click.option("--mutate", type=click.Choice(["flag_before_log", "no_output_persist",
                                             "no_pcommit", "unpersisted_log"]),
              help="Inject a protocol bug (sweep should fail).")
@click.option("--keep-going", is_flag=True, help="Do not stop at the first failing point.")
def sweep(kernel, label, model, scope, mech, pct, tx, idem, grid_text, seed, config_path,
          sampling, bundle_dir, mutate, keep_going):
    """Crash at every selected event, recover, and compare with the reference."""
    w, _, c = _setup(kernel, label, model, scope, mech, pct, tx, idem, grid_text, mutate)
    try:
        samp = Sampling.parse(sampling)
    except ValueError as err:
        raise click.BadParameter(str(err), param_hint="--sampling") from None
    res = sweep_crash_points(c, _config(config_path), w.inputs(seed), sampling=samp, seed=seed,
                             bundle_dir=bundle_dir, stop_on_fail=not keep_going)
    click.echo(res.summary())
    sys.exit(0 if res.passed else 1)


@main.command()
@click.argument("kernel")
@click.option("--directives", default="baseline,SP_wt,SP_clwb,EP_C_clwb,Undo_C_wt,Undo_C_wt_idem",
              show_default=True, help="Comma-separated directive labels.")
@click.option("--recommended", is_flag=True,
              help="Add the recommended persistency and transaction directives.")
@click.option("--grid", "grid_text")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Machine config override (repeatable).")
@click.option("--sampling", help="Sweep transactional rows: exhaustive, stride:K, seeded:N.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False),
              help="Write the report file(s) here.")
@click.option("--format", "fmt", type=click.Choice(FORMATS + ("both",)), default="table-text",
              show_default=True)
def experiment(kernel, directives, recommended, grid_text, seed, config_path, overrides,
               sampling, out_dir, fmt):
    """Compare directives on one kernel and emit a report."""
    cfg = _config(config_path)
    try:
        if overrides:
            cfg = MachineConfig.loads("\n".join(overrides), cfg)
        labels = [s.strip() for s in directives.split(",") if s.strip()]
        if recommended:
            w = load_workload(kernel, _grid(grid_text))
            recs = recommend_program(w.program, w.grid, cfg, w.inputs(seed),
                                     corpus.CLASS_THRESHOLD, seed=seed)
            for d in (program_directive(recs, False), program_directive(recs, True)):
                if d.label not in labels:
                    labels.append(d.label)
        spec = ExperimentSpec(kernel, labels, _grid(grid_text), seed, cfg,
                              sampling=Sampling.parse(sampling) if sampling else None,
                              output_dir=Path(out_dir) if out_dir else None)
        report = run_experiment(spec)
    except (ExperimentError, ValueError) as err:
        raise click.ClickException(str(err)) from None
    for f in (FORMATS if fmt == "both" else (fmt,)):
        click.echo(emit_report(report, f, out_dir), nl=False)


@main.command()
@click.argument("bundle", type=click.Path(exists=True, file_okay=False))
def replay(bundle):
    """Replay the failing crash point recorded in a repro bundle."""
    try:
        res = replay_bundle(bundle)
    except (ValueError, RecoveryError) as err:
        raise click.ClickException(str(err)) from None
    for a in res.actions:
        click.echo(f"recovery: {a.describe()}")
    click.echo(f"crash at event {res.crash_at}: {res.verdict}")
    for m in res.mismatch:
        click.echo(f"  {m}")
    sys.exit(0 if res.passed else 1)


@main.command()
@click.argument("kernel")
@click.option("--grid", "grid_text")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--threshold", type=float, default=corpus.CLASS_THRESHOLD, show_default=True,
              help="Cycle threshold between short and long running.")
@click.option("--pct", is_flag=True, help="Recommend for volatile WPQs.")
def recommend(kernel, grid_text, seed, config_path, threshold, pct):
    """Classify each launch and recommend persistency and transaction models."""
    try:
        w = load_workload(kernel, _grid(grid_text))
    except ExperimentError as err:
        raise click.ClickException(str(err)) from None
    recs = recommend_program(w.program, w.grid, _config(config_path), w.inputs(seed), threshold,
                             seed=seed, durable_wpq=not pct)
    for r in recs:
        click.echo(f"{r.kernel}: class {r.kernel_class.value}, persistency "
                   f"{r.persistency.label}, transaction {r.transaction.label} ({r.reason})")
    if len(recs) > 1:
        click.echo(f"program: {program_directive(recs, False).label} / "
                   f"{program_directive(recs, True).label}")


if __name__ == "__main__":
    main()
