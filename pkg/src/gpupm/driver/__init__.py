"""Experiment orchestration, reports, model recommendation and the command line."""

from gpupm.driver.experiment import (
    ExperimentError, ExperimentSpec, Report, ReportRow, Workload, load_workload, random_inputs,
    run_experiment,
)
from gpupm.driver.recommend import (
    Recommendation, choose_mech, profile_launches, program_directive, recommend_model,
    recommend_program,
)
from gpupm.driver.report import COLUMNS, FORMATS, emit_report, format_report

__all__ = [
    "COLUMNS", "FORMATS", "ExperimentError", "ExperimentSpec", "Recommendation", "Report",
    "ReportRow", "Workload", "choose_mech", "emit_report", "format_report", "load_workload",
    "profile_launches", "program_directive", "random_inputs", "recommend_model",
    "recommend_program", "run_experiment",
]
