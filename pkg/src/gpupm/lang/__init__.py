"""Kernel language front end, IR, CFG utilities and address slicing."""

from gpupm.lang.cfg import CFG, build_cfg, ensure_postdominant_exit
from gpupm.lang.ir import (
    Flag, GridConfig, HostScript, KernelProgram, LangError, PersistencyDirective, Program,
    directive, parse_label,
)
from gpupm.lang.parser import parse, parse_program
from gpupm.lang.printer import format_kernel, format_program
from gpupm.lang.slicing import AddressSlice, SliceUnavailable, slice_address

__all__ = [
    "CFG", "AddressSlice", "Flag", "GridConfig", "HostScript", "KernelProgram", "LangError",
    "PersistencyDirective", "Program", "SliceUnavailable", "build_cfg", "directive",
    "ensure_postdominant_exit", "format_kernel", "format_program", "parse", "parse_label",
    "parse_program",
    "slice_address",
]
