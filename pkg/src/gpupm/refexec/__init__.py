"""Failure-free reference interpreter and dynamic read/write-set recording."""

from gpupm.refexec.image import MemoryImage, is_aux
from gpupm.refexec.interp import ExecFault, run_reference
from gpupm.refexec.regions import (
    Region, RWRecord, cta_region, kernel_region, loop_region, record_rw_sets, run_region_twice,
)

__all__ = [
    "ExecFault", "MemoryImage", "RWRecord", "Region", "cta_region", "is_aux", "kernel_region",
    "loop_region", "record_rw_sets", "run_reference", "run_region_twice",
]
