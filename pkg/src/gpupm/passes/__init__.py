"""Persistency instrumentation passes and idempotency analysis."""

from gpupm.passes.classify import KernelClass, KernelProfile, classify_kernel
from gpupm.passes.common import PassError
from gpupm.passes.compile import Compiled, compile_program
from gpupm.passes.epoch import transform_epoch_cta, transform_epoch_kernel, transform_epoch_loop
from gpupm.passes.idempotency import IdempotencyResult, analyze_idempotency
from gpupm.passes.strict import transform_strict
from gpupm.passes.tx import LaunchTx, transform_tx

__all__ = [
    "Compiled", "IdempotencyResult", "KernelClass", "KernelProfile", "LaunchTx", "PassError",
    "analyze_idempotency", "classify_kernel", "compile_program", "transform_epoch_cta",
    "transform_epoch_kernel", "transform_epoch_loop", "transform_strict", "transform_tx",
]
