"""Strict persistency: every global store persists in program order."""

from __future__ import annotations

from dataclasses import replace

from gpupm.lang.ir import Atomic, KernelProgram, Mech, Model, PersistencyDirective, Simple
from gpupm.passes.common import PassError, clwb_of, is_global_store, persist_fence, rewrite_kernel


def transform_strict(kernel: KernelProgram, d: PersistencyDirective) -> KernelProgram:
    """clwb: ``st; clwb; [sfence; pcommit;] sfence``. wt: ``st.wt; sfence``.

    Atomics are performed at the L2, so both mechanisms follow them with a
    clwb of the updated line and the clwb fence sequence.
    """
    if d.model is not Model.STRICT:
        raise PassError("transform_strict needs a strict directive")
    clwb_tail = persist_fence(d.durable_wpq)

    def fn(s):
        if is_global_store(s):
            if d.mech is Mech.WT:
                return (replace(s, wt=True), Simple("sfence"))
            return (s, clwb_of(s)) + clwb_tail
        if isinstance(s, Atomic):
            return (s, clwb_of(s)) + clwb_tail
        return None

    return rewrite_kernel(kernel, fn)
