"""Kernel classification by simulated running time."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class KernelClass(str, Enum):
    SHORT = "S"  # short-running kernel
    LONG_SHORT_CTA = "LS"  # long-running kernel, short-running CTAs
    LONG_LONG_CTA = "LL"  # long-running kernel, long-running CTAs


@dataclass(frozen=True)
class KernelProfile:
    """Timing of one uninstrumented launch."""

    kernel: str
    cycles: int
    cta_cycles: tuple[int, ...] = ()

    @property
    def mean_cta_cycles(self) -> float:
        return sum(self.cta_cycles) / len(self.cta_cycles) if self.cta_cycles else 0.0


def classify_kernel(profile: KernelProfile, threshold: float) -> KernelClass:
    """S below ``threshold`` kernel cycles, else LS or LL by mean CTA cycles.

    A launch with no CTAs counts as short-running.
    """
    if not profile.cta_cycles or profile.cycles < threshold:
        return KernelClass.SHORT
    if profile.mean_cta_cycles < threshold:
        return KernelClass.LONG_SHORT_CTA
    return KernelClass.LONG_LONG_CTA
