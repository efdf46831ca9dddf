"""Durability trace: the ordered line writes that entered the persistence domain."""

from __future__ import annotations

from dataclasses import dataclass, field

from gpupm.lang.ir import Flag
from gpupm.refexec.image import MemoryImage

CAUSES = ("wt", "clwb", "l2wb", "eviction", "host")


@dataclass(frozen=True)
class TraceEntry:
    """One line (or host flag) write reaching the persistence domain.

    ``cause`` is what sent the line toward memory; ``stage`` says where it
    became durable: ``wpq`` (durable queue insertion) or ``nvm`` (drained from
    a volatile queue). ``words`` holds ``(index, value, store id)`` triples
    of ``array``; host flag writes carry ``flag`` instead.
    """

    event: int
    line: int  # byte address of the line
    cause: str
    stage: str
    cta: int
    warp: int
    array: str = ""
    words: tuple[tuple[int, int, int], ...] = ()
    flag: tuple[str, Flag] | None = None

    @property
    def is_host_flag(self) -> bool:
        return self.flag is not None

    def apply(self, image: MemoryImage) -> None:
        if self.flag is not None:
            image.flags[self.flag[0]] = self.flag[1]
            return
        arr = image.arrays[self.array]
        for i, v, _ in self.words:
            arr[i] = v

    def dump(self) -> str:
        return f"{self.event} {self.line:#x} {self.cause} {self.cta} {self.warp} {self.stage}"


@dataclass
class DurabilityTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def append(self, e: TraceEntry) -> None:
        if self.entries and e.event <= self.entries[-1].event:
            raise ValueError("trace event indices must strictly increase")
        self.entries.append(e)

    def prefix(self, crash_at: int) -> list[TraceEntry]:
        """Entries recorded at or before event ``crash_at``."""
        return [e for e in self.entries if e.event <= crash_at]

    def replay(self, image: MemoryImage, crash_at: int | None = None) -> MemoryImage:
        """Apply (a prefix of) the trace to a copy of the starting persistent image."""
        out = image.copy()
        for e in self.entries:
            if crash_at is not None and e.event > crash_at:
                break
            e.apply(out)
        return out

    def dumps(self) -> str:
        """One durability event per line: index, hex line address, cause, cta, warp, stage."""
        return "".join(e.dump() + "\n" for e in self.entries)
