"""Machine configuration: full-size defaults, a desk preset and a key=value file form."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path


@dataclass(frozen=True)
class MachineConfig:
    num_sms: int = 20
    max_ctas_per_sm: int = 32
    warp_size: int = 32
    word_size: int = 4  # bytes per array element
    line_size: int = 128  # bytes
    l1_size: int = 24 * 1024
    l1_assoc: int = 6
    l2_size: int = 2048 * 1024
    l2_partitions: int = 16
    l2_assoc: int = 16
    num_controllers: int = 8
    wpq_depth: int = 64
    wpq_durable: bool = False
    use_dram: bool = False  # DRAM baseline: same hierarchy, DRAM latencies
    lat_l1: int = 20
    lat_l2: int = 100
    nvm_read: int = 160
    nvm_write: int = 480
    dram_read: int = 160
    dram_write: int = 160
    l2wb_scan_per_line: int = 1  # cycles per line per partition
    shared_latency: int = 2
    issue_cycles: int = 1
    jitter: int = 1  # max extra issue cycles drawn per op from the seed
    host_step_cycles: int = 10
    launch_cycles: int = 20

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int) and v < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if self.line_size % self.word_size:
            raise ValueError("line_size must be a multiple of word_size")
        if self.l2_partitions % self.num_controllers:
            raise ValueError("l2_partitions must be a multiple of num_controllers")
        for name, size, assoc, parts in (("l1", self.l1_size, self.l1_assoc, 1),
                                         ("l2", self.l2_size, self.l2_assoc, self.l2_partitions)):
            lines = size // self.line_size
            if assoc <= 0 or lines % (parts * assoc) or lines == 0:
                raise ValueError(f"{name} size must split evenly into sets of {assoc} ways")
        if self.num_sms <= 0 or self.max_ctas_per_sm <= 0 or self.wpq_depth <= 0:
            raise ValueError("num_sms, max_ctas_per_sm and wpq_depth must be positive")

    # ------------------------------------------------------------ derived sizes
    @property
    def words_per_line(self) -> int:
        return self.line_size // self.word_size

    @property
    def banks_per_controller(self) -> int:
        return self.l2_partitions // self.num_controllers

    @property
    def l1_sets(self) -> int:
        return self.l1_size // self.line_size // self.l1_assoc

    @property
    def l2_lines_per_partition(self) -> int:
        return self.l2_size // self.line_size // self.l2_partitions

    @property
    def l2_sets(self) -> int:
        return self.l2_lines_per_partition // self.l2_assoc

    @property
    def mem_read(self) -> int:
        return self.dram_read if self.use_dram else self.nvm_read

    @property
    def mem_write(self) -> int:
        return self.dram_write if self.use_dram else self.nvm_write

    # ------------------------------------------------------------ text form
    def dumps(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(out) + "\n"

    @classmethod
    def loads(cls, text: str, base: "MachineConfig | None" = None) -> "MachineConfig":
        """Parse ``key=value`` lines over ``base`` (full-size defaults if None)."""
        known = {f.name: f for f in fields(cls)}
        updates: dict = {}
        for no, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {no}: expected key=value")
            key, val = (p.strip() for p in line.split("=", 1))
            if key not in known:
                raise ValueError(f"config line {no}: unknown key {key!r}")
            updates[key] = _parse_value(val, known[key].type, no)
        return replace(base or cls(), **updates)

    @classmethod
    def load(cls, path: str | Path, base: "MachineConfig | None" = None) -> "MachineConfig":
        return cls.loads(Path(path).read_text(), base)

    def with_(self, **kw) -> "MachineConfig":
        return replace(self, **kw)


def _parse_value(val: str, typ, no: int):
    if typ in ("bool", bool):
        low = val.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"config line {no}: {val!r} is not a boolean")
    try:
        return int(val, 0)
    except ValueError:
        raise ValueError(f"config line {no}: {val!r} is not an integer") from None


def desk_config(**overrides) -> MachineConfig:
    """A machine scaled to the desk corpus: 16-byte lines and a 128-line L2."""
    cfg = MachineConfig(
        num_sms=2, max_ctas_per_sm=1, warp_size=4, line_size=16, l1_size=256, l1_assoc=2,
        l2_size=2048, l2_partitions=8, l2_assoc=4, num_controllers=4, wpq_depth=8,
    )
    return replace(cfg, **overrides)
