"""Memory images: named integer arrays, host flags and metadata scalars."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from gpupm.lang.ir import Flag

AUX_PREFIX = "__"


def is_aux(name: str) -> bool:
    """Log, flag, shadow and metadata arrays generated by the passes."""
    return name.startswith(AUX_PREFIX)


def region_of(name: str) -> str:
    """Accounting class of an array: ``log``, ``meta`` or ``data`` (shadows count as data)."""
    if name.startswith("__log"):
        return "log"
    if name.startswith(("__flag", "__last", "__done", "__tx")):
        return "meta"
    return "data"


@dataclass
class MemoryImage:
    arrays: dict[str, list[int]] = field(default_factory=dict)
    flags: dict[str, Flag] = field(default_factory=dict)
    meta: dict[str, int] = field(default_factory=dict)

    def copy(self) -> "MemoryImage":
        return MemoryImage({k: list(v) for k, v in self.arrays.items()}, dict(self.flags),
                           dict(self.meta))

    def set_flag(self, name: str, value) -> None:
        self.flags[name] = Flag(value)

    def data_view(self) -> dict[str, list[int]]:
        """Arrays that carry program data (auxiliary regions excluded)."""
        return {k: v for k, v in self.arrays.items() if not is_aux(k)}

    def same_data(self, other: "MemoryImage", names=None) -> bool:
        return not self.diff(other, names)

    def diff(self, other: "MemoryImage", names=None, limit: int = 8) -> list[str]:
        """Human-readable differences on non-auxiliary arrays (at most ``limit``)."""
        mine, theirs = self.data_view(), other.data_view()
        keys = sorted(set(mine) | set(theirs)) if names is None else sorted(names)
        out: list[str] = []
        for k in keys:
            a, b = mine.get(k), theirs.get(k)
            if a is None or b is None:
                out.append(f"{k}: present in only one image")
            elif len(a) != len(b):
                out.append(f"{k}: size {len(a)} != {len(b)}")
            else:
                for i, (x, y) in enumerate(zip(a, b)):
                    if x != y:
                        out.append(f"{k}[{i}]: {x} != {y}")
                        if len(out) >= limit:
                            return out
        return out

    # ------------------------------------------------------------ text format

    def dumps(self) -> str:
        """Line-oriented, sorted, bit-exact text form."""
        lines = []
        for name in sorted(self.arrays):
            vals = self.arrays[name]
            lines.append(f"n {name} {len(vals)}")
            lines.extend(f"a {name} {i} {v}" for i, v in enumerate(vals))
        lines.extend(f"f {k} {self.flags[k].label}" for k in sorted(self.flags))
        lines.extend(f"m {k} {self.meta[k]}" for k in sorted(self.meta))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "MemoryImage":
        img = cls()
        for no, raw in enumerate(text.splitlines(), 1):
            parts = raw.split()
            if not parts:
                continue
            try:
                tag = parts[0]
                if tag == "n":
                    img.arrays[parts[1]] = [0] * int(parts[2])
                elif tag == "a":
                    img.arrays[parts[1]][int(parts[2])] = int(parts[3])
                elif tag == "f":
                    img.flags[parts[1]] = Flag.from_label(parts[2])
                elif tag == "m":
                    img.meta[parts[1]] = int(parts[2])
                else:
                    raise ValueError(f"unknown record {tag!r}")
            except (IndexError, KeyError, ValueError) as err:
                raise ValueError(f"line {no}: {err}") from None
        return img

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "MemoryImage":
        return cls.loads(Path(path).read_text())
