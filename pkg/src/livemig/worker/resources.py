"""Per-device memory accounting and one-time lazy initialization costs."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

from ..simcore import seconds


class MemoryOverflow(Exception):
    pass


class Tag(str, enum.Enum):
    GROUP_CHANNEL = "GROUP_CHANNEL"
    GRADIENT_BUFFER = "GRADIENT_BUFFER"
    PARAMS = "PARAMS"
    OPTIMIZER = "OPTIMIZER"
    TRANSFER_CHANNEL = "TRANSFER_CHANNEL"
    ACTIVATIONS = "ACTIVATIONS"


LedgerHook = Callable[[str, str, Tag, int, str], None]


class MemoryLedger:
    """Bytes held per purpose on one device.

    ``limit`` is the hard cap (device capacity, or the steady-state peak when
    the caller wants zero-overhead enforcement).
    """

    def __init__(self, device: str, limit: int | None = None, hook: LedgerHook | None = None):
        self.device = device
        self.limit = limit
        self.hook = hook
        self.allocations: dict[Tag, int] = {t: 0 for t in Tag}
        self.peak_observed = 0

    @property
    def used(self) -> int:
        return sum(self.allocations.values())

    def allocate(self, tag: Tag, nbytes: int, why: str = "") -> None:
        if nbytes < 0:
            raise ValueError("negative allocation")
        if self.limit is not None and self.used + nbytes > self.limit:
            raise MemoryOverflow(
                f"{self.device}: {tag.value} +{nbytes} B would reach {self.used + nbytes} B "
                f"> limit {self.limit} B"
            )
        self.allocations[tag] += nbytes
        self.peak_observed = max(self.peak_observed, self.used)
        if self.hook and nbytes:
            self.hook("ALLOC", self.device, tag, nbytes, why)

    def release(self, tag: Tag, nbytes: int | None = None, why: str = "") -> int:
        held = self.allocations[tag]
        n = held if nbytes is None else nbytes
        if n > held:
            raise ValueError(f"{self.device}: releasing {n} B of {tag.value} but only {held} B held")
        self.allocations[tag] = held - n
        if self.hook and n:
            self.hook("FREE", self.device, tag, n, why)
        return n

    def release_all(self, why: str = "") -> None:
        for tag in Tag:
            self.release(tag, why=why)

    def snapshot(self) -> dict[str, int]:
        return {t.value: b for t, b in self.allocations.items() if b}


DEFAULT_COMPONENTS = ("graph_compile", "optimizer_alloc", "cuda_context", "jit_cache")


@dataclass
class LazyComponent:
    name: str
    one_time_cost_ns: int
    triggered: bool = False


@dataclass
class LazyInitRegistry:
    components: list[LazyComponent] = field(default_factory=list)

    @classmethod
    def split_evenly(cls, total_s: float, names=DEFAULT_COMPONENTS) -> "LazyInitRegistry":
        """Aggregate cost spread over named components; the remainder lands on the last."""
        total = seconds(total_s)
        share = total // len(names)
        comps = [LazyComponent(n, share) for n in names]
        comps[-1].one_time_cost_ns += total - share * len(names)
        return cls(comps)

    @property
    def pending_ns(self) -> int:
        return sum(c.one_time_cost_ns for c in self.components if not c.triggered)

    @property
    def warm(self) -> bool:
        return all(c.triggered for c in self.components)

    def trigger_all(self) -> int:
        charged = self.pending_ns
        for c in self.components:
            c.triggered = True
        return charged

    def reset(self) -> None:
        for c in self.components:
            c.triggered = False
