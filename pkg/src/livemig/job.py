"""Training job shape: rank coordinates, host placement and parallel groups."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .topology import GroupSpec, HostSpec, Participant, Purpose, TopologyError


@dataclass(frozen=True)
class Coords:
    tp: int
    pp: int
    dp: int


@dataclass(frozen=True)
class JobConfig:
    tp: int = 1
    pp: int = 1
    dp: int = 1
    distributed_optimizer: bool = False
    total_iterations: int = 100
    params_per_device: int = 8
    seed: int = 0
    # Record real gradient payloads instead of zero-filling them.
    record_gradients: bool = False

    def __post_init__(self) -> None:
        for name in ("tp", "pp", "dp", "params_per_device"):
            if getattr(self, name) < 1:
                raise TopologyError(f"{name} must be >= 1")
        if self.total_iterations < 1:
            raise TopologyError("total_iterations must be >= 1")

    @property
    def world_size(self) -> int:
        return self.tp * self.pp * self.dp

    def coords(self, rank: int) -> Coords:
        tp = rank % self.tp
        dp = (rank // self.tp) % self.dp
        pp = rank // (self.tp * self.dp)
        return Coords(tp, pp, dp)

    def rank_of(self, c: Coords) -> int:
        return c.tp + self.tp * (c.dp + self.dp * c.pp)

    def optimizer_slice(self, dp_rank: int) -> tuple[int, int]:
        """[start, end) of the optimizer elements owned by one DP rank."""
        n = self.params_per_device
        if not self.distributed_optimizer:
            return 0, n
        base, extra = divmod(n, self.dp)
        start = dp_rank * base + min(dp_rank, extra)
        return start, start + base + (1 if dp_rank < extra else 0)

    def tp_group_id(self, c: Coords) -> str:
        return f"tp.pp{c.pp}.dp{c.dp}"

    def pp_group_id(self, c: Coords) -> str:
        return f"pp.tp{c.tp}.dp{c.dp}"

    def dp_group_id(self, c: Coords) -> str:
        return f"dp.tp{c.tp}.pp{c.pp}"

    def groups_of(self, rank: int) -> list[str]:
        c = self.coords(rank)
        return [self.tp_group_id(c), self.pp_group_id(c), self.dp_group_id(c)]


@dataclass(frozen=True)
class Slot:
    host_id: str
    local_device_index: int


class Placement:
    """Host-major rank placement: rank r sits on host r // devices_per_host."""

    def __init__(self, job: JobConfig, hosts: Sequence[HostSpec]):
        if not hosts:
            raise TopologyError("job needs at least one host")
        counts = {h.device_count for h in hosts}
        if len(counts) != 1:
            raise TopologyError("hosts in one job must have identical device counts")
        self.devices_per_host = counts.pop()
        capacity = self.devices_per_host * len(hosts)
        if job.world_size > capacity:
            raise TopologyError(
                f"job needs {job.world_size} devices, hosts provide {capacity}"
            )
        self.job = job
        self.hosts = list(hosts)
        self._slots = {
            r: Slot(hosts[r // self.devices_per_host].host_id, r % self.devices_per_host)
            for r in range(job.world_size)
        }

    def slot(self, rank: int) -> Slot:
        return self._slots[rank]

    def ranks_on(self, host_id: str) -> list[int]:
        return [r for r, s in self._slots.items() if s.host_id == host_id]

    def used_hosts(self) -> list[str]:
        seen: list[str] = []
        for r in range(self.job.world_size):
            h = self._slots[r].host_id
            if h not in seen:
                seen.append(h)
        return seen

    def substitute(self, mapping: dict[str, str], joiner_hosts: Sequence[HostSpec]) -> "Placement":
        by_id = {h.host_id: h for h in joiner_hosts}
        hosts = [by_id[mapping[h.host_id]] if h.host_id in mapping else h for h in self.hosts]
        return Placement(self.job, hosts)

    def group_specs(self) -> dict[str, GroupSpec]:
        job = self.job
        members: dict[str, list[tuple[int, Purpose, int]]] = {}
        for r in range(job.world_size):
            c = job.coords(r)
            members.setdefault(job.tp_group_id(c), []).append((c.tp, Purpose.TP, r))
            members.setdefault(job.pp_group_id(c), []).append((c.pp, Purpose.PP, r))
            members.setdefault(job.dp_group_id(c), []).append((c.dp, Purpose.DP, r))
        specs = {}
        for gid, ms in sorted(members.items()):
            purpose = ms[0][1]
            parts = tuple(
                Participant(self._slots[r].host_id, self._slots[r].local_device_index, local)
                for local, _, r in ms
            )
            specs[gid] = GroupSpec(gid, purpose, parts)
        return specs

    def group_rank(self, group_id: str, rank: int) -> int:
        c = self.job.coords(rank)
        return {"tp": c.tp, "pp": c.pp, "dp": c.dp}[group_id.split(".", 1)[0]]

    def rank_in_group(self, group_id: str, local: int) -> int:
        """Job rank of group-local rank ``local`` in ``group_id``."""
        kind, rest = group_id.split(".", 1)
        coords = {"tp": 0, "pp": 0, "dp": 0}
        for part in rest.split("."):
            coords[part[:2]] = int(part[2:])
        coords[kind] = local
        return self.job.rank_of(Coords(coords["tp"], coords["pp"], coords["dp"]))
