"""Bit-deterministic synthetic training state and the per-iteration program.

Everything is unsigned 64-bit wrapping arithmetic. The program is a
generator: it yields communication ops in a fixed order and receives their
results, so one fabric can drive it for real, record it, or replay it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Generator

from ..job import Coords, JobConfig

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

PARAM_STREAM = 0x5041_5241_4D53  # "PARAMS"
ACT_STREAM = 0x4143_5453


def mix64(x: int) -> int:
    """splitmix64 finalizer."""
    x = (x + GOLDEN) & MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK
    return x ^ (x >> 31)


def gradient_hash(data_shard: int, iteration: int, layer: int, seed: int = 0) -> int:
    h = mix64(seed & MASK)
    h = mix64(h ^ (data_shard & MASK))
    h = mix64(h ^ (iteration & MASK))
    return mix64(h ^ (layer & MASK))


def wsum(values) -> int:
    total = 0
    for v in values:
        total = (total + v) & MASK
    return total


def layer_index(job: JobConfig, c: Coords, i: int) -> int:
    return (c.pp * job.tp + c.tp) * job.params_per_device + i


@dataclass(frozen=True)
class ModelState:
    params: tuple[int, ...]
    optimizer: tuple[int, ...]
    iteration: int
    shard_coords: Coords
    optimizer_offset: int = 0

    @classmethod
    def initial(cls, job: JobConfig, c: Coords) -> "ModelState":
        params = tuple(
            gradient_hash(PARAM_STREAM, 0, layer_index(job, c, i), job.seed)
            for i in range(job.params_per_device)
        )
        start, end = job.optimizer_slice(c.dp)
        return cls(params, (0,) * (end - start), 0, c, start)


class OpKind(str, enum.Enum):
    ALLREDUCE = "ALLREDUCE"
    SEND = "SEND"
    RECV = "RECV"
    BARRIER = "BARRIER"


@dataclass(frozen=True)
class CommOp:
    kind: OpKind
    group_id: str
    values: tuple[int, ...] = ()
    peer: int | None = None  # group-local rank for SEND/RECV
    count: int = 0  # elements expected back (RECV) or carried (others)
    gradient: bool = False
    seq: int = field(default=0, compare=False)

    @property
    def size_bytes(self) -> int:
        return 8 * (len(self.values) if self.kind is not OpKind.RECV else self.count)

    def signature(self) -> tuple[str, str, int]:
        return (self.kind.value, self.group_id, self.size_bytes)


WORLD = "world"

Program = Generator[CommOp, tuple[int, ...], ModelState]


def iteration_program(job: JobConfig, state: ModelState) -> Program:
    """One training iteration for a single device.

    Op order: a TP all-reduce per layer, the PP forward send/recv, the PP
    backward send/recv, one DP gradient all-reduce, one global barrier.
    Collectives over a group of one are computed locally and never yielded.
    """
    c = state.shard_coords
    it = state.iteration
    n = job.params_per_device
    seq = 0

    def op(kind: OpKind, group: str, **kw) -> CommOp:
        nonlocal seq
        o = CommOp(kind, group, seq=seq, **kw)
        seq += 1
        return o

    local = [gradient_hash(c.dp, it, layer_index(job, c, i), job.seed) for i in range(n)]
    tp_sum = []
    for i in range(n):
        if job.tp > 1:
            (v,) = yield op(OpKind.ALLREDUCE, job.tp_group_id(c), values=(local[i],), count=1)
        else:
            v = local[i]
        tp_sum.append(v)

    pp_group = job.pp_group_id(c)
    act_in = 0
    if c.pp > 0:
        (act_in,) = yield op(OpKind.RECV, pp_group, peer=c.pp - 1, count=1)
    act_out = mix64(wsum([act_in, wsum(tp_sum), wsum(state.params), ACT_STREAM]))
    if c.pp < job.pp - 1:
        yield op(OpKind.SEND, pp_group, values=(act_out,), peer=c.pp + 1)

    grad_in = 0
    if c.pp < job.pp - 1:
        (grad_in,) = yield op(OpKind.RECV, pp_group, peer=c.pp + 1, count=1, gradient=True)
    if c.pp > 0:
        grad_out = mix64(wsum([act_out, grad_in]))
        yield op(OpKind.SEND, pp_group, values=(grad_out,), peer=c.pp - 1, gradient=True)

    grads = tuple(wsum([tp_sum[i], act_in, grad_in]) for i in range(n))
    if job.dp > 1:
        reduced = yield op(OpKind.ALLREDUCE, job.dp_group_id(c), values=grads, count=n, gradient=True)
    else:
        reduced = grads

    yield op(OpKind.BARRIER, WORLD)

    params = tuple((p + g) & MASK for p, g in zip(state.params, reduced))
    lo = state.optimizer_offset
    optimizer = tuple(
        (o + mix64(reduced[lo + j])) & MASK for j, o in enumerate(state.optimizer)
    )
    return ModelState(params, optimizer, it + 1, c, lo)
