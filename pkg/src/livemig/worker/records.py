"""Recorded boundary communications, checkpoints, and their TMV1 wire layout.

Layout (all integers little-endian)::

    file     := b"TMV1" u8:kind body
    kind 1   := u64:iteration u32:count { u32:rank u32:len state }*
    kind 2   := u32:rank u64:recorded_at u8:boundary_only u32:count entry*
    state    := u32:tp u32:pp u32:dp u64:iteration u32:opt_offset
                u32:n { u64 }* u32:m { u64 }*
    entry    := u32:len group_id u32:op_seq u8:op_kind u64:size u32:len payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from ..job import Coords
from .model import ModelState, OpKind

MAGIC = b"TMV1"
KIND_SNAPSHOT = 1
KIND_RECORDING = 2

_OP_CODES = {OpKind.ALLREDUCE: 1, OpKind.SEND: 2, OpKind.RECV: 3, OpKind.BARRIER: 4}
_OP_KINDS = {v: k for k, v in _OP_CODES.items()}


class WireError(Exception):
    pass


class AlreadyRecorded(Exception):
    pass


class MissingSnapshot(Exception):
    pass


def encode_values(values: Iterable[int]) -> bytes:
    vals = list(values)
    return struct.pack(f"<{len(vals)}Q", *vals)


def decode_values(payload: bytes) -> tuple[int, ...]:
    if len(payload) % 8:
        raise WireError("payload length is not a multiple of 8")
    return struct.unpack(f"<{len(payload) // 8}Q", payload)


@dataclass(frozen=True)
class RecordedOp:
    kind: OpKind
    size_bytes: int
    payload: bytes


@dataclass
class RecordedComms:
    entries: dict[tuple[str, int], RecordedOp] = field(default_factory=dict)
    recorded_at_iteration: int = 0
    boundary_only: bool = True
    sealed: bool = False

    def add(self, group_id: str, seq: int, op: RecordedOp) -> None:
        if self.sealed:
            raise AlreadyRecorded("recording is sealed after the first iteration")
        self.entries[(group_id, seq)] = op

    def seal(self) -> "RecordedComms":
        self.sealed = True
        return self

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def payload_bytes(self) -> int:
        return sum(len(e.payload) for e in self.entries.values())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise WireError("truncated TMV1 buffer")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def blob(self) -> bytes:
        (n,) = self.take("<I")
        if self.pos + n > len(self.data):
            raise WireError("truncated TMV1 blob")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def header(self, kind: int) -> None:
        if self.data[:4] != MAGIC:
            raise WireError("bad magic")
        self.pos = 4
        (k,) = self.take("<B")
        if k != kind:
            raise WireError(f"expected TMV1 kind {kind}, found {k}")

    def done(self) -> None:
        if self.pos != len(self.data):
            raise WireError("trailing bytes after TMV1 body")


def encode_state(s: ModelState) -> bytes:
    c = s.shard_coords
    return b"".join(
        [
            struct.pack("<IIIQI", c.tp, c.pp, c.dp, s.iteration, s.optimizer_offset),
            struct.pack("<I", len(s.params)),
            encode_values(s.params),
            struct.pack("<I", len(s.optimizer)),
            encode_values(s.optimizer),
        ]
    )


def _read_state(r: _Reader) -> ModelState:
    tp, pp, dp, iteration, offset = r.take("<IIIQI")
    (n,) = r.take("<I")
    params = r.take(f"<{n}Q")
    (m,) = r.take("<I")
    opt = r.take(f"<{m}Q")
    return ModelState(tuple(params), tuple(opt), iteration, Coords(tp, pp, dp), offset)


def decode_state(data: bytes) -> ModelState:
    r = _Reader(data)
    s = _read_state(r)
    r.done()
    return s


def encode_snapshot(iteration: int, states: Mapping[int, ModelState]) -> bytes:
    parts = [MAGIC, struct.pack("<BQI", KIND_SNAPSHOT, iteration, len(states))]
    for rank in sorted(states):
        body = encode_state(states[rank])
        parts.append(struct.pack("<II", rank, len(body)))
        parts.append(body)
    return b"".join(parts)


def decode_snapshot(data: bytes) -> tuple[int, dict[int, ModelState]]:
    r = _Reader(data)
    r.header(KIND_SNAPSHOT)
    iteration, count = r.take("<QI")
    states = {}
    for _ in range(count):
        (rank,) = r.take("<I")
        states[rank] = decode_state(r.blob())
    r.done()
    return iteration, states


def encode_recording(rank: int, rec: RecordedComms) -> bytes:
    parts = [
        MAGIC,
        struct.pack("<BIQBI", KIND_RECORDING, rank, rec.recorded_at_iteration, int(rec.boundary_only), len(rec)),
    ]
    for (gid, seq), op in sorted(rec.entries.items()):
        g = gid.encode()
        parts.append(struct.pack("<I", len(g)) + g)
        parts.append(struct.pack("<IBQI", seq, _OP_CODES[op.kind], op.size_bytes, len(op.payload)))
        parts.append(op.payload)
    return b"".join(parts)


def decode_recording(data: bytes) -> tuple[int, RecordedComms]:
    r = _Reader(data)
    r.header(KIND_RECORDING)
    rank, at, boundary, count = r.take("<IQBI")
    rec = RecordedComms(recorded_at_iteration=at, boundary_only=bool(boundary))
    for _ in range(count):
        gid = r.blob().decode()
        seq, code, size = r.take("<IBQ")
        payload = r.blob()
        rec.entries[(gid, seq)] = RecordedOp(_OP_KINDS[code], size, payload)
    r.done()
    return rank, rec.seal()


@dataclass
class CheckpointStore:
    """Remote storage: serialized snapshots plus the first-iteration recordings."""

    snapshots: dict[int, bytes] = field(default_factory=dict)
    recorded_comms: dict[int, bytes] = field(default_factory=dict)

    def put(self, iteration: int, states: Mapping[int, ModelState]) -> None:
        self.snapshots[iteration] = encode_snapshot(iteration, states)

    def get(self, iteration: int) -> dict[int, ModelState]:
        if iteration not in self.snapshots:
            raise MissingSnapshot(f"no snapshot at iteration {iteration}")
        return decode_snapshot(self.snapshots[iteration])[1]

    def latest(self, at_or_before: int | None = None) -> int:
        its = [i for i in self.snapshots if at_or_before is None or i <= at_or_before]
        if not its:
            raise MissingSnapshot("checkpoint store is empty")
        return max(its)

    def put_recording(self, rank: int, rec: RecordedComms) -> None:
        self.recorded_comms[rank] = encode_recording(rank, rec)

    def recording(self, rank: int) -> RecordedComms | None:
        blob = self.recorded_comms.get(rank)
        return None if blob is None else decode_recording(blob)[1]
