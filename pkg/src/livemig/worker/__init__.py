"""Simulated training devices: synthetic model, fabric, memory and records."""

from .fabric import Connections, Deadlock, FabricError, GroupIndex, MissingConnection, ReplayMismatch
from .model import CommOp, ModelState, OpKind, gradient_hash, iteration_program, mix64
from .node import (
    IterationResult,
    Mode,
    RedundancyUnavailable,
    Worker,
    device_id,
    load_checkpoint,
    record_first_iteration,
    redundancy_source,
    run_iteration,
    save_checkpoint,
    transfer_state,
)
from .records import AlreadyRecorded, CheckpointStore, MissingSnapshot, RecordedComms, WireError
from .resources import LazyInitRegistry, MemoryLedger, MemoryOverflow, Tag

__all__ = [
    "AlreadyRecorded",
    "CheckpointStore",
    "CommOp",
    "Connections",
    "Deadlock",
    "FabricError",
    "GroupIndex",
    "IterationResult",
    "LazyInitRegistry",
    "MemoryLedger",
    "MemoryOverflow",
    "MissingConnection",
    "MissingSnapshot",
    "Mode",
    "ModelState",
    "OpKind",
    "RecordedComms",
    "RedundancyUnavailable",
    "ReplayMismatch",
    "Tag",
    "WireError",
    "Worker",
    "device_id",
    "gradient_hash",
    "iteration_program",
    "load_checkpoint",
    "mix64",
    "record_first_iteration",
    "redundancy_source",
    "run_iteration",
    "save_checkpoint",
    "transfer_state",
]
