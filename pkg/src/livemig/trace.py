"""Structured run trace: one JSON object per line plus a summary document."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Callable, Iterable

KINDS = (
    "ITER_DONE",
    "PHASE",
    "STEP_ACK",
    "TRANSFER",
    "ALLOC",
    "FREE",
    "DOWNTIME_BEGIN",
    "DOWNTIME_END",
    "CHECKPOINT",
    "FAILURE",
)

TRACE_FILE = "trace.jsonl"
SUMMARY_FILE = "summary.json"


class TraceError(Exception):
    pass


def _line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


class Trace:
    def __init__(self, clock: Callable[[], int]):
        self.clock = clock
        self.records: list[dict[str, Any]] = []

    def emit(self, node: str, kind: str, **detail: Any) -> dict:
        if kind not in KINDS:
            raise TraceError(f"unknown record kind {kind}")
        rec = {"time": self.clock(), "seq": len(self.records), "node": node, "kind": kind, "detail": detail}
        self.records.append(rec)
        return rec

    def __getstate__(self) -> dict:
        # The clock is a closure over a live simulator; a shipped trace is read-only.
        return {"records": self.records}

    def __setstate__(self, state: dict) -> None:
        self.records = state["records"]
        self.clock = _frozen_clock

    def of_kind(self, *kinds: str) -> list[dict]:
        return [r for r in self.records if r["kind"] in kinds]

    def phases(self, name: str) -> list[dict]:
        return [r for r in self.records if r["kind"] == "PHASE" and r["detail"].get("name") == name]

    def lines(self) -> Iterable[str]:
        return (_line(r) for r in self.records)

    def digest(self) -> str:
        return digest_records(self.records)

    def write(self, out_dir: str | Path, summary: dict) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / TRACE_FILE
        path.write_text("".join(line + "\n" for line in self.lines()))
        (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return path


def digest_records(records: Iterable[dict]) -> str:
    h = hashlib.sha256()
    for rec in records:
        h.update(_line(rec).encode())
        h.update(b"\n")
    return h.hexdigest()


def read_trace(path: str | Path) -> list[dict]:
    """Load a trace file (or a directory holding one) and check ordering."""
    p = Path(path)
    if p.is_dir():
        p = p / TRACE_FILE
    records = []
    for n, line in enumerate(p.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceError(f"{p}:{n}: {exc.msg}") from None
        for key in ("time", "seq", "node", "kind"):
            if key not in rec:
                raise TraceError(f"{p}:{n}: record lacks '{key}'")
        records.append(rec)
    return records


def read_summary(path: str | Path) -> dict | None:
    p = Path(path)
    p = (p if p.is_dir() else p.parent) / SUMMARY_FILE
    return json.loads(p.read_text()) if p.exists() else None


def _frozen_clock() -> int:
    raise TraceError("trace was unpickled and can no longer record")
