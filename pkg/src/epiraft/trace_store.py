# EpiRaft - Trace Store (JSONL Append-Only)
# SPDX-License-Identifier: AGPL-3.0

from __future__ import annotations
"""
Append-only JSONL trace as the audit record of one simulation run.
Records are immutable, totally ordered by `seq`, and consumed by the safety
checker and the metrics pipeline.

Line 1 is a header {"schema": "epiraft-trace", "version": 1, ...}; every
following line is {"seq", "time", "node", "kind", ...payload}.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional

from .protocol_types import canonical_json

TRACE_SCHEMA = "epiraft-trace"
TRACE_VERSION = 1

# Required payload fields per record kind. Every kind listed here names a node.
RECORD_FIELDS: dict[str, tuple[tuple[str, type], ...]] = {
    "term": (("term", int),),
    "role": (("role", str), ("term", int)),
    "vote": (("candidate", int), ("term", int)),
    "log": (("start", int), ("entries", list)),
    "commit": (("index", int),),
    "commit_state": (("bitmap", str), ("max_commit", int), ("next_commit", int)),
    "apply": (("lo", int), ("hi", int)),
    "client_accept": (("index", int), ("term", int)),
    "crash": (),
    "recover": (),
    "send": (("dst", int), ("outcome", str)),
    "deliver": (("src", int),),
    "drop": (("dst", int), ("reason", str)),
    "reject": (("src", int), ("reason", str)),
}

# Cluster-wide kinds; node may be null
CLUSTER_KINDS = frozenset({"fault", "fault_skipped"})

ROLES = ("follower", "candidate", "leader")


class TraceParseError(ValueError):
    """Malformed trace file."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class TraceStore:
    """
    Append-only trace of one run.

    Records live in memory while the simulation runs and are written as JSONL
    by export(). A store opened from a file is read-only.
    """

    def __init__(self, header: Optional[dict[str, Any]] = None, messages: bool = False):
        self.header: dict[str, Any] = {"schema": TRACE_SCHEMA, "version": TRACE_VERSION}
        self.header.update(header or {})
        self.messages = messages
        # True once every record is known to pass validate_record
        self.validated = False
        self._records: list[dict[str, Any]] = []

    def append(self, kind: str, time: int, node: Optional[int], payload: dict[str, Any]) -> int:
        """
        Append a record.

        Args:
            kind: Record kind (e.g., "role", "commit", "send")
            time: Simulated time in microseconds
            node: Node the record belongs to, None for cluster-wide records
            payload: Record fields

        Returns:
            Sequence number of the record
        """
        seq = len(self._records)
        record = {"seq": seq, "time": time, "node": node, "kind": kind}
        record.update(payload)
        self._records.append(record)
        return seq

    def recorder_for(self, node: int, clock) -> "NodeRecorder":
        return NodeRecorder(self, node, clock)

    def read_all(self) -> Iterator[dict[str, Any]]:
        """Read all records in trace order."""
        return iter(self._records)

    def get_by_kind(self, kind: str) -> Iterator[dict[str, Any]]:
        for record in self._records:
            if record["kind"] == kind:
                yield record

    def lines(self) -> Iterator[str]:
        yield canonical_json(self.header)
        for record in self._records:
            yield canonical_json(record)

    def checksum(self) -> str:
        """sha256 over the exported bytes; equal seeds give equal checksums."""
        h = hashlib.sha256()
        for line in self.lines():
            h.update(line.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    def export(self, output_file: Path) -> Path:
        """Write the trace as JSONL."""
        output_file = Path(output_file)
        output_file.parent.mkdir(parents=True, exist_ok=True)
        with open(output_file, "w", encoding="utf-8") as out:
            for line in self.lines():
                out.write(line + "\n")
        return output_file

    @classmethod
    def from_records(cls, header: dict[str, Any], records: Iterable[dict[str, Any]]) -> "TraceStore":
        store = cls()
        store.header = dict(header)
        store._records = list(records)
        return store


class NodeRecorder:
    """Recorder callback bound to one node; stamps records with the simulator clock."""

    def __init__(self, store: TraceStore, node: int, clock):
        self.store = store
        self.node = node
        self.clock = clock

    def __call__(self, kind: str, payload: dict[str, Any]) -> None:
        self.store.append(kind, self.clock(), self.node, payload)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _node_id(value: Any, n: int) -> bool:
    return _is_int(value) and 0 <= value < n


def header_size(header: dict[str, Any], line_number: int = 1) -> int:
    """Cluster size from a trace header; a header without it cannot be checked."""
    n = header.get("n")
    if not _is_int(n) or n < 1:
        raise TraceParseError(f"trace header needs a positive cluster size n, got {n!r}", line_number)
    return n


def validate_record(record: dict[str, Any], n: int, line_number: int) -> None:
    """Raise TraceParseError unless the record has the fields and types its kind requires."""
    for key in ("seq", "time"):
        if not _is_int(record.get(key)) or record[key] < 0:
            raise TraceParseError(f"{key!r} must be a non-negative integer", line_number)
    kind = record.get("kind")
    if not isinstance(kind, str):
        raise TraceParseError("'kind' must be a string", line_number)
    node = record.get("node")
    if node is not None and not _node_id(node, n):
        raise TraceParseError(f"node {node!r} outside 0..{n - 1}", line_number)
    if kind in CLUSTER_KINDS:
        return
    required = RECORD_FIELDS.get(kind)
    if required is None:
        raise TraceParseError(f"unknown record kind {kind!r}", line_number)
    if node is None:
        raise TraceParseError(f"{kind} record without a node", line_number)
    for name, typ in required:
        value = record.get(name)
        ok = _is_int(value) and value >= 0 if typ is int else isinstance(value, typ)
        if not ok:
            raise TraceParseError(f"{kind} record needs {typ.__name__} field {name!r}", line_number)
    for name in ("dst", "src", "candidate"):
        if name in record and not _node_id(record[name], n):
            raise TraceParseError(f"{name} {record[name]!r} outside 0..{n - 1}", line_number)
    if kind == "role" and record["role"] not in ROLES:
        raise TraceParseError(f"unknown role {record['role']!r}", line_number)
    if kind == "log":
        _validate_log(record, line_number)
    if kind == "apply" and not 1 <= record["lo"] <= record["hi"]:
        raise TraceParseError("apply range must satisfy 1 <= lo <= hi", line_number)


def _validate_log(record: dict[str, Any], line_number: int) -> None:
    truncate = record.get("truncate")
    if truncate is not None and (not _is_int(truncate) or truncate < 1):
        raise TraceParseError("log truncate must be null or an index >= 1", line_number)
    if record["start"] < 1:
        raise TraceParseError("log start must be >= 1", line_number)
    for entry in record["entries"]:
        if not (isinstance(entry, list) and len(entry) == 2 and _is_int(entry[0]) and entry[0] >= 0
                and isinstance(entry[1], str)):
            raise TraceParseError("log entries must be [term, digest] pairs", line_number)


def parse_lines(lines: Iterable[str]) -> TraceStore:
    """Parse JSONL trace text; raises TraceParseError naming the first bad line."""
    header = None
    records = []
    last_seq = -1
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(f"invalid JSON ({exc.msg})", line_number) from exc
        if not isinstance(obj, dict):
            raise TraceParseError("record is not an object", line_number)
        if header is None:
            if obj.get("schema") != TRACE_SCHEMA:
                raise TraceParseError("missing trace header", line_number)
            if obj.get("version") != TRACE_VERSION:
                raise TraceParseError(f"unsupported trace version {obj.get('version')!r}", line_number)
            n = header_size(obj, line_number)
            header = obj
            continue
        for key in ("seq", "time", "kind"):
            if key not in obj:
                raise TraceParseError(f"record missing {key!r}", line_number)
        obj.setdefault("node", None)
        validate_record(obj, n, line_number)
        if obj["seq"] <= last_seq:
            raise TraceParseError("sequence numbers not increasing", line_number)
        last_seq = obj["seq"]
        records.append(obj)
    if header is None:
        raise TraceParseError("empty trace", 1)
    store = TraceStore.from_records(header, records)
    store.validated = True
    return store


def load_trace(path: str | Path) -> TraceStore:
    """Open a trace file written by TraceStore.export."""
    with open(path, "r", encoding="utf-8") as f:
        return parse_lines(f)


# Convenience functions
def create_trace_store(n: int, variant: str, seed: int, repeat: int = 0,
                       messages: bool = False) -> TraceStore:
    """Create an empty trace for one run; the simulator only appends well-formed records."""
    store = TraceStore({"n": n, "variant": variant, "seed": seed, "repeat": repeat}, messages=messages)
    store.validated = True
    return store
