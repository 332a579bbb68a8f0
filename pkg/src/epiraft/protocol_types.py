# EpiRaft - Protocol Types
# SPDX-License-Identifier: AGPL-3.0

from __future__ import annotations
"""
Shared domain types and wire records used by every engine variant.

- Variant / ReplyStatus enums
- LogEntry and ReplicatedLog (1-indexed, term-0 sentinel at index 0)
- AppendEntries / RequestVote records, extended with gossip and commit fields
- Client request/reply records
- Canonical structured-text encoding with stable field order
"""

import hashlib
import json
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property
from typing import Any, Iterable, Iterator, Optional, Union


class Variant(str, Enum):
    """Protocol variant, fixed per run and uniform across the cluster."""
    BASELINE = "baseline"
    V1 = "v1"
    V2 = "v2"

    @classmethod
    def parse(cls, name: Union[str, "Variant"]) -> "Variant":
        if isinstance(name, Variant):
            return name
        key = str(name).strip().lower()
        aliases = {"raft": "baseline", "original": "baseline",
                   "gossip": "v1", "version1": "v1", "version2": "v2"}
        key = aliases.get(key, key)
        for variant in cls:
            if variant.value == key:
                return variant
        raise ValueError(f"unknown variant: {name!r}")

    @property
    def gossips(self) -> bool:
        return self is not Variant.BASELINE


class ReplyStatus(str, Enum):
    OK = "ok"
    REDIRECT = "redirect"
    UNAVAILABLE = "unavailable"


@dataclass(frozen=True)
class LogEntry:
    """One client command tagged with the term in which the leader received it."""
    term: int
    command: bytes = b""

    @cached_property
    def digest(self) -> str:
        """Short stable fingerprint of (term, command) used in trace records."""
        h = hashlib.blake2b(digest_size=8)
        h.update(self.term.to_bytes(8, "big"))
        h.update(self.command)
        return h.hexdigest()


SENTINEL = LogEntry(0, b"")


@dataclass(frozen=True)
class LogChange:
    """Result of reconciling a log with a leader's entries."""
    truncated_from: Optional[int]
    start: int
    entries: tuple

    @property
    def appended(self) -> int:
        return len(self.entries)


class ReplicatedLog:
    """
    1-indexed sequence of LogEntry with a sentinel at index 0.

    Terms along the sequence are nondecreasing; append() refuses to break that.
    """

    def __init__(self, entries: Iterable[LogEntry] = ()):
        self._entries: list[LogEntry] = [SENTINEL]
        for entry in entries:
            self.append(entry)

    @property
    def last_index(self) -> int:
        return len(self._entries) - 1

    @property
    def last_term(self) -> int:
        return self._entries[-1].term

    def __len__(self) -> int:
        return len(self._entries) - 1

    def __iter__(self) -> Iterator[LogEntry]:
        return iter(self._entries[1:])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ReplicatedLog):
            return NotImplemented
        return self._entries == other._entries

    def __repr__(self) -> str:
        return f"ReplicatedLog(terms={self.terms()})"

    def has(self, index: int) -> bool:
        return 0 <= index <= self.last_index

    def term_at(self, index: int) -> Optional[int]:
        if 0 <= index <= self.last_index:
            return self._entries[index].term
        return None

    def entry(self, index: int) -> LogEntry:
        if not 0 <= index <= self.last_index:
            raise IndexError(f"log index {index} out of range 0..{self.last_index}")
        return self._entries[index]

    def terms(self) -> list[int]:
        return [e.term for e in self._entries[1:]]

    def append(self, entry: LogEntry) -> int:
        if entry.term < self.last_term:
            raise ValueError(
                f"non-monotone term {entry.term} after {self.last_term} at index {self.last_index + 1}"
            )
        self._entries.append(entry)
        return self.last_index

    def extend(self, entries: Iterable[LogEntry]) -> None:
        for entry in entries:
            self.append(entry)

    def truncate_from(self, index: int) -> None:
        """Delete entries at index and beyond; the sentinel is never removed."""
        if index < 1:
            raise ValueError("cannot truncate the sentinel")
        del self._entries[index:]

    def entries_from(self, lo: int, hi: Optional[int] = None) -> tuple:
        """Entries lo..hi inclusive (hi defaults to the last index)."""
        hi = self.last_index if hi is None else min(hi, self.last_index)
        lo = max(lo, 1)
        if lo > hi:
            return ()
        return tuple(self._entries[lo:hi + 1])

    def copy(self) -> "ReplicatedLog":
        clone = ReplicatedLog()
        clone._entries = list(self._entries)
        return clone

    def is_up_to_date(self, last_term: int, last_index: int) -> bool:
        """True if (last_term, last_index) is at least as recent as this log's tail."""
        return (last_term, last_index) >= (self.last_term, self.last_index)

    def reconcile(self, prev_index: int, entries: tuple) -> Optional[LogChange]:
        """
        Delete any conflicting suffix and append the entries not yet present.

        Caller has already matched (prev_index, prev_term). Returns None when the
        log already holds every entry.
        """
        if not entries:
            return None
        end = prev_index + len(entries)
        # Log matching: same term at the last position means the whole range matches
        if self.term_at(end) == entries[-1].term:
            return None
        truncated_from = None
        for offset, entry in enumerate(entries):
            index = prev_index + 1 + offset
            if index > self.last_index:
                self.extend(entries[offset:])
                return LogChange(truncated_from, index, tuple(entries[offset:]))
            if self._entries[index].term != entry.term:
                self.truncate_from(index)
                truncated_from = index
                self.extend(entries[offset:])
                return LogChange(truncated_from, index, tuple(entries[offset:]))
        return None


# ---------------------------------------------------------------------------
# Wire records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AppendEntriesMsg:
    term: int
    leader_id: int
    prev_log_index: int
    prev_log_term: int
    entries: tuple = ()
    leader_commit: int = 0
    is_gossip: bool = False
    round_lc: int = 0
    bitmap: Optional[tuple] = None
    max_commit: Optional[int] = None
    next_commit: Optional[int] = None

    kind = "append_entries"

    @property
    def has_commit_fields(self) -> bool:
        return self.bitmap is not None and self.max_commit is not None and self.next_commit is not None

    def with_commit_fields(self, fields: tuple) -> "AppendEntriesMsg":
        bitmap, max_commit, next_commit = fields
        return replace(self, bitmap=tuple(bitmap), max_commit=max_commit, next_commit=next_commit)


@dataclass(frozen=True)
class AppendEntriesReply:
    term: int
    success: bool
    replier_id: int
    match_hint: int
    bitmap: Optional[tuple] = None
    max_commit: Optional[int] = None
    next_commit: Optional[int] = None

    kind = "append_reply"

    @property
    def has_commit_fields(self) -> bool:
        return self.bitmap is not None and self.max_commit is not None and self.next_commit is not None


@dataclass(frozen=True)
class RequestVoteMsg:
    term: int
    candidate_id: int
    last_log_index: int
    last_log_term: int

    kind = "request_vote"


@dataclass(frozen=True)
class RequestVoteReply:
    term: int
    vote_granted: bool
    voter_id: int

    kind = "vote_reply"


@dataclass(frozen=True)
class ClientRequest:
    client_id: int
    request_id: int
    command: bytes

    kind = "client_request"


@dataclass(frozen=True)
class ClientReply:
    client_id: int
    request_id: int
    status: ReplyStatus
    index: Optional[int] = None
    leader_hint: Optional[int] = None

    kind = "client_reply"


Message = Union[AppendEntriesMsg, AppendEntriesReply, RequestVoteMsg, RequestVoteReply,
                ClientRequest, ClientReply]

MESSAGE_KINDS = ("append_entries", "append_reply", "request_vote", "vote_reply",
                 "client_request", "client_reply")


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_append_entries(msg: AppendEntriesMsg, n: int,
                            variant: Optional[Variant] = None) -> Optional[str]:
    """
    Check a message for structural consistency.

    Returns None when the message is well formed, otherwise a short violation
    description. When variant is omitted it is inferred from field presence.
    """
    present = [msg.bitmap is not None, msg.max_commit is not None, msg.next_commit is not None]
    if any(present) and not all(present):
        return "partial V2 fields"
    carries_v2 = all(present)

    if variant is not None:
        variant = Variant.parse(variant)
        if variant is Variant.V2 and not carries_v2:
            return "missing V2 field"
        if variant is not Variant.V2 and carries_v2:
            return "unexpected V2 field"
        if variant is Variant.BASELINE and msg.is_gossip:
            return "unexpected gossip flag"

    if msg.prev_log_index < 0:
        return "negative prevLogIndex"
    if msg.prev_log_term < 0 or msg.term < 0:
        return "negative term"
    if msg.leader_commit < 0:
        return "negative leaderCommit"
    if msg.round_lc < 0:
        return "negative roundLC"
    if not 0 <= msg.leader_id < n:
        return "leaderId out of range"

    if carries_v2:
        if len(msg.bitmap) != n:
            return f"bitmap length {len(msg.bitmap)} != {n}"
        if any(bit not in (0, 1) for bit in msg.bitmap):
            return "bitmap holds non-binary value"
        if msg.max_commit < 0 or msg.next_commit <= msg.max_commit:
            return "nextCommit not above maxCommit"

    previous = msg.prev_log_term
    for entry in msg.entries:
        if entry.term < previous:
            return "non-monotone terms"
        if entry.term > msg.term:
            return "entry term above message term"
        previous = entry.term
    return None


# ---------------------------------------------------------------------------
# Canonical encoding
# ---------------------------------------------------------------------------

def bits_to_str(bitmap: Optional[Iterable[int]]) -> Optional[str]:
    if bitmap is None:
        return None
    return "".join("1" if bit else "0" for bit in bitmap)


def str_to_bits(text: Optional[str]) -> Optional[tuple]:
    if text is None:
        return None
    if any(ch not in "01" for ch in text):
        raise ValueError(f"invalid bit string: {text!r}")
    return tuple(1 if ch == "1" else 0 for ch in text)


def _encode_entries(entries: tuple) -> list:
    return [[e.term, e.command.hex()] for e in entries]


def _decode_entries(raw: list) -> tuple:
    return tuple(LogEntry(int(term), bytes.fromhex(cmd)) for term, cmd in raw)


# (python attribute, wire name, codec)
_WIRE: dict[str, tuple[type, tuple]] = {
    "AppendEntries": (AppendEntriesMsg, (
        ("term", "term", "int"),
        ("leader_id", "leaderId", "int"),
        ("prev_log_index", "prevLogIndex", "int"),
        ("prev_log_term", "prevLogTerm", "int"),
        ("entries", "entries", "entries"),
        ("leader_commit", "leaderCommit", "int"),
        ("is_gossip", "isGossip", "bool"),
        ("round_lc", "roundLC", "int"),
        ("bitmap", "bitmap", "bits"),
        ("max_commit", "maxCommit", "opt_int"),
        ("next_commit", "nextCommit", "opt_int"),
    )),
    "AppendEntriesReply": (AppendEntriesReply, (
        ("term", "term", "int"),
        ("success", "success", "bool"),
        ("replier_id", "replierId", "int"),
        ("match_hint", "matchHint", "int"),
        ("bitmap", "bitmap", "bits"),
        ("max_commit", "maxCommit", "opt_int"),
        ("next_commit", "nextCommit", "opt_int"),
    )),
    "RequestVote": (RequestVoteMsg, (
        ("term", "term", "int"),
        ("candidate_id", "candidateId", "int"),
        ("last_log_index", "lastLogIndex", "int"),
        ("last_log_term", "lastLogTerm", "int"),
    )),
    "RequestVoteReply": (RequestVoteReply, (
        ("term", "term", "int"),
        ("vote_granted", "voteGranted", "bool"),
        ("voter_id", "voterId", "int"),
    )),
    "ClientRequest": (ClientRequest, (
        ("client_id", "clientId", "int"),
        ("request_id", "requestId", "int"),
        ("command", "command", "bytes"),
    )),
    "ClientReply": (ClientReply, (
        ("client_id", "clientId", "int"),
        ("request_id", "requestId", "int"),
        ("status", "status", "status"),
        ("index", "index", "opt_int"),
        ("leader_hint", "leaderHint", "opt_int"),
    )),
}

_TYPE_NAMES = {cls: name for name, (cls, _) in _WIRE.items()}


def _encode_value(value: Any, codec: str) -> Any:
    if codec == "entries":
        return _encode_entries(value)
    if codec == "bits":
        return bits_to_str(value)
    if codec == "bytes":
        return value.hex()
    if codec == "status":
        return ReplyStatus(value).value
    if codec == "bool":
        return bool(value)
    return value


def _decode_value(value: Any, codec: str) -> Any:
    if codec == "entries":
        return _decode_entries(value)
    if codec == "bits":
        return str_to_bits(value)
    if codec == "bytes":
        return bytes.fromhex(value)
    if codec == "status":
        return ReplyStatus(value)
    if codec == "bool":
        return bool(value)
    if codec == "opt_int":
        return None if value is None else int(value)
    return int(value)


def encode_message(msg: Message) -> dict[str, Any]:
    """Encode a message as a dict with documented field names in a stable order."""
    name = _TYPE_NAMES.get(type(msg))
    if name is None:
        raise TypeError(f"not a protocol message: {type(msg).__name__}")
    _, fields = _WIRE[name]
    out: dict[str, Any] = {"type": name}
    for attr, wire, codec in fields:
        out[wire] = _encode_value(getattr(msg, attr), codec)
    return out


def decode_message(data: dict[str, Any]) -> Message:
    """Inverse of encode_message."""
    name = data.get("type")
    if name not in _WIRE:
        raise ValueError(f"unknown message type: {name!r}")
    cls, fields = _WIRE[name]
    kwargs = {}
    for attr, wire, codec in fields:
        if wire not in data:
            raise ValueError(f"{name}: missing field {wire!r}")
        kwargs[attr] = _decode_value(data[wire], codec)
    return cls(**kwargs)


def canonical_json(obj: Any) -> str:
    """Compact JSON text; key order is insertion order, so encodings diff bit-exactly."""
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def summarize_message(msg: Message) -> dict[str, Any]:
    """Short form used by message-level trace records."""
    if isinstance(msg, AppendEntriesMsg):
        summary = {"type": "AppendEntries", "term": msg.term, "prev": msg.prev_log_index,
                   "n": len(msg.entries), "commit": msg.leader_commit,
                   "gossip": msg.is_gossip, "rlc": msg.round_lc}
        if msg.has_commit_fields:
            summary["mc"] = msg.max_commit
            summary["nc"] = msg.next_commit
        return summary
    if isinstance(msg, AppendEntriesReply):
        return {"type": "AppendEntriesReply", "term": msg.term, "ok": msg.success,
                "hint": msg.match_hint}
    if isinstance(msg, RequestVoteMsg):
        return {"type": "RequestVote", "term": msg.term,
                "last": [msg.last_log_term, msg.last_log_index]}
    if isinstance(msg, RequestVoteReply):
        return {"type": "RequestVoteReply", "term": msg.term, "granted": msg.vote_granted}
    return encode_message(msg)
