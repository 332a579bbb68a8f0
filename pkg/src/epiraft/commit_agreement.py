# EpiRaft - Decentralized Commit Agreement
# SPDX-License-Identifier: AGPL-3.0

from __future__ import annotations
"""
Bitmap / MaxCommit / NextCommit structures for Version 2.

Every process keeps an n-bit vote record for the index currently under vote
(nextCommit). A process only ever raises its own bit. Once a majority of bits
is set, maxCommit advances to nextCommit and voting moves on. The three fields
travel on AppendEntries (and their replies) and are combined with merge().

Invariant at rest: next_commit > max_commit.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .protocol_types import ReplicatedLog, bits_to_str


@dataclass
class CommitState:
    """Per-process commit agreement state."""
    n: int
    self_id: int
    bitmap: list[int] = field(default_factory=list)
    max_commit: int = 0
    next_commit: int = 1

    def __post_init__(self):
        if not self.bitmap:
            self.bitmap = [0] * self.n
        if len(self.bitmap) != self.n:
            raise ValueError(f"bitmap length {len(self.bitmap)} != {self.n}")

    @classmethod
    def fresh(cls, n: int, self_id: int) -> "CommitState":
        return cls(n=n, self_id=self_id)

    @property
    def majority(self) -> int:
        return self.n // 2 + 1

    def ones(self) -> int:
        return sum(self.bitmap)

    def bitstring(self) -> str:
        return bits_to_str(self.bitmap)

    def snapshot(self) -> tuple[str, int, int]:
        return (self.bitstring(), self.max_commit, self.next_commit)


def _last_is_current(log: ReplicatedLog, current_term: int) -> bool:
    return log.last_index > 0 and log.last_term == current_term


def update(cs: CommitState, log: ReplicatedLog, current_term: int,
           majority: Optional[int] = None) -> bool:
    """Advance maxCommit when the bitmap shows a majority. Returns True on change."""
    majority = cs.majority if majority is None else majority
    if cs.ones() < majority:
        return False
    cs.max_commit = cs.next_commit
    cs.bitmap = [0] * cs.n
    if cs.next_commit >= log.last_index or log.last_term != current_term:
        cs.next_commit += 1
    else:
        cs.next_commit = log.last_index
        cs.bitmap[cs.self_id] = 1
    return True


def merge(cs: CommitState, bitmap: Sequence[int], max_commit: int, next_commit: int) -> bool:
    """Combine fields received from another process. Returns True on change."""
    if len(bitmap) != cs.n:
        raise ValueError(f"bitmap length {len(bitmap)} != {cs.n}")
    before = (list(cs.bitmap), cs.max_commit, cs.next_commit)

    cs.max_commit = max(cs.max_commit, max_commit)
    if cs.next_commit <= next_commit:
        cs.bitmap = [a | b for a, b in zip(cs.bitmap, bitmap)]
    if cs.next_commit <= cs.max_commit:
        cs.bitmap = list(bitmap)
        cs.next_commit = next_commit

    return (cs.bitmap, cs.max_commit, cs.next_commit) != before


def subsumes(cs: CommitState, bitmap: Sequence[int], max_commit: int, next_commit: int) -> bool:
    """
    True when merge() with these fields would leave cs unchanged.

    Only answers for a state at rest; anything else reports False.
    """
    if len(bitmap) != cs.n or cs.next_commit <= cs.max_commit:
        return False
    if max_commit > cs.max_commit:
        return False
    if next_commit < cs.next_commit:
        return True
    return all(a or not b for a, b in zip(cs.bitmap, bitmap))


def try_set_own_bit(cs: CommitState, log: ReplicatedLog, current_term: int) -> bool:
    """Raise this process's bit if it holds nextCommit and its tail is of the current term."""
    if cs.bitmap[cs.self_id]:
        return False
    if log.has(cs.next_commit) and _last_is_current(log, current_term):
        cs.bitmap[cs.self_id] = 1
        return True
    return False


def follower_commit_index(cs: CommitState, log: ReplicatedLog, current_term: int,
                          commit_index: int) -> int:
    """commitIndex rule shared by followers and the V2 leader."""
    if not _last_is_current(log, current_term):
        return commit_index
    return max(commit_index, min(log.last_index, cs.max_commit))


def reset_on_term_change(cs: CommitState) -> None:
    """Election started or a newer term discovered."""
    cs.bitmap = [0] * cs.n
    cs.next_commit = cs.max_commit + 1


def attach_fields(cs: CommitState) -> tuple[tuple, int, int]:
    """Copy of the current fields for an outbound message."""
    return (tuple(cs.bitmap), cs.max_commit, cs.next_commit)


def settle(cs: CommitState, log: ReplicatedLog, current_term: int) -> bool:
    """try_set_own_bit, then update() until it stops firing."""
    changed = try_set_own_bit(cs, log, current_term)
    while update(cs, log, current_term):
        changed = True
    return changed


def absorb_fields(cs: CommitState, msg, log: ReplicatedLog, current_term: int,
                  commit_index: int) -> tuple[bool, int]:
    """
    Run the receive pipeline for a message carrying commit fields:
    merge, own bit, update to a fixed point, commit rule.

    Returns (state changed, new commit index).
    """
    changed = False
    if msg is not None and msg.has_commit_fields:
        changed = merge(cs, msg.bitmap, msg.max_commit, msg.next_commit)
    changed = settle(cs, log, current_term) or changed
    return changed, follower_commit_index(cs, log, current_term, commit_index)
