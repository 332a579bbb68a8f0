# EpiRaft - Gossip Engine
# SPDX-License-Identifier: AGPL-3.0

from __future__ import annotations
"""
Permutation-based epidemic rounds for AppendEntries (Version 1).

The leader walks a seeded random permutation of its peers circularly, F peers
per round. Followers answer only the first copy of a round (RoundLC freshness),
treat it as a heartbeat, and relay it once through their own walker.
"""

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Optional, Sequence, Union

import numpy as np

from .commit_agreement import attach_fields
from .protocol_types import AppendEntriesMsg, AppendEntriesReply

if TYPE_CHECKING:
    from .raft_core import NodeState


Seed = Union[int, Sequence[int], np.random.SeedSequence]


@dataclass
class PermutationWalker:
    """Circular walk over a fixed permutation of the other processes."""
    order: list[int]
    fanout: int
    cursor: int = 0

    def __post_init__(self):
        if not self.order:
            raise ValueError("walker needs at least one peer")
        if not 1 <= self.fanout <= len(self.order):
            raise ValueError(f"fanout {self.fanout} outside 1..{len(self.order)}")


@dataclass
class GossipSeen:
    """Highest round observed in the current term."""
    term: int = 0
    round_lc: int = 0

    def reset(self, term: int) -> None:
        self.term = term
        self.round_lc = 0

    def is_fresh(self, msg: AppendEntriesMsg) -> bool:
        if msg.term != self.term:
            return msg.term > self.term
        return msg.round_lc > self.round_lc


@dataclass
class GossipOutcome:
    deliver: bool
    reply: Optional[AppendEntriesReply] = None
    relays: list = field(default_factory=list)


def new_walker(n: int, self_id: int, seed: Seed, fanout: int = 3) -> PermutationWalker:
    """Uniformly random permutation of every id except self_id, drawn from the seed."""
    if n < 2:
        raise ValueError("a walker needs n >= 2")
    rng = np.random.default_rng(seed)
    peers = [pid for pid in range(n) if pid != self_id]
    order = [int(pid) for pid in rng.permutation(peers)]
    return PermutationWalker(order=order, fanout=max(1, min(fanout, len(order))))


def gossip_round(walker: PermutationWalker, msg: AppendEntriesMsg) -> list[tuple[int, AppendEntriesMsg]]:
    """Send m to the next F peers of the permutation; the cursor wraps modulo |u|."""
    size = len(walker.order)
    sends = [(walker.order[(walker.cursor + i) % size], msg) for i in range(walker.fanout)]
    walker.cursor += walker.fanout
    return sends


def leader_start_round(state: "NodeState", walker: PermutationWalker,
                       now: int) -> list[tuple[int, AppendEntriesMsg]]:
    """Open a new round carrying every entry the leader has not yet committed."""
    state.gossip.round_lc += 1
    commit = state.commit_index
    msg = AppendEntriesMsg(
        term=state.current_term,
        leader_id=state.id,
        prev_log_index=commit,
        prev_log_term=state.log.term_at(commit),
        entries=state.log.entries_from(commit + 1),
        leader_commit=commit,
        is_gossip=True,
        round_lc=state.gossip.round_lc,
    )
    if state.commit_state is not None:
        msg = msg.with_commit_fields(attach_fields(state.commit_state))
    return gossip_round(walker, msg)


def on_gossip_receive(state: "NodeState", walker: PermutationWalker, msg: AppendEntriesMsg,
                      deliver: Callable[[AppendEntriesMsg], Optional[AppendEntriesReply]],
                      relay: bool = True) -> GossipOutcome:
    """
    First-receipt rule. A fresh round is delivered, answered and relayed once;
    anything else is dropped silently.

    Term adoption is the caller's job and must happen before this call.
    """
    if not state.gossip.is_fresh(msg):
        return GossipOutcome(deliver=False)
    if msg.term > state.gossip.term:
        state.gossip.reset(msg.term)
    state.gossip.round_lc = msg.round_lc
    reply = deliver(msg)
    relays = gossip_round(walker, msg) if relay else []
    return GossipOutcome(deliver=True, reply=reply, relays=relays)
