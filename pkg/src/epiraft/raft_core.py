# EpiRaft - Raft Core
# SPDX-License-Identifier: AGPL-3.0

from __future__ import annotations
"""
Per-node Raft state machine: elections, log replication, leader commit.

The engine is event-in / messages-out. The owner (the simulator) feeds it
messages, client requests and ticks, then drains `outbox` and
`client_outbox`. State deltas go to a recorder callback so the owner can build
an audit trace. Gossip dissemination (V1) and decentralized commit (V2) hook in
through gossip_engine and commit_agreement.

Role transition edges, as recorded in role trace records:
  1 start/recover -> follower     4 candidate -> follower (leader found / newer term)
  2 follower -> candidate         5 candidate -> candidate (election timeout)
  3 candidate -> leader           6 leader -> follower (newer term)
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import commit_agreement as ca
from .commit_agreement import CommitState
from .gossip_engine import GossipSeen, PermutationWalker, leader_start_round, new_walker, on_gossip_receive
from .protocol_types import (
    AppendEntriesMsg,
    AppendEntriesReply,
    ClientReply,
    ClientRequest,
    LogChange,
    LogEntry,
    Message,
    ReplicatedLog,
    ReplyStatus,
    RequestVoteMsg,
    RequestVoteReply,
    Variant,
    validate_append_entries,
)

logger = logging.getLogger(__name__)

Recorder = Callable[[str, dict[str, Any]], None]


class Role(str, Enum):
    FOLLOWER = "follower"
    CANDIDATE = "candidate"
    LEADER = "leader"


class ApplierError(RuntimeError):
    """The state machine applier failed; the node must halt."""


@dataclass(frozen=True)
class RaftSettings:
    """Resolved protocol parameters (integer microseconds)."""
    variant: Variant
    election_timeout_us: int
    round_period_us: int
    idle_heartbeat_period_us: int
    fanout: int = 3
    gossip_relay: bool = True
    baseline_eager: bool = True


@dataclass
class LeaderVolatile:
    next_index: dict[int, int]
    match_index: dict[int, int]
    last_repair: dict[int, tuple[int, int]] = field(default_factory=dict)


@dataclass
class NodeState:
    """One process's full Raft state plus the gossip and commit extensions."""
    id: int
    n: int
    role: Role = Role.FOLLOWER
    current_term: int = 0
    voted_for: Optional[int] = None
    log: ReplicatedLog = field(default_factory=ReplicatedLog)
    commit_index: int = 0
    last_applied: int = 0
    gossip: GossipSeen = field(default_factory=GossipSeen)
    leader_volatile: Optional[LeaderVolatile] = None
    commit_state: Optional[CommitState] = None
    election_deadline: int = 0
    heartbeat_due: int = 0
    leader_id: Optional[int] = None
    votes: set[int] = field(default_factory=set)
    last_round_at: int = 0

    @property
    def round_lc(self) -> int:
        return self.gossip.round_lc

    @property
    def majority(self) -> int:
        return self.n // 2 + 1

    def peers(self) -> list[int]:
        return [pid for pid in range(self.n) if pid != self.id]


@dataclass(frozen=True)
class DurableImage:
    """Fields that survive a crash."""
    current_term: int
    voted_for: Optional[int]
    log: ReplicatedLog


@dataclass(frozen=True)
class ClientDecision:
    status: ReplyStatus
    index: Optional[int] = None
    leader_hint: Optional[int] = None

    @property
    def accepted(self) -> bool:
        return self.status is ReplyStatus.OK


@dataclass
class AppendResult:
    reply: Optional[AppendEntriesReply]
    state_changed: bool


class HistoryApplier:
    """Default deterministic state machine: append every command to a history."""

    def __init__(self):
        self.history: list[tuple[int, bytes]] = []

    def __call__(self, index: int, entry: LogEntry) -> None:
        self.history.append((index, entry.command))


def _noop_recorder(kind: str, payload: dict[str, Any]) -> None:
    return None


class RaftNode:
    """Raft engine for one process, parameterized by Variant."""

    def __init__(self, node_id: int, n: int, settings: RaftSettings, seed: Sequence[int],
                 applier: Optional[Callable[[int, LogEntry], None]] = None,
                 recorder: Optional[Recorder] = None,
                 state: Optional[NodeState] = None):
        self.settings = settings
        self.variant = settings.variant
        self.state = state if state is not None else NodeState(id=node_id, n=n)
        seed = list(seed)
        self.rng = np.random.default_rng(seed + [node_id, 2])
        self.walker: Optional[PermutationWalker] = None
        if self.variant.gossips and n > 1:
            self.walker = new_walker(n, node_id, seed + [node_id, 1], settings.fanout)
        if self.variant is Variant.V2 and self.state.commit_state is None:
            self.state.commit_state = CommitState.fresh(n, node_id)
        self.applier = applier if applier is not None else HistoryApplier()
        self.recorder = recorder if recorder is not None else _noop_recorder
        self.outbox: list[tuple[int, Message]] = []
        self.client_outbox: list[ClientReply] = []
        self.pending_clients: dict[int, tuple[int, int]] = {}
        # client_id -> (request_id, index) accepted in the current leadership
        self.accepted: dict[int, tuple[int, int]] = {}
        # Work counters the owner reads and resets (CPU proxy)
        self.entries_appended = 0
        self.scanned = 0
        # Set by on_message when the message taught this node nothing new
        self.subsumed = False

    # ------------------------------------------------------------------
    # lifecycle
    # ------------------------------------------------------------------

    def start(self, now: int) -> None:
        """Edge 1: start (or recover) as follower."""
        s = self.state
        s.role = Role.FOLLOWER
        s.gossip.reset(s.current_term)
        s.election_deadline = now + self._election_timeout()
        self._record("role", role=s.role.value, term=s.current_term, edge=1)
        if s.commit_state is not None:
            self._record_commit_state()

    def durable_image(self) -> DurableImage:
        s = self.state
        return DurableImage(s.current_term, s.voted_for, s.log.copy())

    @classmethod
    def recover(cls, image: DurableImage, n: int, node_id: int, settings: RaftSettings,
                seed: Sequence[int], now: int, applier=None, recorder=None) -> "RaftNode":
        """Rebuild a node from its durable image; volatile state starts over."""
        state = NodeState(id=node_id, n=n, current_term=image.current_term,
                          voted_for=image.voted_for, log=image.log.copy())
        node = cls(node_id, n, settings, seed, applier=applier, recorder=recorder, state=state)
        node.start(now)
        return node

    def next_wakeup(self) -> int:
        s = self.state
        return s.heartbeat_due if s.role is Role.LEADER else s.election_deadline

    # ------------------------------------------------------------------
    # helpers
    # ------------------------------------------------------------------

    def _record(self, kind: str, **payload: Any) -> None:
        self.recorder(kind, payload)

    def _record_commit_state(self) -> None:
        bits, mc, nc = self.state.commit_state.snapshot()
        self._record("commit_state", bitmap=bits, max_commit=mc, next_commit=nc)

    def _record_log_change(self, change: LogChange) -> None:
        self._record("log", truncate=change.truncated_from, start=change.start,
                     entries=[[e.term, e.digest] for e in change.entries])

    def _send(self, dest: int, msg: Message) -> None:
        self.outbox.append((dest, msg))

    def _election_timeout(self) -> int:
        base = self.settings.election_timeout_us
        return base + int(self.rng.integers(0, base + 1))

    def _set_commit(self, value: int) -> bool:
        s = self.state
        value = min(value, s.log.last_index)
        if value <= s.commit_index:
            return False
        s.commit_index = value
        self._record("commit", index=value)
        return True

    def _observe_term(self, term: int, now: int) -> None:
        """Adopt a newer term (edges 4 and 6 when not already follower)."""
        s = self.state
        if term <= s.current_term:
            return
        s.current_term = term
        s.voted_for = None
        s.leader_id = None
        s.gossip.reset(term)
        self._record("term", term=term)
        if s.role is not Role.FOLLOWER:
            self._become_follower(edge=6 if s.role is Role.LEADER else 4)
        if s.commit_state is not None:
            ca.reset_on_term_change(s.commit_state)
            self._record_commit_state()

    def _become_follower(self, edge: int) -> None:
        s = self.state
        if s.role is Role.LEADER:
            logger.debug("node %d steps down in term %d", s.id, s.current_term)
        s.role = Role.FOLLOWER
        s.leader_volatile = None
        s.votes = set()
        self.pending_clients.clear()
        self.accepted.clear()
        self._record("role", role=s.role.value, term=s.current_term, edge=edge)

    def _commit_fields_reply(self, success: bool, match_hint: int) -> AppendEntriesReply:
        s = self.state
        fields = ca.attach_fields(s.commit_state) if s.commit_state is not None else (None, None, None)
        return AppendEntriesReply(term=s.current_term, success=success, replier_id=s.id,
                                  match_hint=match_hint, bitmap=fields[0],
                                  max_commit=fields[1], next_commit=fields[2])

    def _absorb(self, msg) -> None:
        """V2 receive pipeline; also settles the leader after its own appends."""
        s = self.state
        decided = s.commit_state.max_commit
        changed, commit = ca.absorb_fields(s.commit_state, msg, s.log, s.current_term, s.commit_index)
        if changed:
            self._record_commit_state()
        if self._set_commit(commit):
            self.apply_committed()
        if s.role is Role.LEADER and s.commit_state.max_commit > decided:
            # Spread a decision without waiting out the round period
            s.heartbeat_due = min(s.heartbeat_due,
                                  s.last_round_at + self.settings.round_period_us // 4)

    def _absorb_if_new(self, msg) -> bool:
        """Absorb msg's commit fields unless merging them would change nothing."""
        cs = self.state.commit_state
        if cs is None or not msg.has_commit_fields:
            return False
        if ca.subsumes(cs, msg.bitmap, msg.max_commit, msg.next_commit):
            return False
        self._absorb(msg)
        return True

    # ------------------------------------------------------------------
    # client requests
    # ------------------------------------------------------------------

    def handle_client_request(self, command: bytes, now: int,
                              client: Optional[tuple[int, int]] = None) -> ClientDecision:
        s = self.state
        if s.role is not Role.LEADER:
            if s.leader_id is not None and s.role is Role.FOLLOWER:
                return ClientDecision(ReplyStatus.REDIRECT, leader_hint=s.leader_id)
            return ClientDecision(ReplyStatus.UNAVAILABLE)

        if client is not None:
            known = self.accepted.get(client[0])
            if known is not None and known[0] == client[1]:
                return self._retransmitted(client, known[1])

        entry = LogEntry(s.current_term, command)
        index = s.log.append(entry)
        self.entries_appended += 1
        self._record_log_change(LogChange(None, index, (entry,)))
        self._record("client_accept", index=index, term=s.current_term,
                     client=None if client is None else list(client))
        if client is not None:
            self.pending_clients[index] = client
            self.accepted[client[0]] = (client[1], index)

        if self.variant is Variant.V2:
            self._absorb(None)
        elif self.variant is Variant.BASELINE:
            if self.settings.baseline_eager:
                prev_term = s.log.term_at(index - 1)
                for peer in s.peers():
                    self._send(peer, AppendEntriesMsg(
                        term=s.current_term, leader_id=s.id, prev_log_index=index - 1,
                        prev_log_term=prev_term, entries=(entry,), leader_commit=s.commit_index))
            if s.n == 1:
                self.advance_commit_leader()
        if self.variant.gossips:
            s.heartbeat_due = min(s.heartbeat_due, s.last_round_at + self.settings.round_period_us)
        return ClientDecision(ReplyStatus.OK, index=index)

    def _retransmitted(self, client: tuple[int, int], index: int) -> ClientDecision:
        """A request this leader already appended: answer or wait, never append twice."""
        logger.debug("node %d: client %d retransmitted request %d (index %d)",
                     self.state.id, client[0], client[1], index)
        if index <= self.state.last_applied:
            self.client_outbox.append(ClientReply(client[0], client[1], ReplyStatus.OK, index=index))
        else:
            self.pending_clients[index] = client
        return ClientDecision(ReplyStatus.OK, index=index)

    def on_client_request(self, req: ClientRequest, now: int) -> ClientDecision:
        decision = self.handle_client_request(req.command, now, client=(req.client_id, req.request_id))
        if not decision.accepted:
            self.client_outbox.append(ClientReply(req.client_id, req.request_id, decision.status,
                                                  leader_hint=decision.leader_hint))
        return decision

    # ------------------------------------------------------------------
    # AppendEntries
    # ------------------------------------------------------------------

    def handle_append_entries(self, msg: AppendEntriesMsg, now: int) -> AppendResult:
        """Log consistency check and append; always yields a reply."""
        s = self.state
        failure_hint = max(0, min(s.log.last_index, msg.prev_log_index - 1))
        if msg.term < s.current_term:
            return AppendResult(self._commit_fields_reply(False, failure_hint), False)

        changed = False
        if msg.term > s.current_term:
            self._observe_term(msg.term, now)
            changed = True
        if s.role is Role.CANDIDATE:
            self._become_follower(edge=4)
            changed = True
        if s.role is Role.LEADER:
            return AppendResult(None, changed)
        if s.leader_id != msg.leader_id:
            s.leader_id = msg.leader_id
            changed = True
        s.election_deadline = now + self._election_timeout()

        if s.log.term_at(msg.prev_log_index) != msg.prev_log_term:
            if s.commit_state is not None:
                self._absorb(msg)
            return AppendResult(self._commit_fields_reply(False, failure_hint), changed)

        change = s.log.reconcile(msg.prev_log_index, msg.entries)
        if change is not None:
            self.entries_appended += change.appended
            self._record_log_change(change)
            changed = True
        last_new = msg.prev_log_index + len(msg.entries)

        if s.commit_state is not None:
            self._absorb(msg)
        elif msg.leader_commit > s.commit_index:
            if self._set_commit(min(msg.leader_commit, last_new)):
                self.apply_committed()
                changed = True
        return AppendResult(self._commit_fields_reply(True, last_new), changed)

    def _on_append_entries(self, sender: int, msg: AppendEntriesMsg, now: int) -> None:
        s = self.state
        problem = validate_append_entries(msg, s.n, self.variant)
        if problem is not None:
            logger.warning("node %d drops AppendEntries from %d: %s", s.id, sender, problem)
            self._record("reject", src=sender, reason=problem)
            return
        if msg.term < s.current_term:
            # Relayed stale rounds are dropped; the stale leader hears from direct sends
            if not msg.is_gossip or sender == msg.leader_id:
                self._send(msg.leader_id, self.handle_append_entries(msg, now).reply)
            else:
                self.subsumed = True
            return
        if msg.term > s.current_term:
            self._observe_term(msg.term, now)

        if s.role is Role.LEADER:
            # A relayed copy of our own round
            self.subsumed = not self._absorb_if_new(msg)
            return

        if not msg.is_gossip:
            result = self.handle_append_entries(msg, now)
            self._send(msg.leader_id, result.reply)
            return

        outcome = on_gossip_receive(s, self.walker, msg,
                                    deliver=lambda m: self.handle_append_entries(m, now).reply,
                                    relay=self.settings.gossip_relay)
        if not outcome.deliver:
            self.subsumed = not self._absorb_if_new(msg)
            return
        if outcome.reply is not None:
            self._send(msg.leader_id, outcome.reply)
        for dest, relay in outcome.relays:
            if s.commit_state is not None:
                relay = relay.with_commit_fields(ca.attach_fields(s.commit_state))
            self._send(dest, relay)

    def handle_append_entries_reply(self, reply: AppendEntriesReply, now: int) -> None:
        s = self.state
        if reply.term > s.current_term:
            self._observe_term(reply.term, now)
            return
        if s.role is not Role.LEADER or reply.term < s.current_term:
            self.subsumed = True
            return
        lv = s.leader_volatile
        peer = reply.replier_id
        absorbed = self._absorb_if_new(reply)

        if reply.success:
            progressed = reply.match_hint > lv.match_index[peer]
            if progressed:
                lv.match_index[peer] = reply.match_hint
                lv.next_index[peer] = reply.match_hint + 1
            if s.commit_state is not None:
                self.subsumed = not absorbed
            elif progressed:
                if self.advance_commit_leader() > 0:
                    self.apply_committed()
            else:
                self.subsumed = True
            return

        floor = lv.match_index[peer] + 1
        lv.next_index[peer] = max(1, floor, min(lv.next_index[peer] - 1, reply.match_hint + 1))
        self._send_repair(peer, now)

    def _append_for(self, peer: int) -> AppendEntriesMsg:
        s = self.state
        nxt = s.leader_volatile.next_index[peer]
        msg = AppendEntriesMsg(
            term=s.current_term, leader_id=s.id, prev_log_index=nxt - 1,
            prev_log_term=s.log.term_at(nxt - 1), entries=s.log.entries_from(nxt),
            leader_commit=s.commit_index)
        if s.commit_state is not None:
            msg = msg.with_commit_fields(ca.attach_fields(s.commit_state))
        return msg

    def _send_repair(self, peer: int, now: int) -> None:
        """Point-to-point repair from nextIndex; at most one per round period per position."""
        lv = self.state.leader_volatile
        nxt = lv.next_index[peer]
        last = lv.last_repair.get(peer)
        if last is not None and last[1] == nxt and now - last[0] < self.settings.round_period_us:
            return
        lv.last_repair[peer] = (now, nxt)
        self._send(peer, self._append_for(peer))

    def advance_commit_leader(self) -> int:
        """Classic majority commit (Baseline, V1). Returns the number of newly committed entries."""
        s = self.state
        if s.role is not Role.LEADER or self.variant is Variant.V2:
            return 0
        matches = sorted(list(s.leader_volatile.match_index.values()) + [s.log.last_index],
                         reverse=True)
        self.scanned += len(matches)
        candidate = matches[s.majority - 1]
        before = s.commit_index
        if candidate > before and s.log.term_at(candidate) == s.current_term:
            self._set_commit(candidate)
        return s.commit_index - before

    # ------------------------------------------------------------------
    # elections
    # ------------------------------------------------------------------

    def _start_election(self, now: int) -> None:
        s = self.state
        edge = 5 if s.role is Role.CANDIDATE else 2
        s.current_term += 1
        s.role = Role.CANDIDATE
        s.voted_for = s.id
        s.votes = {s.id}
        s.leader_id = None
        s.gossip.reset(s.current_term)
        s.election_deadline = now + self._election_timeout()
        self._record("term", term=s.current_term)
        self._record("role", role=s.role.value, term=s.current_term, edge=edge)
        if s.commit_state is not None:
            ca.reset_on_term_change(s.commit_state)
            self._record_commit_state()
        if len(s.votes) >= s.majority:
            self._become_leader(now)
            return
        msg = RequestVoteMsg(s.current_term, s.id, s.log.last_index, s.log.last_term)
        for peer in s.peers():
            self._send(peer, msg)

    def handle_request_vote(self, msg: RequestVoteMsg, now: int) -> RequestVoteReply:
        s = self.state
        if msg.term > s.current_term:
            self._observe_term(msg.term, now)
        granted = (
            msg.term == s.current_term
            and s.voted_for in (None, msg.candidate_id)
            and s.log.is_up_to_date(msg.last_log_term, msg.last_log_index)
        )
        if granted:
            s.voted_for = msg.candidate_id
            s.election_deadline = now + self._election_timeout()
            self._record("vote", candidate=msg.candidate_id, term=s.current_term)
        return RequestVoteReply(s.current_term, granted, s.id)

    def handle_vote_reply(self, reply: RequestVoteReply, now: int) -> None:
        s = self.state
        if reply.term > s.current_term:
            self._observe_term(reply.term, now)
            return
        if s.role is not Role.CANDIDATE or reply.term != s.current_term or not reply.vote_granted:
            return
        s.votes.add(reply.voter_id)
        if len(s.votes) >= s.majority:
            self._become_leader(now)

    def _become_leader(self, now: int) -> None:
        s = self.state
        s.role = Role.LEADER
        s.leader_id = s.id
        s.votes = set()
        self.accepted = {}
        s.leader_volatile = LeaderVolatile(
            next_index={p: s.log.last_index + 1 for p in s.peers()},
            match_index={p: 0 for p in s.peers()},
        )
        logger.debug("node %d elected leader for term %d", s.id, s.current_term)
        self._record("role", role=s.role.value, term=s.current_term, edge=3,
                     last_index=s.log.last_index, last_term=s.log.last_term)
        if s.commit_state is not None:
            ca.reset_on_term_change(s.commit_state)
            self._record_commit_state()
            self._absorb(None)
        self._leader_broadcast(now)

    # ------------------------------------------------------------------
    # timers
    # ------------------------------------------------------------------

    def _leader_broadcast(self, now: int) -> None:
        s = self.state
        if self.variant.gossips:
            for dest, msg in leader_start_round(s, self.walker, now):
                self._send(dest, msg)
        else:
            for peer in s.peers():
                self._send(peer, self._append_for(peer))
        s.last_round_at = now
        pending = s.commit_index < s.log.last_index
        period = self.settings.round_period_us if pending else self.settings.idle_heartbeat_period_us
        s.heartbeat_due = now + period

    def tick(self, now: int) -> list[tuple[int, Message]]:
        """Fire whichever timer is due; returns the messages queued by this tick."""
        s = self.state
        mark = len(self.outbox)
        if s.role is Role.LEADER:
            if now >= s.heartbeat_due:
                self._leader_broadcast(now)
        elif now >= s.election_deadline:
            self._start_election(now)
        return self.outbox[mark:]

    # ------------------------------------------------------------------
    # dispatch and application
    # ------------------------------------------------------------------

    def on_message(self, sender: int, msg: Message, now: int) -> None:
        self.subsumed = False
        if isinstance(msg, AppendEntriesMsg):
            self._on_append_entries(sender, msg, now)
        elif isinstance(msg, AppendEntriesReply):
            self.handle_append_entries_reply(msg, now)
        elif isinstance(msg, RequestVoteMsg):
            self._send(msg.candidate_id, self.handle_request_vote(msg, now))
        elif isinstance(msg, RequestVoteReply):
            self.handle_vote_reply(msg, now)
        elif isinstance(msg, ClientRequest):
            self.on_client_request(msg, now)
        else:
            raise TypeError(f"unexpected message {type(msg).__name__}")

    def apply_committed(self) -> int:
        """Apply lastApplied+1..commitIndex in order; the leader answers its clients."""
        s = self.state
        lo = s.last_applied + 1
        hi = s.commit_index
        if hi < lo:
            return 0
        for index in range(lo, hi + 1):
            entry = s.log.entry(index)
            try:
                self.applier(index, entry)
            except Exception as exc:
                raise ApplierError(f"node {s.id} failed applying index {index}: {exc}") from exc
            s.last_applied = index
            client = self.pending_clients.pop(index, None)
            if client is not None and s.role is Role.LEADER:
                self.client_outbox.append(ClientReply(client[0], client[1], ReplyStatus.OK, index=index))
        self._record("apply", lo=lo, hi=hi)
        return hi - lo + 1
