# EpiRaft - Network Simulator
# SPDX-License-Identifier: AGPL-3.0

from __future__ import annotations
"""
Deterministic discrete-event simulator for a cluster of RaftNode engines.

- virtual clock in integer microseconds, single heap of (time, seq, kind, payload)
- per-link reachability (need not be symmetric or transitive), loss and
  triangular latency drawn from one seeded generator
- node service time: each processed event keeps the node busy for
  cost units x cost_unit_us; events reaching a busy node wait in FIFO order
- crash / recover with a durable image, partitions, link cuts, loss changes
- every state delta lands in a TraceStore
"""

import heapq
import logging
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Optional

import numpy as np

from .config import (
    ExperimentConfig,
    FaultAction,
    LatencyConfig,
    client_timeout_us,
    election_timeout_us,
    generate_fault_schedule,
    resolve_settings,
)
from .protocol_types import ClientRequest, Message, Variant, summarize_message
from .raft_core import ApplierError, DurableImage, NodeState, RaftNode, RaftSettings, Role
from .trace_store import TraceStore, create_trace_store
from .workload_metrics import ClientPool, generate_load

logger = logging.getLogger(__name__)

_BATCH = 4096


class SimulationStalled(RuntimeError):
    """The event queue emptied before `until` while clients still waited."""


class SimEvent(NamedTuple):
    time: int
    seq: int
    kind: str
    payload: Any


@dataclass
class Topology:
    """Connectivity, loss and latency between n nodes."""
    n: int
    reachable: np.ndarray
    loss: np.ndarray
    latency: LatencyConfig

    @classmethod
    def full(cls, n: int, latency: Optional[LatencyConfig] = None, loss: float = 0.0) -> "Topology":
        loss_matrix = np.full((n, n), float(loss))
        np.fill_diagonal(loss_matrix, 0.0)
        return cls(n=n, reachable=np.ones((n, n), dtype=bool), loss=loss_matrix,
                   latency=latency or LatencyConfig())

    def copy(self) -> "Topology":
        return Topology(self.n, self.reachable.copy(), self.loss.copy(), self.latency)


@dataclass
class LinkCounter:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0

    @property
    def in_flight(self) -> int:
        return self.sent - self.delivered - self.dropped


@dataclass
class NodeStats:
    """CPU proxy and message counts for one node (all incarnations)."""
    cost: float = 0.0
    busy_us: int = 0
    entries: int = 0
    sent: Counter = field(default_factory=Counter)
    received: Counter = field(default_factory=Counter)

    def snapshot(self) -> "NodeStats":
        return NodeStats(self.cost, self.busy_us, self.entries, Counter(self.sent), Counter(self.received))


@dataclass
class SimulationResult:
    config: ExperimentConfig
    variant: Variant
    seed: int
    repeat: int
    trace: TraceStore
    links: dict[tuple[int, int], LinkCounter]
    node_stats: list[NodeStats]
    warmup_stats: list[NodeStats]
    final_states: list[Optional[NodeState]]
    clients: ClientPool
    end_time: int
    events_processed: int

    def current_leader(self) -> Optional[int]:
        best = None
        for state in self.final_states:
            if state is not None and state.role is Role.LEADER:
                if best is None or state.current_term > self.final_states[best].current_term:
                    best = state.id
        return best


class _Sampler:
    """Batched draws from the network generator; consumption order fixes the values."""

    def __init__(self, rng: np.random.Generator, latency: LatencyConfig):
        self.rng = rng
        self.latency = latency
        self._lat = np.empty(0)
        self._lat_pos = 0
        self._coin = np.empty(0)
        self._coin_pos = 0

    def delay(self) -> int:
        lat = self.latency
        if lat.min_us == lat.max_us:
            return int(lat.min_us)
        if self._lat_pos >= len(self._lat):
            self._lat = self.rng.triangular(lat.min_us, lat.mode_us, lat.max_us, _BATCH)
            self._lat_pos = 0
        value = self._lat[self._lat_pos]
        self._lat_pos += 1
        return int(round(value))

    def coin(self) -> float:
        if self._coin_pos >= len(self._coin):
            self._coin = self.rng.random(_BATCH)
            self._coin_pos = 0
        value = self._coin[self._coin_pos]
        self._coin_pos += 1
        return float(value)


class Simulator:
    """One run: a cluster, a workload and a fault schedule over virtual time."""

    def __init__(self, config: ExperimentConfig, variant: Variant, seed: int, repeat: int = 0,
                 topology: Optional[Topology] = None):
        self.config = config
        self.variant = Variant.parse(variant)
        self.seed = seed
        self.repeat = repeat
        self.n = config.topology.n
        self.settings: RaftSettings = resolve_settings(config, self.variant)
        self.base_topology = topology or Topology.full(self.n, config.topology.latency, config.topology.loss)
        self.topology = self.base_topology.copy()
        self.sampler = _Sampler(np.random.default_rng([seed, repeat, 0]), self.topology.latency)
        self.trace = create_trace_store(self.n, self.variant.value, seed, repeat,
                                        messages=config.trace.messages)
        self.now = 0
        self._heap: list[SimEvent] = []
        self._seq = 0
        self.events_processed = 0

        cost = config.cost
        self._recv_w = dict(cost.receive_weight)
        self._send_w = dict(cost.send_weight)
        self._entry_w = cost.entry_weight
        self._wire_w = cost.entry_wire_weight
        self._scan_w = cost.scan_weight
        self._subsumed_w = cost.subsumed_weight
        self._unit_us = cost.cost_unit_us

        self.nodes: list[Optional[RaftNode]] = []
        self.images: list[Optional[DurableImage]] = [None] * self.n
        self.incarnation = [0] * self.n
        self.busy_until = [0] * self.n
        self.inbox: list[deque] = [deque() for _ in range(self.n)]
        self.wake_pending = [False] * self.n
        self.timer_token = [0] * self.n
        self.timer_at: list[Optional[int]] = [None] * self.n
        self.stats = [NodeStats() for _ in range(self.n)]
        self.warmup_stats: list[NodeStats] = [NodeStats() for _ in range(self.n)]
        self.links: dict[tuple[int, int], LinkCounter] = {}
        self._crashed_leaders: list[int] = []
        self._load_started = False

        for node_id in range(self.n):
            self.nodes.append(self._make_node(node_id, None))

        faults = list(config.faults) + generate_fault_schedule(config, seed, repeat)
        for action in sorted(faults, key=lambda a: a.time_us):
            self.schedule(action.time_us, "fault", action)
        self.schedule(config.warmup_us, "mark", None)

        timeout = election_timeout_us(config)
        self.clients = ClientPool(config.workload, self.n, seed=[seed, repeat, 3],
                                  timeout_us=client_timeout_us(config),
                                  backoff_us=max(1, timeout // 2),
                                  default_start_us=3 * timeout)

    # ------------------------------------------------------------------
    # plumbing
    # ------------------------------------------------------------------

    def clock(self) -> int:
        return self.now

    def schedule(self, time: int, kind: str, payload: Any) -> None:
        heapq.heappush(self._heap, SimEvent(int(time), self._seq, kind, payload))
        self._seq += 1

    def _make_node(self, node_id: int, image: Optional[DurableImage]) -> RaftNode:
        seed = [self.seed, self.repeat, self.incarnation[node_id]]
        recorder = self.trace.recorder_for(node_id, self.clock)
        if image is None:
            node = RaftNode(node_id, self.n, self.settings, seed, recorder=recorder)
            node.start(self.now)
        else:
            node = RaftNode.recover(image, self.n, node_id, self.settings, seed, self.now,
                                    recorder=recorder)
        self._arm_timer(node_id, node)
        return node

    def _link(self, src: int, dst: int) -> LinkCounter:
        counter = self.links.get((src, dst))
        if counter is None:
            counter = self.links[(src, dst)] = LinkCounter()
        return counter

    def _arm_timer(self, node_id: int, node: RaftNode) -> None:
        wake = node.next_wakeup()
        if self.timer_at[node_id] == wake:
            return
        self.timer_token[node_id] += 1
        self.timer_at[node_id] = wake
        self.schedule(max(wake, self.now), "timer", (node_id, self.timer_token[node_id]))

    # ------------------------------------------------------------------
    # network
    # ------------------------------------------------------------------

    def send(self, src: int, dst: int, msg: Message, now: int) -> None:
        """Send one protocol message; every attempt is recorded with its outcome, drops never raise."""
        counter = self._link(src, dst)
        counter.sent += 1
        self.stats[src].sent[msg.kind] += 1
        outcome = "sent"
        if not self.topology.reachable[src, dst]:
            outcome = "unreachable"
        else:
            p = self.topology.loss[src, dst]
            if p > 0.0 and self.sampler.coin() < p:
                outcome = "loss"
        record = {"dst": dst, "type": msg.kind, "outcome": outcome}
        if self.trace.messages:
            record["msg"] = summarize_message(msg)
        self.trace.append("send", now, src, record)
        if outcome != "sent":
            counter.dropped += 1
            return
        self.schedule(now + self.sampler.delay(), "deliver", (src, dst, msg))

    def client_send(self, node_id: int, request: ClientRequest, now: int) -> None:
        self.schedule(now + self.sampler.delay(), "client_arrival", (node_id, request))

    # ------------------------------------------------------------------
    # node processing
    # ------------------------------------------------------------------

    def _enqueue(self, node_id: int, kind: str, payload: Any) -> None:
        if self.nodes[node_id] is None:
            if kind == "deliver":
                self._link(payload[0], node_id).dropped += 1
                self.trace.append("drop", self.now, payload[0], {"dst": node_id, "reason": "crashed"})
            return
        if kind == "deliver":
            self._link(payload[0], node_id).delivered += 1
        if self.now < self.busy_until[node_id] or self.inbox[node_id]:
            self.inbox[node_id].append((kind, payload))
            if not self.wake_pending[node_id]:
                self.wake_pending[node_id] = True
                self.schedule(self.busy_until[node_id], "node_free", node_id)
            return
        self._process(node_id, kind, payload)

    def _drain(self, node_id: int) -> None:
        self.wake_pending[node_id] = False
        if self.nodes[node_id] is None or not self.inbox[node_id]:
            return
        kind, payload = self.inbox[node_id].popleft()
        self._process(node_id, kind, payload)
        if self.inbox[node_id] and not self.wake_pending[node_id]:
            self.wake_pending[node_id] = True
            self.schedule(self.busy_until[node_id], "node_free", node_id)

    def _message_cost(self, msg: Message, weights: dict[str, float]) -> float:
        """Fixed per-kind handling plus carried entries and commit bitmap bits."""
        units = weights.get(msg.kind, 1.0)
        entries = getattr(msg, "entries", None)
        if entries:
            units += len(entries) * self._wire_w
        bitmap = getattr(msg, "bitmap", None)
        if bitmap is not None:
            units += len(bitmap) * self._scan_w
        return units

    def _process(self, node_id: int, kind: str, payload: Any) -> None:
        node = self.nodes[node_id]
        stats = self.stats[node_id]
        units = 0.0
        try:
            if kind == "deliver":
                src, _, msg = payload
                stats.received[msg.kind] += 1
                if self.trace.messages:
                    self.trace.append("deliver", self.now, node_id, {"src": src, "msg": summarize_message(msg)})
                node.on_message(src, msg, self.now)
                units += self._subsumed_w if node.subsumed else self._message_cost(msg, self._recv_w)
            elif kind == "client_arrival":
                stats.received["client_request"] += 1
                units += self._recv_w.get("client_request", 1.0)
                node.on_client_request(payload, self.now)
            elif kind == "timer":
                node.tick(self.now)
        except ApplierError as exc:
            logger.warning("%s", exc)
            self.trace.append("fault", self.now, node_id, {"action": "crash", "reason": "applier"})
            self.crash(node_id)
            return

        entries = node.entries_appended
        node.entries_appended = 0
        units += entries * self._entry_w + node.scanned * self._scan_w
        node.scanned = 0
        stats.entries += entries
        outbox, node.outbox = node.outbox, []
        replies, node.client_outbox = node.client_outbox, []
        for _, msg in outbox:
            units += self._message_cost(msg, self._send_w)
        units += len(replies) * self._send_w.get("client_reply", 1.0)

        busy = int(round(units * self._unit_us))
        stats.cost += units
        stats.busy_us += busy
        depart = self.now + busy
        self.busy_until[node_id] = depart
        for dest, msg in outbox:
            self.send(node_id, dest, msg, depart)
        for reply in replies:
            stats.sent["client_reply"] += 1
            self.schedule(depart + self.sampler.delay(), "client_reply", reply)
        self._arm_timer(node_id, node)

    # ------------------------------------------------------------------
    # faults
    # ------------------------------------------------------------------

    def current_leader(self) -> Optional[int]:
        best = None
        best_term = -1
        for node in self.nodes:
            if node is not None and node.state.role is Role.LEADER and node.state.current_term > best_term:
                best, best_term = node.state.id, node.state.current_term
        return best

    def crash(self, node_id: int) -> bool:
        """Discard volatile state and pending timers; a crashed node stays silent."""
        node = self.nodes[node_id]
        if node is None:
            return False
        self.images[node_id] = node.durable_image()
        self.nodes[node_id] = None
        self.inbox[node_id].clear()
        self.busy_until[node_id] = self.now
        self.timer_token[node_id] += 1
        self.timer_at[node_id] = None
        self.trace.append("crash", self.now, node_id, {"term": node.state.current_term})
        logger.debug("t=%d crash node %d", self.now, node_id)
        return True

    def recover(self, node_id: int) -> bool:
        """Restart from the durable image as a follower; no-op when the node is up."""
        if self.nodes[node_id] is not None or self.images[node_id] is None:
            return False
        self.incarnation[node_id] += 1
        self.trace.append("recover", self.now, node_id, {"incarnation": self.incarnation[node_id]})
        self.nodes[node_id] = self._make_node(node_id, self.images[node_id])
        logger.debug("t=%d recover node %d", self.now, node_id)
        return True

    def _resolve(self, ref) -> Optional[int]:
        if ref == "leader":
            return self.current_leader()
        return ref

    def _skip(self, action: FaultAction, reason: str) -> None:
        self.trace.append("fault_skipped", self.now, None, {"action": action.action, "reason": reason})

    def apply_fault(self, action: FaultAction) -> None:
        kind = action.action
        if kind == "crash":
            node_id = self._resolve(action.node)
            if node_id is None:
                self._skip(action, "no leader")
                return
            self.trace.append("fault", self.now, node_id, {"action": "crash"})
            if self.crash(node_id) and action.node == "leader":
                self._crashed_leaders.append(node_id)
        elif kind == "recover":
            if action.node == "leader":
                if not self._crashed_leaders:
                    self._skip(action, "no crashed leader")
                    return
                node_id = self._crashed_leaders.pop()
            else:
                node_id = action.node
            self.trace.append("fault", self.now, node_id, {"action": "recover"})
            self.recover(node_id)
        elif kind == "partition":
            group_of = {}
            for g, group in enumerate(action.groups):
                for ref in group:
                    node_id = self._resolve(ref)
                    if node_id is not None:
                        group_of[node_id] = g
            rest = len(action.groups)
            members = [group_of.get(i, rest) for i in range(self.n)]
            for a in range(self.n):
                for b in range(self.n):
                    if members[a] != members[b]:
                        self.topology.reachable[a, b] = False
            self.trace.append("fault", self.now, None, {"action": "partition", "groups": members})
        elif kind == "heal":
            self.topology.reachable = self.base_topology.reachable.copy()
            self.trace.append("fault", self.now, None, {"action": "heal"})
        elif kind == "set_loss":
            if action.link is None:
                self.topology.loss[:, :] = action.p
                np.fill_diagonal(self.topology.loss, 0.0)
            else:
                src, dst = (self._resolve(x) for x in action.link)
                if src is None or dst is None:
                    self._skip(action, "no leader")
                    return
                self.topology.loss[src, dst] = action.p
            if action.link is None or self.trace.messages:
                self.trace.append("fault", self.now, None, {"action": "set_loss", "link": action.link, "p": action.p})
        elif kind in ("cut_links", "restore_links"):
            src = self._resolve(action.node)
            if src is None:
                self._skip(action, "no leader")
                return
            dsts = self._link_targets(src, action)
            for dst in dsts:
                if kind == "cut_links":
                    self.topology.reachable[src, dst] = False
                else:
                    self.topology.reachable[src, dst] = self.base_topology.reachable[src, dst]
            self.trace.append("fault", self.now, src, {"action": kind, "dsts": dsts})
        logger.debug("t=%d fault %s", self.now, kind)

    def _link_targets(self, src: int, action: FaultAction) -> list[int]:
        if action.dsts is not None:
            return [self._resolve(d) for d in action.dsts if self._resolve(d) not in (None, src)]
        peers = [i for i in range(self.n) if i != src]
        keep = action.keep if action.keep is not None else math.ceil(self.n / 4)
        return peers[keep:]

    # ------------------------------------------------------------------
    # main loop
    # ------------------------------------------------------------------

    def run(self, until: Optional[int] = None) -> SimulationResult:
        """Process events in (time, seq) order up to `until` (default: configured duration)."""
        until = self.config.duration_us if until is None else until
        if not self._load_started:
            generate_load(self.clients, self)
            self._load_started = True
        heap = self._heap
        while heap:
            if heap[0].time > until:
                break
            event = heapq.heappop(heap)
            self.now = event.time
            self.events_processed += 1
            kind = event.kind
            if kind == "deliver":
                self._enqueue(event.payload[1], kind, event.payload)
            elif kind == "timer":
                node_id, token = event.payload
                if self.nodes[node_id] is not None and token == self.timer_token[node_id]:
                    self.timer_at[node_id] = None
                    self._enqueue(node_id, kind, None)
            elif kind == "node_free":
                self._drain(event.payload)
            elif kind == "client_arrival":
                node_id, request = event.payload
                self._enqueue(node_id, kind, request)
            elif kind == "client_reply":
                self.clients.on_reply(self, event.payload)
            elif kind == "client_timer":
                self.clients.on_timer(self, event.payload)
            elif kind == "fault":
                self.apply_fault(event.payload)
            elif kind == "mark":
                self.warmup_stats = [s.snapshot() for s in self.stats]
        else:
            if self.clients.outstanding() > 0:
                raise SimulationStalled(
                    f"event queue empty at t={self.now} with {self.clients.outstanding()} requests outstanding")
        self.now = max(self.now, until)
        return SimulationResult(
            config=self.config, variant=self.variant, seed=self.seed, repeat=self.repeat,
            trace=self.trace, links=self.links, node_stats=self.stats,
            warmup_stats=self.warmup_stats,
            final_states=[node.state if node is not None else None for node in self.nodes],
            clients=self.clients, end_time=self.now, events_processed=self.events_processed,
        )


def run_simulation(config: ExperimentConfig, variant, seed: int, repeat: int = 0,
                   topology: Optional[Topology] = None, until: Optional[int] = None) -> SimulationResult:
    """Build and run one simulation."""
    sim = Simulator(config, Variant.parse(variant), seed, repeat, topology=topology)
    return sim.run(until)
