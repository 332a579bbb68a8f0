# EpiRaft - Workload and Metrics
# SPDX-License-Identifier: AGPL-3.0

from __future__ import annotations
"""
Closed-loop clients driven inside the simulator, and the metrics pipeline:
latency, throughput, per-node cost (CPU proxy), commit lag, CSV export.
"""

import csv
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Optional, Sequence

import numpy as np

from .protocol_types import ClientReply, ClientRequest, ReplyStatus

if TYPE_CHECKING:
    from .config import WorkloadConfig
    from .net_sim import SimulationResult, Simulator

logger = logging.getLogger(__name__)

METRICS_HEADER = "# epiraft-metrics v1"
MAX_TIMEOUT_DOUBLINGS = 3


@dataclass
class RequestRecord:
    """One client request across all of its attempts."""
    client_id: int
    request_id: int
    issued_at: int
    command: bytes = field(repr=False, default=b"")
    target: int = 0
    attempts: int = 0
    token: int = 0
    completed_at: Optional[int] = None
    index: Optional[int] = None
    failed: bool = False

    @property
    def latency_us(self) -> Optional[int]:
        if self.completed_at is None:
            return None
        return self.completed_at - self.issued_at


class ClientPool:
    """
    m closed-loop clients, each with at most one outstanding request.

    A client starts at node 0, follows redirects, moves on to the next node
    after a timeout or an `unavailable` answer, and gives up on a request
    after max_retries retries. Each retry waits twice as long as the one
    before, capped at 2**MAX_TIMEOUT_DOUBLINGS times the base timeout.
    """

    def __init__(self, workload: "WorkloadConfig", n: int, seed: Sequence[int],
                 timeout_us: int, backoff_us: int, default_start_us: int = 0):
        self.workload = workload
        self.n = n
        self.timeout_us = timeout_us
        self.backoff_us = backoff_us
        self.start_us = workload.start_us if workload.start_us is not None else default_start_us
        self.pacing_us = int(round(1_000_000 / workload.rate)) if workload.rate else 0
        self.rng = np.random.default_rng(list(seed))
        self.records: list[RequestRecord] = []
        self.active: dict[int, RequestRecord] = {}
        self.known_leader = [0] * workload.clients
        self._next_id = [0] * workload.clients

    def outstanding(self) -> int:
        return len(self.active)

    def attempt_timeout_us(self, attempts: int) -> int:
        """Timeout for the given attempt number; doubles per retry up to 2**MAX_TIMEOUT_DOUBLINGS."""
        return self.timeout_us << min(max(attempts - 1, 0), MAX_TIMEOUT_DOUBLINGS)

    def _issue(self, sim: "Simulator", client: int) -> None:
        rid = self._next_id[client]
        self._next_id[client] += 1
        record = RequestRecord(client, rid, issued_at=sim.now,
                               command=self.rng.bytes(self.workload.command_size))
        self.records.append(record)
        self.active[client] = record
        self._transmit(sim, record)

    def _transmit(self, sim: "Simulator", record: RequestRecord) -> None:
        record.attempts += 1
        record.token += 1
        record.target = self.known_leader[record.client_id]
        sim.client_send(record.target, ClientRequest(record.client_id, record.request_id, record.command), sim.now)
        sim.schedule(sim.now + self.attempt_timeout_us(record.attempts), "client_timer",
                     ("timeout", record.client_id, record.request_id, record.token))

    def _retry(self, sim: "Simulator", record: RequestRecord, delay: int) -> None:
        if record.attempts > self.workload.max_retries:
            record.failed = True
            record.token += 1
            del self.active[record.client_id]
            self._schedule_next(sim, record)
            return
        if delay <= 0:
            self._transmit(sim, record)
            return
        record.token += 1
        sim.schedule(sim.now + delay, "client_timer",
                     ("retry", record.client_id, record.request_id, record.token))

    def _schedule_next(self, sim: "Simulator", record: RequestRecord) -> None:
        at = max(sim.now, record.issued_at + self.pacing_us)
        sim.schedule(at, "client_timer", ("next", record.client_id))

    def _current(self, client: int, request_id: int) -> Optional[RequestRecord]:
        record = self.active.get(client)
        if record is None or record.request_id != request_id:
            return None
        return record

    def on_reply(self, sim: "Simulator", reply: ClientReply) -> None:
        record = self._current(reply.client_id, reply.request_id)
        if record is None:
            return
        if reply.status is ReplyStatus.OK:
            record.completed_at = sim.now
            record.index = reply.index
            record.token += 1
            self.known_leader[record.client_id] = record.target
            del self.active[record.client_id]
            self._schedule_next(sim, record)
        elif reply.status is ReplyStatus.REDIRECT and reply.leader_hint is not None:
            self.known_leader[record.client_id] = reply.leader_hint
            self._retry(sim, record, 0)
        else:
            self.known_leader[record.client_id] = (record.target + 1) % self.n
            self._retry(sim, record, self.backoff_us)

    def on_timer(self, sim: "Simulator", payload: tuple) -> None:
        kind = payload[0]
        if kind == "next":
            self._issue(sim, payload[1])
            return
        _, client, request_id, token = payload
        record = self._current(client, request_id)
        if record is None or record.token != token:
            return
        if kind == "timeout":
            self.known_leader[client] = (record.target + 1) % self.n
            self._retry(sim, record, 0)
        elif kind == "retry":
            self._transmit(sim, record)


def generate_load(pool: ClientPool, sim: "Simulator") -> None:
    """Schedule each client's first request on the simulator."""
    for client in range(pool.workload.clients):
        sim.schedule(pool.start_us, "client_timer", ("next", client))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class NodeCost:
    node: int
    role: str
    cost: float
    busy_us: int
    sent: int
    received: int


@dataclass
class MetricsReport:
    """Metrics of one run (variant, seed, repeat) at one sweep point."""
    point: str
    variant: str
    seed: int
    repeat: int
    n: int
    clients: int
    window_s: float
    completed: int
    failed: int
    throughput: float
    mean_latency_ms: float
    p50_latency_ms: float
    p99_latency_ms: float
    leader_id: Optional[int]
    leader_cost: float
    follower_mean_cost: float
    committed: int
    leader_cost_per_commit: float
    elections_after_warmup: int
    follower_ahead: int
    median_follower_lag_ms: float
    trace_checksum: str = ""
    violations: int = 0
    node_costs: list[NodeCost] = field(default_factory=list)
    latency_samples_ms: list[float] = field(default_factory=list)
    commit_lag: dict[int, list[tuple[int, int, int]]] = field(default_factory=dict)

    SUMMARY_FIELDS = (
        "point", "variant", "seed", "repeat", "n", "clients", "window_s", "completed", "failed",
        "throughput", "mean_latency_ms", "p50_latency_ms", "p99_latency_ms", "leader_id",
        "leader_cost", "follower_mean_cost", "committed", "leader_cost_per_commit",
        "elections_after_warmup", "follower_ahead", "median_follower_lag_ms", "violations",
        "trace_checksum",
    )

    def summary_row(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in self.SUMMARY_FIELDS}

    def follower_lag_ms(self) -> list[float]:
        out = []
        for node, samples in sorted(self.commit_lag.items()):
            if node == self.leader_id:
                continue
            out.extend((commit - accept) / 1000 for _, accept, commit in samples)
        return out

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

def _percentile(samples: list[float], q: float) -> float:
    if not samples:
        return 0.0
    return float(np.percentile(np.asarray(samples), q))


def _elected_leader(result: "SimulationResult") -> Optional[int]:
    leader = result.current_leader()
    if leader is not None:
        return leader
    best = None
    for rec in result.trace.get_by_kind("role"):
        if rec["role"] == "leader":
            best = rec["node"]
    return best


def commit_lag_samples(result: "SimulationResult", since_us: int = 0) -> tuple[dict[int, list[tuple[int, int, int]]], int]:
    """
    Per node: (index, leader accept time, first local commit time) for every
    index accepted at or after since_us. The last accept of an index wins.

    Also returns how many follower samples committed no later than the
    accepting leader did.
    """
    accepts: dict[int, tuple[int, int]] = {}
    for rec in result.trace.get_by_kind("client_accept"):
        accepts[rec["index"]] = (rec["time"], rec["node"])
    wanted = sorted(i for i, (t, _) in accepts.items() if t >= since_us)
    if not wanted:
        return {}, 0

    commits: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for rec in result.trace.get_by_kind("commit"):
        commits[rec["node"]].append((rec["time"], rec["index"]))

    first_commit: dict[int, dict[int, int]] = {}
    for node, series in commits.items():
        seen: dict[int, int] = {}
        pos = 0
        for time, index in series:
            while pos < len(wanted) and wanted[pos] <= index:
                seen[wanted[pos]] = time
                pos += 1
        first_commit[node] = seen

    lag: dict[int, list[tuple[int, int, int]]] = {}
    ahead = 0
    for node, seen in sorted(first_commit.items()):
        samples = []
        for index in wanted:
            commit_time = seen.get(index)
            accept_time, leader = accepts[index]
            if commit_time is None or commit_time < accept_time:
                continue
            samples.append((index, accept_time, commit_time))
            if node != leader:
                leader_time = first_commit.get(leader, {}).get(index)
                if leader_time is None or commit_time <= leader_time:
                    ahead += 1
        lag[node] = samples
    return lag, ahead


def build_report(result: "SimulationResult", point: str = "", violations: int = 0) -> MetricsReport:
    """Aggregate one SimulationResult over its post-warmup window."""
    config = result.config
    warmup = config.warmup_us
    window_us = max(1, result.end_time - warmup)
    window_s = window_us / 1_000_000

    done = [r for r in result.clients.records
            if r.completed_at is not None and warmup <= r.completed_at <= result.end_time]
    failed = sum(1 for r in result.clients.records if r.failed)
    latencies = [r.latency_us / 1000 for r in done]

    leader = _elected_leader(result)
    costs = []
    for node, (total, before) in enumerate(zip(result.node_stats, result.warmup_stats)):
        costs.append(NodeCost(
            node=node,
            role="leader" if node == leader else "follower",
            cost=round(total.cost - before.cost, 6),
            busy_us=total.busy_us - before.busy_us,
            sent=sum(total.sent.values()) - sum(before.sent.values()),
            received=sum(total.received.values()) - sum(before.received.values()),
        ))
    leader_cost = costs[leader].cost if leader is not None else 0.0
    followers = [c.cost for c in costs if c.node != leader]
    follower_mean = float(np.mean(followers)) if followers else 0.0

    commit_before = 0
    commit_after = 0
    for rec in result.trace.get_by_kind("commit"):
        if rec["time"] <= warmup:
            commit_before = max(commit_before, rec["index"])
        commit_after = max(commit_after, rec["index"])
    committed = max(0, commit_after - commit_before)

    elections = {rec["term"] for rec in result.trace.get_by_kind("role")
                 if rec["role"] == "candidate" and rec["time"] >= warmup}

    lag, ahead = commit_lag_samples(result, since_us=warmup)
    report = MetricsReport(
        point=point, variant=result.variant.value, seed=result.seed, repeat=result.repeat,
        n=config.topology.n, clients=config.workload.clients, window_s=round(window_s, 6),
        completed=len(done), failed=failed,
        throughput=round(len(done) / window_s, 6),
        mean_latency_ms=round(float(np.mean(latencies)), 6) if latencies else 0.0,
        p50_latency_ms=round(_percentile(latencies, 50), 6),
        p99_latency_ms=round(_percentile(latencies, 99), 6),
        leader_id=leader, leader_cost=leader_cost,
        follower_mean_cost=round(follower_mean, 6), committed=committed,
        leader_cost_per_commit=round(leader_cost / committed, 6) if committed else 0.0,
        elections_after_warmup=len(elections), follower_ahead=ahead,
        median_follower_lag_ms=0.0,
        trace_checksum=result.trace.checksum(), violations=violations,
        node_costs=costs, latency_samples_ms=latencies, commit_lag=lag,
    )
    follower_lag = report.follower_lag_ms()
    report.median_follower_lag_ms = round(_percentile(follower_lag, 50), 6)
    return report


def compute_cdf(samples: Sequence[float]) -> list[tuple[float, float]]:
    """Empirical CDF as (value, cumulative fraction); [] for no samples."""
    if len(samples) == 0:
        return []
    values, counts = np.unique(np.asarray(samples, dtype=float), return_counts=True)
    fractions = np.cumsum(counts) / len(samples)
    return [(float(v), float(f)) for v, f in zip(values, fractions)]


def linear_fit_r2(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line through (xs, ys): (slope, intercept, R^2)."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    total = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(residual ** 2)) / total if total > 0 else 1.0
    return float(slope), float(intercept), r2


def quadratic_term(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Leading coefficient of the least-squares parabola through (xs, ys); > 0 means convex growth."""
    return float(np.polyfit(np.asarray(xs, dtype=float), np.asarray(ys, dtype=float), 2)[0])


def mean_node_cost(report: "MetricsReport") -> float:
    """Cost per node averaged over the whole cluster."""
    if not report.node_costs:
        return 0.0
    return float(np.mean([c.cost for c in report.node_costs]))


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def _fmt(value: Any) -> Any:
    if isinstance(value, float):
        return f"{value:.6f}".rstrip("0").rstrip(".") if value == value else "nan"
    if value is None:
        return ""
    return value


def _open_table(path: Path, header: Sequence[str]):
    f = open(path, "w", encoding="utf-8", newline="")
    f.write(METRICS_HEADER + "\n")
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(header)
    return f, writer


def _run_key(report: MetricsReport) -> list[Any]:
    return [report.point, report.variant, report.seed, report.repeat]


def mean_reports(reports: Sequence[MetricsReport]) -> list[dict[str, Any]]:
    """Mean of the numeric summary columns per (point, variant)."""
    groups: dict[tuple[str, str], list[MetricsReport]] = defaultdict(list)
    for report in reports:
        groups[(report.point, report.variant)].append(report)
    numeric = ("throughput", "mean_latency_ms", "p99_latency_ms", "leader_cost", "follower_mean_cost",
               "leader_cost_per_commit", "median_follower_lag_ms", "completed", "failed")
    rows = []
    for (point, variant), members in groups.items():
        row: dict[str, Any] = {"point": point, "variant": variant, "runs": len(members)}
        for name in numeric:
            row[name] = round(float(np.mean([getattr(r, name) for r in members])), 6)
        rows.append(row)
    return rows


def export(reports: Sequence[MetricsReport], out_dir: str | Path) -> list[Path]:
    """
    Write the CSV tables for a set of runs.

    Files: summary.csv, node_costs.csv, latency_cdf.csv, commit_lag_cdf.csv and,
    when some (point, variant) has more than one run, summary_mean.csv.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    path = out / "summary.csv"
    f, writer = _open_table(path, MetricsReport.SUMMARY_FIELDS)
    with f:
        for report in reports:
            writer.writerow([_fmt(v) for v in report.summary_row().values()])
    written.append(path)

    path = out / "node_costs.csv"
    f, writer = _open_table(path, ["point", "variant", "seed", "repeat", "node", "role",
                                   "cost", "busy_us", "sent", "received"])
    with f:
        for report in reports:
            for c in report.node_costs:
                writer.writerow(_run_key(report) + [c.node, c.role, _fmt(c.cost), c.busy_us, c.sent, c.received])
    written.append(path)

    for name, column, series in (
        ("latency_cdf.csv", "latency_ms", lambda r: r.latency_samples_ms),
        ("commit_lag_cdf.csv", "follower_lag_ms", lambda r: r.follower_lag_ms()),
    ):
        path = out / name
        f, writer = _open_table(path, ["point", "variant", "seed", "repeat", column, "fraction"])
        with f:
            for report in reports:
                cdf = compute_cdf(series(report))
                if not cdf:
                    f.write(f"# empty: {report.variant} seed={report.seed} repeat={report.repeat} {report.point}\n")
                for value, fraction in cdf:
                    writer.writerow(_run_key(report) + [_fmt(value), _fmt(fraction)])
        written.append(path)

    means = mean_reports(reports)
    if any(row["runs"] > 1 for row in means):
        path = out / "summary_mean.csv"
        f, writer = _open_table(path, list(means[0].keys()))
        with f:
            for row in means:
                writer.writerow([_fmt(v) for v in row.values()])
        written.append(path)

    logger.info("wrote %d metrics files to %s", len(written), out)
    return written
