# EpiRaft - Safety Checker
# SPDX-License-Identifier: AGPL-3.0

from __future__ import annotations
"""
Offline verification of a run's trace, plus an equivalence oracle for the
commit agreement structures.

check_trace replays the trace record by record, rebuilding every node's log
as prefix chain digests, and reports:

  election-safety       two leaders in one term
  log-matching          equal (index, term) with different prefixes
  state-machine-safety  different entries applied at one index
  commit-safety         commitIndex / maxCommit reaching k without a majority holding k
  monotonicity          term, commitIndex or maxCommit moving backwards
  commit-structure      nextCommit <= maxCommit, or a malformed bitmap
  leader-completeness   a new leader missing committed entries
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from . import commit_agreement as ca
from .protocol_types import LogEntry, ReplicatedLog
from .trace_store import TraceStore, header_size, validate_record

logger = logging.getLogger(__name__)

VIOLATION_CODES = (
    "election-safety", "log-matching", "state-machine-safety", "commit-safety",
    "monotonicity", "commit-structure", "leader-completeness",
)


@dataclass(frozen=True)
class Violation:
    code: str
    time: int
    node: Optional[int]
    detail: str

    def to_text(self) -> str:
        node = "-" if self.node is None else self.node
        return f"VIOLATION code={self.code} time={self.time} node={node} detail={self.detail}"


@dataclass
class Verdict:
    passed: bool
    violations: list[Violation] = field(default_factory=list)
    records: int = 0

    def codes(self) -> set[str]:
        return {v.code for v in self.violations}

    def to_text(self) -> str:
        if self.passed:
            return "PASS"
        return "\n".join(v.to_text() for v in self.violations)


def _chain(prev: bytes, term: int, digest: str) -> bytes:
    return hashlib.blake2b(prev + f"|{term}:{digest}".encode("ascii"), digest_size=16).digest()


class _NodeModel:
    """What the checker knows about one node."""

    def __init__(self):
        self.terms: list[int] = [0]
        self.chains: list[bytes] = [b""]
        self.term = 0
        self.commit = 0
        self.max_commit = 0
        self.applied = 0

    @property
    def last_index(self) -> int:
        return len(self.terms) - 1

    def restart(self) -> None:
        self.commit = 0
        self.max_commit = 0
        self.applied = 0


class TraceChecker:
    """Incremental replay; feed records with observe(), then verdict()."""

    def __init__(self, n: int, max_violations: int = 200):
        self.n = n
        self.majority = n // 2 + 1
        self.max_violations = max_violations
        self.nodes = [_NodeModel() for _ in range(n)]
        self.violations: list[Violation] = []
        self.leaders: dict[int, int] = {}
        self.chain_at: dict[tuple[int, int], bytes] = {}
        self.holders: dict[tuple[int, int], set[int]] = {}
        self.majority_indices: set[int] = set()
        self.majority_pairs: set[tuple[int, int]] = set()
        self.applied_chain: dict[int, bytes] = {}
        self.committed_chain: dict[int, bytes] = {}
        self.max_committed = 0
        self.max_mc = 0
        self.records = 0

    def _flag(self, code: str, rec: dict[str, Any], detail: str) -> None:
        if len(self.violations) < self.max_violations:
            self.violations.append(Violation(code, rec.get("time", 0), rec.get("node"), detail))

    def observe(self, rec: dict[str, Any]) -> None:
        self.records += 1
        handler = getattr(self, f"_on_{rec['kind']}", None)
        if handler is not None:
            handler(rec)

    def verdict(self) -> Verdict:
        return Verdict(passed=not self.violations, violations=list(self.violations), records=self.records)

    # -- record handlers -------------------------------------------------

    def _on_term(self, rec):
        model = self.nodes[rec["node"]]
        if rec["term"] <= model.term:
            self._flag("monotonicity", rec, f"term {model.term} -> {rec['term']}")
        model.term = max(model.term, rec["term"])

    def _on_recover(self, rec):
        self.nodes[rec["node"]].restart()

    def _on_role(self, rec):
        if rec["role"] != "leader":
            return
        node, term = rec["node"], rec["term"]
        other = self.leaders.get(term)
        if other is not None and other != node:
            self._flag("election-safety", rec, f"nodes {other} and {node} both lead term {term}")
        self.leaders.setdefault(term, node)

        model = self.nodes[node]
        k = self.max_committed
        if k > 0 and (model.last_index < k or model.chains[k] != self.committed_chain[k]):
            self._flag("leader-completeness", rec, f"leader of term {term} lacks committed index {k}")
        if self.max_mc > model.last_index:
            self._flag("leader-completeness", rec,
                       f"leader of term {term} ends at {model.last_index} below maxCommit {self.max_mc}")

    def _on_log(self, rec):
        node = rec["node"]
        model = self.nodes[node]
        cut = rec.get("truncate")
        if cut is not None:
            for k in range(cut, model.last_index + 1):
                held = self.holders.get((k, model.terms[k]))
                if held is not None:
                    held.discard(node)
            del model.terms[cut:]
            del model.chains[cut:]
        start = rec["start"]
        if start != model.last_index + 1:
            self._flag("log-matching", rec, f"append at {start} after last index {model.last_index}")
            return
        for term, digest in rec["entries"]:
            k = model.last_index + 1
            if term < model.terms[-1]:
                self._flag("log-matching", rec, f"term {term} after {model.terms[-1]} at index {k}")
            chain = _chain(model.chains[-1], term, digest)
            model.terms.append(term)
            model.chains.append(chain)
            seen = self.chain_at.setdefault((k, term), chain)
            if seen != chain:
                self._flag("log-matching", rec, f"index {k} term {term} with a different prefix")
            held = self.holders.setdefault((k, term), set())
            held.add(node)
            if len(held) >= self.majority:
                self.majority_indices.add(k)
                self.majority_pairs.add((k, term))

    def _on_commit(self, rec):
        node, k = rec["node"], rec["index"]
        model = self.nodes[node]
        if k < model.commit:
            self._flag("monotonicity", rec, f"commitIndex {model.commit} -> {k}")
        model.commit = max(model.commit, k)
        if k > model.last_index:
            self._flag("commit-safety", rec, f"commitIndex {k} beyond last index {model.last_index}")
            return
        term = model.terms[k]
        # held by a majority at some point up to now
        if (k, term) not in self.majority_pairs:
            self._flag("commit-safety", rec, f"index {k} term {term} committed without a majority")
        chain = model.chains[k]
        known = self.committed_chain.setdefault(k, chain)
        if known != chain:
            self._flag("state-machine-safety", rec, f"index {k} committed with different entries")
        if k > self.max_committed:
            self.max_committed = k

    def _on_commit_state(self, rec):
        node = rec["node"]
        model = self.nodes[node]
        mc, nc, bits = rec["max_commit"], rec["next_commit"], rec["bitmap"]
        if nc <= mc:
            self._flag("commit-structure", rec, f"nextCommit {nc} <= maxCommit {mc}")
        if len(bits) != self.n or any(ch not in "01" for ch in bits):
            self._flag("commit-structure", rec, f"bad bitmap {bits!r}")
        if mc < model.max_commit:
            self._flag("monotonicity", rec, f"maxCommit {model.max_commit} -> {mc}")
        model.max_commit = max(model.max_commit, mc)
        if mc > 0:
            # A current-term entry at mc must itself be majority-held; otherwise any term at mc counts
            if mc <= model.last_index and model.terms[mc] == model.term:
                held = (mc, model.terms[mc]) in self.majority_pairs
            else:
                held = mc in self.majority_indices
            if not held:
                self._flag("commit-safety", rec, f"maxCommit {mc} without a majority holding it")
        self.max_mc = max(self.max_mc, mc)

    def _on_apply(self, rec):
        node = rec["node"]
        model = self.nodes[node]
        lo, hi = rec["lo"], rec["hi"]
        if lo != model.applied + 1 or hi > model.commit:
            self._flag("state-machine-safety", rec, f"apply {lo}..{hi} after {model.applied} with commit {model.commit}")
        for k in range(lo, min(hi, model.last_index) + 1):
            chain = model.chains[k]
            known = self.applied_chain.setdefault(k, chain)
            if known != chain:
                self._flag("state-machine-safety", rec, f"different entry applied at index {k}")
                break
        model.applied = max(model.applied, hi)


def check_trace(trace: TraceStore) -> Verdict:
    """
    Evaluate every safety property over a complete trace.

    Records not yet validated are checked against their kind's schema first;
    a malformed record raises TraceParseError with its line in the exported file.
    """
    n = header_size(trace.header)
    checker = TraceChecker(n)
    for position, rec in enumerate(trace.read_all()):
        if not trace.validated:
            validate_record(rec, n, position + 2)
        checker.observe(rec)
    verdict = checker.verdict()
    if not verdict.passed:
        logger.info("trace check failed with %d violations", len(verdict.violations))
    return verdict


# ---------------------------------------------------------------------------
# Commit agreement oracle
# ---------------------------------------------------------------------------

class ReferenceCommitProcess:
    """
    One process's bitmap / max_commit / next_commit kept in plain lists,
    sharing no code with commit_agreement. Terms only; commands do not matter here.
    """

    def __init__(self, n: int, pid: int):
        self.n = n
        self.pid = pid
        self.bitmap = [0 for _ in range(n)]
        self.max_commit = 0
        self.next_commit = 1
        self.commit_index = 0
        self.log: list[int] = []
        self.current_term = 1

    def majority_size(self) -> int:
        return -(-(self.n + 1) // 2)

    def last_index(self) -> int:
        return len(self.log)

    def last_term(self) -> int:
        return self.log[-1] if self.log else 0

    def update(self) -> bool:
        count = 0
        for b in self.bitmap:
            if b == 1:
                count = count + 1
        if count >= self.majority_size():
            self.max_commit = self.next_commit
            self.bitmap = [0 for _ in range(self.n)]
            if self.next_commit >= self.last_index() or self.last_term() != self.current_term:
                self.next_commit = self.next_commit + 1
            else:
                self.next_commit = self.last_index()
                self.bitmap[self.pid] = 1
            return True
        return False

    def merge(self, bitmap: Sequence[int], max_commit: int, next_commit: int) -> None:
        if max_commit > self.max_commit:
            self.max_commit = max_commit
        if self.next_commit <= next_commit:
            self.bitmap = [self.bitmap[i] | bitmap[i] for i in range(self.n)]
        if self.next_commit <= self.max_commit:
            self.bitmap = list(bitmap)
            self.next_commit = next_commit

    def set_own_bit(self) -> None:
        holds = 1 <= self.next_commit <= self.last_index()
        if holds and self.last_term() == self.current_term:
            self.bitmap[self.pid] = 1

    def advance_commit_index(self) -> None:
        if self.last_index() > 0 and self.last_term() == self.current_term:
            bound = min(self.last_index(), self.max_commit)
            if bound > self.commit_index:
                self.commit_index = bound

    def settle(self) -> None:
        self.set_own_bit()
        while self.update():
            pass
        self.advance_commit_index()

    def new_term(self) -> None:
        self.current_term = self.current_term + 1
        self.bitmap = [0 for _ in range(self.n)]
        self.next_commit = self.max_commit + 1

    def state(self) -> tuple[str, int, int, int]:
        return ("".join(str(b) for b in self.bitmap), self.max_commit, self.next_commit, self.commit_index)


@dataclass(frozen=True)
class ScriptEvent:
    """leader_append | replicate(dst, upto) | absorb(dst, src) | new_term"""
    op: str
    dst: int = 0
    src: int = 0
    upto: int = 0


@dataclass
class Divergence:
    event_index: int
    event: ScriptEvent
    node: int
    engine: tuple
    reference: tuple

    def to_text(self) -> str:
        return (f"event {self.event_index} {self.event.op} node {self.node}: "
                f"engine={self.engine} reference={self.reference}")


@dataclass
class OracleReport:
    events: int
    divergences: list[Divergence] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.divergences


def generate_script(rng: np.random.Generator, n: int, length: int) -> list[ScriptEvent]:
    """
    Random script where node 0 leads every term. Followers only ever grow a
    prefix of the leader's log, so every log stays a prefix of node 0's.
    """
    lengths = [0] * n
    script = []
    for _ in range(length):
        roll = float(rng.random())
        if roll < 0.25:
            script.append(ScriptEvent("leader_append"))
            lengths[0] += 1
        elif roll < 0.5 and n > 1:
            dst = int(rng.integers(1, n))
            if lengths[dst] < lengths[0]:
                upto = int(rng.integers(lengths[dst] + 1, lengths[0] + 1))
                script.append(ScriptEvent("replicate", dst=dst, upto=upto))
                lengths[dst] = upto
        elif roll < 0.95:
            dst = int(rng.integers(0, n))
            src = int(rng.integers(0, n))
            if src != dst:
                script.append(ScriptEvent("absorb", dst=dst, src=src))
        else:
            script.append(ScriptEvent("new_term"))
    return script


def brute_force_commit_oracle(n: int, script: Sequence[ScriptEvent]) -> list[list[tuple]]:
    """Expected (bitmap, maxCommit, nextCommit, commitIndex) of every node after every event."""
    if not 2 <= n <= 5:
        raise ValueError("the reference oracle runs on 2..5 processes")
    procs = [ReferenceCommitProcess(n, pid) for pid in range(n)]
    leader_log: list[int] = []
    out = []
    for ev in script:
        if ev.op == "leader_append":
            leader_log.append(procs[0].current_term)
            procs[0].log = list(leader_log)
            procs[0].settle()
        elif ev.op == "replicate":
            procs[ev.dst].log = list(leader_log[:ev.upto])
            procs[ev.dst].settle()
        elif ev.op == "absorb":
            src = procs[ev.src]
            procs[ev.dst].merge(list(src.bitmap), src.max_commit, src.next_commit)
            procs[ev.dst].settle()
        elif ev.op == "new_term":
            for p in procs:
                p.new_term()
        out.append([p.state() for p in procs])
    return out


@dataclass(frozen=True)
class _Fields:
    bitmap: tuple
    max_commit: int
    next_commit: int
    has_commit_fields: bool = True


def _engine_states(n: int, script: Sequence[ScriptEvent]) -> list[list[tuple]]:
    states = [ca.CommitState.fresh(n, pid) for pid in range(n)]
    logs = [ReplicatedLog() for _ in range(n)]
    commit = [0] * n
    term = 1
    leader_entries: list[LogEntry] = []
    out = []

    def absorb(pid: int, msg) -> None:
        _, commit[pid] = ca.absorb_fields(states[pid], msg, logs[pid], term, commit[pid])

    for ev in script:
        if ev.op == "leader_append":
            entry = LogEntry(term, b"")
            leader_entries.append(entry)
            logs[0].append(entry)
            absorb(0, None)
        elif ev.op == "replicate":
            current = logs[ev.dst].last_index
            logs[ev.dst].extend(leader_entries[current:ev.upto])
            absorb(ev.dst, None)
        elif ev.op == "absorb":
            absorb(ev.dst, _Fields(*ca.attach_fields(states[ev.src])))
        elif ev.op == "new_term":
            term += 1
            for cs in states:
                ca.reset_on_term_change(cs)
        out.append([(cs.bitstring(), cs.max_commit, cs.next_commit, commit[pid])
                    for pid, cs in enumerate(states)])
    return out


def run_oracle(script: Sequence[ScriptEvent], n: int) -> OracleReport:
    """Compare commit_agreement against the reference model after every event."""
    expected = brute_force_commit_oracle(n, script)
    actual = _engine_states(n, script)
    report = OracleReport(events=len(script))
    for i, (exp, act) in enumerate(zip(expected, actual)):
        for pid in range(n):
            if exp[pid] != act[pid]:
                report.divergences.append(Divergence(i, script[i], pid, act[pid], exp[pid]))
                return report
    return report


def run_oracle_suite(scripts: int, n: int, seed: int, length: int = 60) -> tuple[int, list[Divergence]]:
    """Run `scripts` random scripts; returns (scripts run, first divergence of each failing script)."""
    rng = np.random.default_rng(seed)
    failures = []
    for _ in range(scripts):
        report = run_oracle(generate_script(rng, n, length), n)
        failures.extend(report.divergences)
    return scripts, failures
