# EpiRaft - Main Package
# SPDX-License-Identifier: AGPL-3.0

"""
EpiRaft - Raft with epidemic AppendEntries dissemination and decentralized
commit, inside a deterministic discrete-event simulator.

Components:
- Protocol Types: log, wire records, canonical encoding
- Raft Core: per-node engine (Baseline, V1 gossip, V2 decentralized commit)
- Gossip Engine: permutation walk rounds and first-receipt rule
- Commit Agreement: Bitmap / MaxCommit / NextCommit
- Net Sim: virtual time, latency, loss, partitions, crash/recover
- Trace Store: append-only JSONL audit trace
- Workload Metrics: closed-loop clients, cost proxy, CSV export
- Safety Checker: trace verification and commit agreement oracle
"""

from .protocol_types import (
    AppendEntriesMsg,
    AppendEntriesReply,
    LogEntry,
    ReplicatedLog,
    RequestVoteMsg,
    RequestVoteReply,
    Variant,
    validate_append_entries,
)
from .raft_core import NodeState, RaftNode, RaftSettings, Role
from .commit_agreement import CommitState
from .gossip_engine import PermutationWalker, new_walker
from .config import ConfigError, ExperimentConfig, get_preset, list_presets, load_config
from .trace_store import TraceParseError, TraceStore, create_trace_store, load_trace
from .net_sim import SimulationResult, SimulationStalled, Simulator, Topology, run_simulation
from .workload_metrics import MetricsReport, build_report, compute_cdf, export
from .safety_checker import Verdict, Violation, check_trace, run_oracle

__version__ = "0.1.0"

__all__ = [
    "AppendEntriesMsg",
    "AppendEntriesReply",
    "LogEntry",
    "ReplicatedLog",
    "RequestVoteMsg",
    "RequestVoteReply",
    "Variant",
    "validate_append_entries",
    "NodeState",
    "RaftNode",
    "RaftSettings",
    "Role",
    "CommitState",
    "PermutationWalker",
    "new_walker",
    "ConfigError",
    "ExperimentConfig",
    "get_preset",
    "list_presets",
    "load_config",
    "TraceParseError",
    "TraceStore",
    "create_trace_store",
    "load_trace",
    "SimulationResult",
    "SimulationStalled",
    "Simulator",
    "Topology",
    "run_simulation",
    "MetricsReport",
    "build_report",
    "compute_cdf",
    "export",
    "check_trace",
    "run_oracle",
    "Verdict",
    "Violation",
]
