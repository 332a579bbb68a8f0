# EpiRaft - Experiment Configuration
# SPDX-License-Identifier: AGPL-3.0

from __future__ import annotations
"""
Experiment configuration: a tree of dataclasses built from a JSON file or a
named preset, then `key.path=value` overrides, then validation.

All times are integer microseconds. Seeds are explicit; nothing reads the
wall clock.
"""

import copy
import json
import logging
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .protocol_types import MESSAGE_KINDS, Variant
from .raft_core import RaftSettings

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration; `key` is the dotted path of the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


FAULT_ACTIONS = ("crash", "recover", "partition", "heal", "set_loss", "cut_links", "restore_links")

MESSAGE_WEIGHTS = {kind: 1.0 for kind in MESSAGE_KINDS}

# Study presets: replies weigh a quarter of a request
STUDY_WEIGHTS = {kind: 0.25 if kind.endswith("reply") else 1.0 for kind in MESSAGE_KINDS}
_STUDY_COST = {"receive_weight": STUDY_WEIGHTS, "send_weight": STUDY_WEIGHTS}

NodeRef = Union[int, str]


def _opt(default: Any, help: str, **kw) -> Any:
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda: copy.deepcopy(default), metadata={"help": help}, **kw)
    return field(default=default, metadata={"help": help}, **kw)


@dataclass
class LatencyConfig:
    min_us: int = _opt(1000, "one-hop delay lower bound")
    mode_us: int = _opt(2000, "one-hop delay mode (triangular)")
    max_us: int = _opt(5000, "one-hop delay upper bound")

    @property
    def mean_us(self) -> float:
        return (self.min_us + self.mode_us + self.max_us) / 3


@dataclass
class TopologyConfig:
    n: int = _opt(5, "number of replicas")
    loss: float = _opt(0.0, "per-link loss probability")
    latency: LatencyConfig = field(default_factory=LatencyConfig)


@dataclass
class ProtocolConfig:
    fanout: int = _opt(3, "gossip fanout F, 1..n-1")
    election_timeout_us: Optional[int] = _opt(None, "T; election timeout drawn from [T, 2T] (default 10x mean delay)")
    round_period_us: Optional[int] = _opt(None, "leader round / heartbeat period while entries are pending (default T/5)")
    idle_heartbeat_period_us: Optional[int] = _opt(None, "leader heartbeat period when fully committed (default T/2)")
    gossip_relay: bool = _opt(True, "followers relay fresh gossip rounds")
    baseline_eager: bool = _opt(True, "Baseline leader sends each command to every follower at once")


@dataclass
class WorkloadConfig:
    clients: int = _opt(10, "closed-loop clients")
    rate: Optional[float] = _opt(None, "per-client target requests/s (None = back-to-back)")
    command_size: int = _opt(64, "command payload bytes")
    max_retries: int = _opt(5, "retries per request before it counts as failed")
    client_timeout_us: Optional[int] = _opt(None, "client request timeout (default 4T)")
    start_us: Optional[int] = _opt(None, "time the first requests are issued (default 3T)")


@dataclass
class CostConfig:
    receive_weight: dict = _opt(dict(MESSAGE_WEIGHTS), "cost units per received message, by kind")
    send_weight: dict = _opt(dict(MESSAGE_WEIGHTS), "cost units per sent message, by kind")
    entry_weight: float = _opt(0.1, "cost units per log entry appended")
    entry_wire_weight: float = _opt(0.25, "cost units per log entry carried by a sent or received AppendEntries")
    scan_weight: float = _opt(0.01, "cost units per scanned element: matchIndex values counted, bitmap bits sent or merged")
    subsumed_weight: float = _opt(0.05, "cost units for a received message that taught the node nothing new")
    cost_unit_us: int = _opt(10, "busy time per cost unit")


@dataclass
class FuzzConfig:
    enabled: bool = _opt(False, "generate a seeded fault schedule")
    min_leader_crashes: int = _opt(1, "leader crashes per run, lower bound")
    max_leader_crashes: int = _opt(3, "leader crashes per run, upper bound")
    partition: bool = _opt(True, "one partition followed by heal")
    max_loss: float = _opt(0.2, "per-link loss drawn from [0, max_loss]")


@dataclass
class TraceConfig:
    messages: bool = _opt(False, "add deliver records and message summaries to the always-on send/drop records")
    write: bool = _opt(False, "write trace.jsonl per run into the output directory")


@dataclass
class FaultAction:
    time_us: int
    action: str
    node: Optional[NodeRef] = None
    groups: Optional[list] = None
    p: Optional[float] = None
    link: Optional[list] = None
    dsts: Optional[list] = None
    keep: Optional[int] = None


@dataclass
class ExperimentConfig:
    name: str = _opt("custom", "experiment name")
    variants: list = _opt(["baseline", "v1", "v2"], "variants to run")
    duration_us: int = _opt(2_000_000, "simulated run length")
    warmup_us: int = _opt(500_000, "measurement starts after warmup")
    seeds: list = _opt([1], "base seeds")
    repeats: int = _opt(1, "repeats per seed")
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    fuzz: FuzzConfig = field(default_factory=FuzzConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)
    faults: list = _opt([], "scheduled fault actions")
    sweep: dict = _opt({}, "dotted key -> list of values")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)

    def variant_list(self) -> list[Variant]:
        return [Variant.parse(v) for v in self.variants]


# ---------------------------------------------------------------------------
# Building from dicts
# ---------------------------------------------------------------------------

_NESTED: dict[type, dict[str, type]] = {
    ExperimentConfig: {"topology": TopologyConfig, "protocol": ProtocolConfig,
                       "workload": WorkloadConfig, "cost": CostConfig,
                       "fuzz": FuzzConfig, "trace": TraceConfig},
    TopologyConfig: {"latency": LatencyConfig},
}


def _build(cls: type, data: Any, prefix: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(prefix, "expected an object")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{prefix}.{key}" if prefix else key, "unknown key")
    kwargs = {}
    nested = _NESTED.get(cls, {})
    for name, value in data.items():
        path = f"{prefix}.{name}" if prefix else name
        if name in nested:
            kwargs[name] = _build(nested[name], value, path)
        elif cls is ExperimentConfig and name == "faults":
            if not isinstance(value, list):
                raise ConfigError(path, "expected a list")
            kwargs[name] = [_build_fault(item, f"{path}[{i}]") for i, item in enumerate(value)]
        else:
            kwargs[name] = copy.deepcopy(value)
    return cls(**kwargs)


def _build_fault(data: Any, prefix: str) -> FaultAction:
    if isinstance(data, FaultAction):
        return data
    if not isinstance(data, dict):
        raise ConfigError(prefix, "expected an object")
    known = {f.name for f in fields(FaultAction)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{prefix}.{key}", "unknown key")
    for key in ("time_us", "action"):
        if key not in data:
            raise ConfigError(f"{prefix}.{key}", "required")
    return FaultAction(**data)


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def _deep_merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key not in ("sweep",):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Load a JSON config file; keys absent from the file keep their defaults."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError("", f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}: invalid JSON at line {exc.lineno}") from exc
    if "preset" in data:
        base = get_preset(data.pop("preset")).to_dict()
        data = _deep_merge(base, data)
    return config_from_dict(data)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """
    Apply `dotted.key=value` overrides. Values are JSON-parsed when possible.

    Returns a new config; the input is untouched.
    """
    data = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        _set_dotted(data, key, _parse_value(raw))
    return config_from_dict(data)


def _set_dotted(data: dict, key: str, value: Any) -> None:
    if key.startswith("sweep."):
        data["sweep"][key[len("sweep."):]] = value
        return
    parts = key.split(".")
    node = data
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node.get(part), dict):
            raise ConfigError(".".join(parts[:i + 1]), "unknown key")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node and not (parts[0] == "sweep" and len(parts) == 2):
        raise ConfigError(key, "unknown key")
    node[leaf] = value


def _get_dotted(data: dict, key: str) -> Any:
    node = data
    for part in key.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(key, "unknown key")
        node = node[part]
    return node


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _check_int(key: str, value: Any, low: Optional[int] = None, optional: bool = False) -> None:
    if value is None and optional:
        return
    if not _is_int(value):
        raise ConfigError(key, f"expected an integer, got {value!r}")
    if low is not None and value < low:
        raise ConfigError(key, f"must be >= {low}, got {value}")


def _check_prob(key: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
        raise ConfigError(key, f"expected a probability in [0, 1], got {value!r}")


def _check_node(key: str, value: Any, n: int) -> None:
    if value == "leader":
        return
    if not _is_int(value) or not 0 <= value < n:
        raise ConfigError(key, f"node must be 'leader' or an id in 0..{n - 1}, got {value!r}")


def validate_config(config: ExperimentConfig) -> ExperimentConfig:
    """Raise ConfigError naming the first offending key; returns the config unchanged."""
    if not config.variants:
        raise ConfigError("variants", "at least one variant required")
    for i, name in enumerate(config.variants):
        try:
            Variant.parse(name)
        except ValueError as exc:
            raise ConfigError(f"variants[{i}]", str(exc)) from exc

    topo = config.topology
    _check_int("topology.n", topo.n, 2)
    _check_prob("topology.loss", topo.loss)
    lat = topo.latency
    for name in ("min_us", "mode_us", "max_us"):
        _check_int(f"topology.latency.{name}", getattr(lat, name), 0)
    if not lat.min_us <= lat.mode_us <= lat.max_us:
        raise ConfigError("topology.latency", "need min_us <= mode_us <= max_us")

    proto = config.protocol
    _check_int("protocol.fanout", proto.fanout, 1)
    if proto.fanout > topo.n - 1:
        raise ConfigError("protocol.fanout", f"must be <= n-1 ({topo.n - 1}), got {proto.fanout}")
    for name in ("election_timeout_us", "round_period_us", "idle_heartbeat_period_us"):
        _check_int(f"protocol.{name}", getattr(proto, name), 1, optional=True)
    for name in ("gossip_relay", "baseline_eager"):
        if not isinstance(getattr(proto, name), bool):
            raise ConfigError(f"protocol.{name}", "expected true or false")

    wl = config.workload
    _check_int("workload.clients", wl.clients, 0)
    _check_int("workload.command_size", wl.command_size, 0)
    _check_int("workload.max_retries", wl.max_retries, 0)
    _check_int("workload.client_timeout_us", wl.client_timeout_us, 1, optional=True)
    _check_int("workload.start_us", wl.start_us, 0, optional=True)
    if wl.rate is not None and (isinstance(wl.rate, bool) or not isinstance(wl.rate, (int, float)) or wl.rate <= 0):
        raise ConfigError("workload.rate", f"expected a positive number or null, got {wl.rate!r}")

    cost = config.cost
    for table in ("receive_weight", "send_weight"):
        weights = getattr(cost, table)
        if not isinstance(weights, dict):
            raise ConfigError(f"cost.{table}", "expected an object")
        for kind, weight in weights.items():
            if kind not in MESSAGE_KINDS:
                raise ConfigError(f"cost.{table}.{kind}", "unknown message kind")
            if isinstance(weight, bool) or not isinstance(weight, (int, float)) or weight < 0:
                raise ConfigError(f"cost.{table}.{kind}", "expected a non-negative number")
    for name in ("entry_weight", "entry_wire_weight", "scan_weight", "subsumed_weight"):
        weight = getattr(cost, name)
        if isinstance(weight, bool) or not isinstance(weight, (int, float)) or weight < 0:
            raise ConfigError(f"cost.{name}", "expected a non-negative number")
    _check_int("cost.cost_unit_us", cost.cost_unit_us, 0)

    fz = config.fuzz
    _check_int("fuzz.min_leader_crashes", fz.min_leader_crashes, 0)
    _check_int("fuzz.max_leader_crashes", fz.max_leader_crashes, fz.min_leader_crashes)
    _check_prob("fuzz.max_loss", fz.max_loss)

    _check_int("duration_us", config.duration_us, 1)
    _check_int("warmup_us", config.warmup_us, 0)
    if config.warmup_us >= config.duration_us:
        raise ConfigError("warmup_us", "must be below duration_us")
    if not config.seeds:
        raise ConfigError("seeds", "at least one seed required")
    for i, seed in enumerate(config.seeds):
        _check_int(f"seeds[{i}]", seed, 0)
    _check_int("repeats", config.repeats, 1)

    for i, fault in enumerate(config.faults):
        _validate_fault(f"faults[{i}]", fault, topo.n)

    data = config.to_dict()
    for key, values in config.sweep.items():
        _get_dotted(data, key)
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.{key}", "expected a non-empty list")
        for value in values:
            point = apply_overrides(config, [f"{key}={json.dumps(value)}"])
            point.sweep = {}
            validate_config(point)
    return config


def _validate_fault(key: str, fault: FaultAction, n: int) -> None:
    _check_int(f"{key}.time_us", fault.time_us, 0)
    if fault.action not in FAULT_ACTIONS:
        raise ConfigError(f"{key}.action", f"unknown action {fault.action!r}")
    if fault.action in ("crash", "recover"):
        _check_node(f"{key}.node", fault.node, n)
    elif fault.action == "partition":
        if not fault.groups or not all(isinstance(g, list) for g in fault.groups):
            raise ConfigError(f"{key}.groups", "expected a list of node lists")
        for group in fault.groups:
            for node in group:
                _check_node(f"{key}.groups", node, n)
    elif fault.action == "set_loss":
        _check_prob(f"{key}.p", fault.p)
        if fault.link is not None:
            if len(fault.link) != 2:
                raise ConfigError(f"{key}.link", "expected [src, dst]")
            for node in fault.link:
                _check_node(f"{key}.link", node, n)
    elif fault.action in ("cut_links", "restore_links"):
        _check_node(f"{key}.node", fault.node, n)
        if fault.dsts is not None:
            for node in fault.dsts:
                _check_node(f"{key}.dsts", node, n)
        _check_int(f"{key}.keep", fault.keep, 0, optional=True)


# ---------------------------------------------------------------------------
# Resolution
# ---------------------------------------------------------------------------

def election_timeout_us(config: ExperimentConfig) -> int:
    proto = config.protocol
    if proto.election_timeout_us is not None:
        return proto.election_timeout_us
    return int(round(10 * config.topology.latency.mean_us))


def resolve_settings(config: ExperimentConfig, variant: Union[str, Variant]) -> RaftSettings:
    """Protocol parameters for one variant, with defaults derived from the latency model."""
    proto = config.protocol
    timeout = election_timeout_us(config)
    return RaftSettings(
        variant=Variant.parse(variant),
        election_timeout_us=timeout,
        round_period_us=proto.round_period_us or max(1, timeout // 5),
        idle_heartbeat_period_us=proto.idle_heartbeat_period_us or max(1, timeout // 2),
        fanout=min(proto.fanout, config.topology.n - 1),
        gossip_relay=proto.gossip_relay,
        baseline_eager=proto.baseline_eager,
    )


def client_timeout_us(config: ExperimentConfig) -> int:
    if config.workload.client_timeout_us is not None:
        return config.workload.client_timeout_us
    return 4 * election_timeout_us(config)


def expand_sweep(config: ExperimentConfig) -> list[tuple[dict[str, Any], ExperimentConfig]]:
    """Cartesian product of sweep values; each point is a config without a sweep."""
    points: list[dict[str, Any]] = [{}]
    for key, values in config.sweep.items():
        points = [dict(p, **{key: v}) for p in points for v in values]
    out = []
    for point in points:
        cfg = apply_overrides(config, [f"{k}={json.dumps(v)}" for k, v in point.items()])
        cfg.sweep = {}
        out.append((point, cfg))
    return out


def generate_fault_schedule(config: ExperimentConfig, seed: int, repeat: int = 0) -> list[FaultAction]:
    """Seeded faults for one run: leader crash/recover pairs, one partition and heal, link loss."""
    fz = config.fuzz
    if not fz.enabled:
        return []
    rng = np.random.default_rng([seed, repeat, 7])
    n = config.topology.n
    timeout = election_timeout_us(config)
    start, end = config.warmup_us, int(config.duration_us * 0.8)
    span = max(1, end - start)
    actions: list[FaultAction] = []

    if fz.max_loss > 0:
        for src in range(n):
            for dst in range(n):
                if src != dst:
                    p = round(float(rng.uniform(0, fz.max_loss)), 4)
                    actions.append(FaultAction(time_us=0, action="set_loss", link=[src, dst], p=p))

    crashes = int(rng.integers(fz.min_leader_crashes, fz.max_leader_crashes + 1))
    slot = span // max(1, crashes)
    for i in range(crashes):
        at = start + i * slot + int(rng.integers(0, max(1, slot // 2)))
        down = int(rng.integers(timeout, 3 * timeout + 1))
        actions.append(FaultAction(time_us=at, action="crash", node="leader"))
        actions.append(FaultAction(time_us=at + down, action="recover", node="leader"))

    if fz.partition and n >= 3:
        order = [int(x) for x in rng.permutation(n)]
        minority = int(rng.integers(1, (n - 1) // 2 + 1))
        at = start + int(rng.integers(0, span))
        heal = at + int(rng.integers(2 * timeout, 4 * timeout + 1))
        actions.append(FaultAction(time_us=at, action="partition",
                                   groups=[sorted(order[:minority]), sorted(order[minority:])]))
        actions.append(FaultAction(time_us=heal, action="heal"))
    logger.debug("fault schedule seed=%d repeat=%d: %d leader crashes, %d actions", seed, repeat, crashes, len(actions))
    return sorted(actions, key=lambda a: a.time_us)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

_PRESETS: dict[str, tuple[str, dict[str, Any]]] = {
    "smoke": ("5 replicas, 4 clients, 0.6 s; all variants", {
        "name": "smoke", "duration_us": 600_000, "warmup_us": 200_000,
        "topology": {"n": 5}, "workload": {"clients": 4},
    }),
    "paper-throughput": ("51 replicas, 100 clients; saturation throughput and latency", {
        "name": "paper-throughput", "duration_us": 2_000_000, "warmup_us": 600_000,
        "cost": _STUDY_COST,
        "topology": {"n": 51}, "workload": {"clients": 100},
    }),
    "desk-throughput": ("throughput study at n in {5, 11, 21}", {
        "name": "desk-throughput", "duration_us": 1_500_000, "warmup_us": 500_000,
        "cost": _STUDY_COST,
        "topology": {"n": 11}, "workload": {"clients": 50},
        "sweep": {"topology.n": [5, 11, 21]},
    }),
    "cpu-vs-load": ("21 replicas, 10 clients; cost per node across offered load", {
        "name": "cpu-vs-load", "duration_us": 2_000_000, "warmup_us": 500_000,
        "cost": _STUDY_COST,
        "topology": {"n": 21}, "workload": {"clients": 10},
        "protocol": {"fanout": 4},
        "sweep": {"workload.rate": [10, 25, 50, 100, None]},
    }),
    "cpu-vs-replicas": ("10 back-to-back clients; leader and follower cost across n in {5, 11, 21, 51}", {
        "name": "cpu-vs-replicas", "duration_us": 2_000_000, "warmup_us": 500_000,
        "cost": _STUDY_COST,
        "workload": {"clients": 10},
        "protocol": {"fanout": 4},
        "sweep": {"topology.n": [5, 11, 21, 51]},
    }),
    "commit-lag-cdf": ("51 replicas, 100 clients; leader-receipt to replica-commit lag", {
        "name": "commit-lag-cdf", "duration_us": 2_000_000, "warmup_us": 500_000,
        "cost": _STUDY_COST,
        "topology": {"n": 51}, "workload": {"clients": 100},
        "protocol": {"fanout": 4},
    }),
    "non-transitive": ("21 replicas; leader reaches few followers directly; 60 s", {
        "name": "non-transitive", "duration_us": 60_000_000, "warmup_us": 1_000_000,
        "topology": {"n": 21},
        "protocol": {"fanout": 5, "election_timeout_us": 80_000, "round_period_us": 5_000,
                     "idle_heartbeat_period_us": 10_000},
        "workload": {"clients": 0},
        "faults": [{"time_us": 1_000_000, "action": "cut_links", "node": "leader", "keep": 6}],
    }),
    "safety-fuzz": ("crashes, a partition and up to 20% loss over n in {3, 5, 7, 9, 21}", {
        "name": "safety-fuzz", "duration_us": 1_500_000, "warmup_us": 300_000,
        "seeds": list(range(1, 101)), "workload": {"clients": 4, "max_retries": 20},
        "protocol": {"fanout": 2},
        "fuzz": {"enabled": True, "max_loss": 0.2},
        "sweep": {"topology.n": [3, 5, 7, 9, 21]},
    }),
}


def list_presets() -> list[tuple[str, str]]:
    return [(name, desc) for name, (desc, _) in _PRESETS.items()]


def get_preset(name: str) -> ExperimentConfig:
    if name not in _PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {', '.join(_PRESETS)}")
    _, overrides = _PRESETS[name]
    return config_from_dict(_deep_merge(ExperimentConfig().to_dict(), overrides))


def describe_config() -> str:
    """Every key with its type, default and help text."""
    lines = ["key | type | default | help", "--- | --- | --- | ---"]

    def walk(cls: type, prefix: str) -> None:
        nested = _NESTED.get(cls, {})
        for f in fields(cls):
            path = f"{prefix}{f.name}"
            if f.name in nested:
                walk(nested[f.name], path + ".")
                continue
            if f.default is not MISSING:
                default = f.default
            elif f.default_factory is not MISSING:
                default = f.default_factory()
            else:
                default = "(required)"
            type_name = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
            lines.append(f"{path} | {type_name} | {json.dumps(default)} | {f.metadata.get('help', '')}")

    walk(ExperimentConfig, "")
    lines.append("")
    lines.append("fault actions: " + ", ".join(FAULT_ACTIONS)
                 + "; node may be an id or \"leader\" (resolved when the action fires)")
    return "\n".join(lines)
