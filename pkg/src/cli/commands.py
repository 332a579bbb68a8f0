# EpiRaft - CLI
# SPDX-License-Identifier: AGPL-3.0

from __future__ import annotations
"""
CLI commands for EpiRaft: experiment runs, presets, trace checks, the commit
agreement oracle and directional trend checks.
"""

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from epiraft.config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    describe_config,
    expand_sweep,
    get_preset,
    list_presets,
    load_config,
    validate_config,
)
from epiraft.net_sim import SimulationStalled, run_simulation
from epiraft.protocol_types import Variant
from epiraft.safety_checker import Verdict, check_trace, run_oracle_suite
from epiraft.trace_store import TraceParseError, load_trace
from epiraft.workload_metrics import (
    MetricsReport,
    build_report,
    export,
    linear_fit_r2,
    mean_node_cost,
    quadratic_term,
)

logger = logging.getLogger("epiraft.cli")

EXIT_OK = 0
EXIT_TREND = 1
EXIT_CONFIG = 2
EXIT_VIOLATION = 3
EXIT_RUNTIME = 4


@dataclass
class RunTask:
    """One (sweep point, variant, seed, repeat) simulation."""
    order: tuple[int, int, int, int]
    point: str
    config: ExperimentConfig
    variant: Variant
    seed: int
    repeat: int
    trace_dir: Optional[str] = None


@dataclass
class RunOutcome:
    order: tuple[int, int, int, int]
    report: MetricsReport
    verdict: Verdict
    trace_path: Optional[str] = None


@dataclass
class TrendCheck:
    name: str
    passed: bool
    detail: str

    def to_text(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _point_label(point: dict) -> str:
    return ",".join(f"{k}={json.dumps(v)}" for k, v in point.items())


def _execute(task: RunTask) -> RunOutcome:
    """Worker: simulate, check, summarize. Runs in a child process under --parallel."""
    result = run_simulation(task.config, task.variant, task.seed, task.repeat)
    verdict = check_trace(result.trace)
    trace_path = None
    if task.trace_dir is not None:
        name = f"trace_{task.variant.value}_s{task.seed}_r{task.repeat}"
        if task.point:
            name += "_p" + str(task.order[0])
        trace_path = str(result.trace.export(Path(task.trace_dir) / f"{name}.jsonl"))
    report = build_report(result, point=task.point, violations=len(verdict.violations))
    return RunOutcome(task.order, report, verdict, trace_path)


def plan_runs(config: ExperimentConfig, trace_dir: Optional[Path] = None) -> list[RunTask]:
    tasks = []
    for p, (point, cfg) in enumerate(expand_sweep(config)):
        validate_config(cfg)
        for v, variant in enumerate(cfg.variant_list()):
            for seed in cfg.seeds:
                for repeat in range(cfg.repeats):
                    tasks.append(RunTask(
                        order=(p, v, seed, repeat), point=_point_label(point), config=cfg,
                        variant=variant, seed=seed, repeat=repeat,
                        trace_dir=str(trace_dir) if trace_dir is not None else None,
                    ))
    return tasks


def run_matrix(config: ExperimentConfig, parallel: int = 1,
               trace_dir: Optional[Path] = None) -> list[RunOutcome]:
    """Run every planned simulation; results come back sorted, whatever finished first."""
    tasks = plan_runs(config, trace_dir)
    if trace_dir is not None:
        trace_dir.mkdir(parents=True, exist_ok=True)
    logger.info("%s: %d runs (parallel=%d)", config.name, len(tasks), parallel)
    if parallel > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            outcomes = list(pool.map(_execute, tasks))
    else:
        outcomes = []
        for task in tasks:
            logger.info("run %s seed=%d repeat=%d %s", task.variant.value, task.seed, task.repeat, task.point)
            outcomes.append(_execute(task))
    return sorted(outcomes, key=lambda o: o.order)


class EpiRaftCLI:
    """CLI for EpiRaft."""

    def __init__(self, out_dir: Path = Path("results"), parallel: int = 1):
        self.out_dir = Path(out_dir)
        self.parallel = max(1, parallel)

    def resolve_config(self, config_path: Optional[str] = None, preset: Optional[str] = None,
                       overrides: Sequence[str] = (), seed: Optional[int] = None,
                       variants: Sequence[str] = ()) -> ExperimentConfig:
        """File or preset, then flag overrides, then validation."""
        if config_path and preset:
            raise ConfigError("preset", "give either --config or --preset, not both")
        if config_path:
            config = load_config(config_path)
        else:
            config = get_preset(preset or "smoke")
        extra = list(overrides)
        if seed is not None:
            extra.append(f"seeds=[{seed}]")
        if variants:
            extra.append("variants=" + json.dumps(list(variants)))
        config = apply_overrides(config, extra)
        return validate_config(config)

    def run(self, config: ExperimentConfig, write_trace: bool = False) -> int:
        """Run an experiment matrix and export its tables."""
        trace_dir = self.out_dir / "traces" if (write_trace or config.trace.write) else None
        outcomes = run_matrix(config, self.parallel, trace_dir)
        reports = [o.report for o in outcomes]
        paths = export(reports, self.out_dir)
        for path in paths:
            logger.info("wrote %s", path)

        failed = [o for o in outcomes if not o.verdict.passed]
        print(f"# {config.name}: {len(outcomes)} runs")
        print()
        print("point | variant | seed | repeat | throughput | p99 ms | leader cost/commit | verdict")
        print("--- | --- | --- | --- | --- | --- | --- | ---")
        for o in outcomes:
            r = o.report
            print(f"{r.point or '-'} | {r.variant} | {r.seed} | {r.repeat} | {r.throughput:.1f} | "
                  f"{r.p99_latency_ms:.2f} | {r.leader_cost_per_commit:.2f} | "
                  f"{'PASS' if o.verdict.passed else 'FAIL'}")
        for o in failed:
            r = o.report
            print(f"\n{r.variant} seed={r.seed} repeat={r.repeat} {r.point}".rstrip())
            print(o.verdict.to_text())
        print(f"\nArtifacts: {self.out_dir}")
        return EXIT_VIOLATION if failed else EXIT_OK

    def presets(self) -> int:
        for name, description in list_presets():
            print(f"{name:18s} {description}")
        return EXIT_OK

    def describe(self) -> int:
        print(describe_config())
        return EXIT_OK

    def check(self, trace_path: Path) -> int:
        """Verify a trace file offline."""
        trace = load_trace(trace_path)
        verdict = check_trace(trace)
        print(verdict.to_text())
        return EXIT_OK if verdict.passed else EXIT_VIOLATION

    def oracle(self, scripts: int = 1000, n: int = 3, seed: int = 1, length: int = 60) -> int:
        """Compare commit agreement with the reference model over random scripts."""
        if not 2 <= n <= 5:
            raise ConfigError("n", f"oracle supports 2 <= n <= 5, got {n}")
        ran, divergences = run_oracle_suite(scripts, n, seed, length)
        if divergences:
            for d in divergences[:10]:
                print(d.to_text())
            print(f"FAIL {len(divergences)} of {ran} scripts diverged")
            return EXIT_VIOLATION
        print(f"PASS {ran} scripts, n={n}, seed={seed}")
        return EXIT_OK

    def trends(self, quick: bool = False) -> int:
        """Directional trend checks on the simulator's cost model."""
        checks: list[TrendCheck] = []
        violations = 0

        def runs(preset: str, overrides: list[str]) -> list[MetricsReport]:
            nonlocal violations
            config = validate_config(apply_overrides(get_preset(preset), overrides))
            outcomes = run_matrix(config, self.parallel)
            violations += sum(len(o.verdict.violations) for o in outcomes)
            return [o.report for o in outcomes]

        def by_variant(reports: list[MetricsReport], point: Optional[str] = None) -> dict[str, MetricsReport]:
            return {r.variant: r for r in reports if point is None or r.point == point}

        # saturation throughput
        shrink = ["topology.n=21", "workload.clients=50", "duration_us=1000000", "warmup_us=300000"] if quick else []
        tp = by_variant(runs("paper-throughput", shrink + ['variants=["baseline","v1"]']))
        base, v1 = tp["baseline"].throughput, tp["v1"].throughput
        checks.append(TrendCheck("throughput", v1 >= 2 * base,
                                 f"v1 {v1:.1f} req/s vs baseline {base:.1f} req/s"))

        # leader load and scalability
        sizes = [5, 11, 21] if quick else [5, 11, 21, 51]
        shrink = [f"sweep.topology.n={json.dumps(sizes)}", 'variants=["baseline","v2"]']
        if quick:
            shrink += ["duration_us=1000000", "warmup_us=300000"]
        cpu = runs("cpu-vs-replicas", shrink)
        largest = by_variant(cpu, f"topology.n={sizes[-1]}")
        b, v2 = largest["baseline"], largest["v2"]
        checks.append(TrendCheck(
            "leader-cost-per-commit", 0 < v2.leader_cost_per_commit <= 0.5 * b.leader_cost_per_commit,
            f"n={sizes[-1]}: v2 {v2.leader_cost_per_commit:.2f} vs baseline {b.leader_cost_per_commit:.2f}"))
        checks.append(TrendCheck(
            "leader-vs-followers", v2.leader_cost <= 1.5 * v2.follower_mean_cost,
            f"v2 leader {v2.leader_cost:.1f} vs follower mean {v2.follower_mean_cost:.1f}"))

        per_commit = [by_variant(cpu, f"topology.n={size}")["baseline"].leader_cost_per_commit for size in sizes]
        growth = per_commit[-1] / max(per_commit[0], 1e-9)
        peers = (sizes[-1] - 1) / (sizes[0] - 1)
        curve = quadratic_term(sizes, per_commit)
        checks.append(TrendCheck(
            "baseline-leader-superlinear", growth > peers and curve > 0,
            f"baseline leader cost/commit x{growth:.2f} for peers x{peers:.2f}, quadratic term {curve:.4f}"))

        per_node = [mean_node_cost(by_variant(cpu, f"topology.n={size}")["v2"]) for size in sizes]
        slope, intercept, r2 = linear_fit_r2(sizes, per_node)
        worst = max(abs(c - (slope * x + intercept)) / max(c, 1e-9) for x, c in zip(sizes, per_node))
        checks.append(TrendCheck("v2-linear-cost", r2 >= 0.95 and worst <= 0.2,
                                 f"v2 mean node cost R2={r2:.3f}, worst residual {worst:.1%}"))

        # commit lag
        shrink = ["seeds=[1]"]
        if quick:
            shrink += ["topology.n=21", "workload.clients=50", "duration_us=1000000", "warmup_us=300000"]
        lag = by_variant(runs("commit-lag-cdf", shrink))
        m = {k: lag[k].median_follower_lag_ms for k in ("baseline", "v1", "v2")}
        checks.append(TrendCheck(
            "commit-lag-order", m["v2"] <= m["v1"] <= m["baseline"],
            f"median lag ms v2 {m['v2']:.2f}, v1 {m['v1']:.2f}, baseline {m['baseline']:.2f}"))
        checks.append(TrendCheck("follower-ahead", lag["v2"].follower_ahead >= 1,
                                 f"v2 follower commits at or before leader: {lag['v2'].follower_ahead}"))

        # non-transitive reachability
        shrink = ["duration_us=10000000"] if quick else []
        nt = by_variant(runs("non-transitive", shrink))
        checks.append(TrendCheck(
            "non-transitive", nt["v1"].elections_after_warmup == 0 and nt["v2"].elections_after_warmup == 0
            and nt["baseline"].elections_after_warmup >= 1,
            "elections after cut: " + ", ".join(f"{k} {nt[k].elections_after_warmup}" for k in ("baseline", "v1", "v2"))))

        # determinism
        first = runs("smoke", [])
        second = runs("smoke", [])
        same = [a.summary_row() == b.summary_row() for a, b in zip(first, second)]
        checks.append(TrendCheck("determinism", len(first) == len(second) and all(same),
                                 f"{sum(same)}/{len(first)} smoke runs identical"))

        checks.append(TrendCheck("safety", violations == 0, f"{violations} violations across trend runs"))
        for check in checks:
            print(check.to_text())
        if violations:
            return EXIT_VIOLATION
        return EXIT_OK if all(c.passed for c in checks) else EXIT_TREND


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point."""
    parser = argparse.ArgumentParser(prog="epiraft", description="EpiRaft simulator CLI")
    parser.add_argument("--log-level", default="WARNING", help="Logging level")
    parser.add_argument("-v", "--verbose", action="store_true", help="Shortcut for --log-level INFO")

    subparsers = parser.add_subparsers(dest="command", help="Commands")

    run_parser = subparsers.add_parser("run", help="Run an experiment")
    run_parser.add_argument("--config", help="JSON config file")
    run_parser.add_argument("--preset", help="Named preset (see `presets`)")
    run_parser.add_argument("--out", default="results", help="Output directory")
    run_parser.add_argument("--seed", type=int, help="Run a single seed")
    run_parser.add_argument("--parallel", type=int, default=1, help="Worker processes")
    run_parser.add_argument("--variant", action="append", default=[], help="Variant filter (repeatable)")
    run_parser.add_argument("--set", dest="overrides", action="append", default=[],
                            help="key=value override (repeatable)")
    run_parser.add_argument("--write-trace", action="store_true", help="Write JSONL traces under OUT/traces")

    subparsers.add_parser("presets", help="List presets")
    subparsers.add_parser("describe", help="Show every config key with defaults")

    check_parser = subparsers.add_parser("check", help="Check a trace file")
    check_parser.add_argument("trace", help="Trace JSONL file")

    oracle_parser = subparsers.add_parser("oracle", help="Commit agreement oracle")
    oracle_parser.add_argument("--scripts", type=int, default=1000)
    oracle_parser.add_argument("--n", type=int, default=3)
    oracle_parser.add_argument("--seed", type=int, default=1)
    oracle_parser.add_argument("--length", type=int, default=60)

    trends_parser = subparsers.add_parser("trends", help="Directional trend checks")
    trends_parser.add_argument("--quick", action="store_true", help="Smaller clusters and shorter runs")
    trends_parser.add_argument("--parallel", type=int, default=1, help="Worker processes")

    args = parser.parse_args(argv)

    level = "INFO" if args.verbose else args.log_level.upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG

    cli = EpiRaftCLI(Path(getattr(args, "out", "results")), getattr(args, "parallel", 1))
    try:
        if args.command == "run":
            config = cli.resolve_config(args.config, args.preset, args.overrides, args.seed, args.variant)
            return cli.run(config, args.write_trace)
        elif args.command == "presets":
            return cli.presets()
        elif args.command == "describe":
            return cli.describe()
        elif args.command == "check":
            return cli.check(Path(args.trace))
        elif args.command == "oracle":
            return cli.oracle(args.scripts, args.n, args.seed, args.length)
        elif args.command == "trends":
            return cli.trends(args.quick)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceParseError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (SimulationStalled, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    print(f"Unknown command: {args.command}", file=sys.stderr)
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
