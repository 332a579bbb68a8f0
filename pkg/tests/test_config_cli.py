# Config and CLI Tests
# SPDX-License-Identifier: AGPL-3.0

"""
Tests for presets, overrides, validation and the command-line entry point.
"""

import json
import sys
import tempfile
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from cli.commands import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_VIOLATION, main
from epiraft.config import (
    ConfigError,
    apply_overrides,
    describe_config,
    election_timeout_us,
    expand_sweep,
    generate_fault_schedule,
    get_preset,
    list_presets,
    load_config,
    validate_config,
)


class TestPresets:
    """Named experiment presets."""

    def test_all_presets_validate(self):
        names = [name for name, _ in list_presets()]
        for name in ("smoke", "paper-throughput", "cpu-vs-load", "cpu-vs-replicas",
                     "commit-lag-cdf", "non-transitive", "safety-fuzz"):
            assert name in names
        for name in names:
            for _, cfg in expand_sweep(get_preset(name)):
                validate_config(cfg)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError) as err:
            get_preset("nope")
        assert err.value.key == "preset"

    def test_derived_timeout(self):
        # mean triangular delay of 1000/2000/5000 is 8/3 ms
        assert election_timeout_us(get_preset("smoke")) == 26667

    def test_cost_weights(self):
        assert set(get_preset("smoke").cost.receive_weight.values()) == {1.0}
        study = get_preset("cpu-vs-replicas").cost
        assert study.receive_weight["append_reply"] == 0.25
        assert study.send_weight["append_entries"] == 1.0
        assert study.entry_wire_weight == 0.25


class TestOverrides:
    def test_dotted_override(self):
        cfg = apply_overrides(get_preset("smoke"), ["protocol.fanout=2", "workload.rate=40"])
        assert cfg.protocol.fanout == 2
        assert cfg.workload.rate == 40

    def test_override_leaves_input(self):
        base = get_preset("smoke")
        apply_overrides(base, ["topology.n=9"])
        assert base.topology.n == 5

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as err:
            apply_overrides(get_preset("smoke"), ["protocol.bogus=1"])
        assert err.value.key == "protocol.bogus"

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            apply_overrides(get_preset("smoke"), ["protocol.fanout"])

    def test_sweep_override(self):
        cfg = apply_overrides(get_preset("smoke"), ["sweep.topology.n=[3,5,7]", 'variants=["v2"]'])
        points = expand_sweep(cfg)
        assert [p for p, _ in points] == [{"topology.n": 3}, {"topology.n": 5}, {"topology.n": 7}]
        assert [c.topology.n for _, c in points] == [3, 5, 7]
        assert all(c.sweep == {} for _, c in points)

    def test_sweep_product(self):
        cfg = apply_overrides(get_preset("smoke"), ['sweep={"topology.n":[5,7],"workload.rate":[10,20,30]}'])
        assert len(expand_sweep(cfg)) == 6


class TestValidation:
    """ConfigError names the offending key."""

    def _error_key(self, *overrides):
        with pytest.raises(ConfigError) as err:
            validate_config(apply_overrides(get_preset("smoke"), list(overrides)))
        return err.value.key

    def test_unknown_variant(self):
        assert self._error_key('variants=["raft9"]') == "variants[0]"

    def test_fanout_above_peers(self):
        assert self._error_key("protocol.fanout=5") == "protocol.fanout"

    def test_bad_loss(self):
        assert self._error_key("topology.loss=1.5") == "topology.loss"

    def test_latency_order(self):
        assert self._error_key('topology.latency={"min_us":5,"mode_us":1,"max_us":9}') == "topology.latency"

    def test_fault_node_out_of_range(self):
        key = self._error_key('faults=[{"time_us":1,"action":"crash","node":9}]')
        assert key.startswith("faults[0]")

    def test_leader_reference_accepted(self):
        validate_config(apply_overrides(get_preset("smoke"),
                                        ['faults=[{"time_us":1,"action":"crash","node":"leader"}]']))

    def test_describe_lists_keys(self):
        text = describe_config()
        assert "protocol.fanout | int | 3" in text
        assert "topology.latency.mode_us | int | 2000" in text


class TestConfigFile:
    def test_file_with_preset_base(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "exp.json"
            path.write_text(json.dumps({"preset": "smoke", "protocol": {"fanout": 2}}))
            cfg = load_config(path)
        assert cfg.name == "smoke"
        assert cfg.protocol.fanout == 2
        assert cfg.topology.n == 5

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_config("/nonexistent/exp.json")


class TestFaultSchedule:
    """Seeded fuzz schedule."""

    def test_same_seed_same_schedule(self):
        cfg = get_preset("safety-fuzz")
        assert generate_fault_schedule(cfg, 3) == generate_fault_schedule(cfg, 3)
        assert generate_fault_schedule(cfg, 3) != generate_fault_schedule(cfg, 4)

    def test_crashes_paired_with_recovers(self):
        actions = generate_fault_schedule(get_preset("safety-fuzz"), 1)
        crashes = [a for a in actions if a.action == "crash"]
        assert 1 <= len(crashes) <= 3
        assert len([a for a in actions if a.action == "recover"]) == len(crashes)
        assert [a.time_us for a in actions] == sorted(a.time_us for a in actions)

    def test_disabled(self):
        assert generate_fault_schedule(get_preset("smoke"), 1) == []


class TestMain:
    """Exit codes of the command-line entry point."""

    def test_presets(self, capsys):
        assert main(["presets"]) == EXIT_OK
        assert "smoke" in capsys.readouterr().out

    def test_no_command(self):
        assert main([]) == EXIT_CONFIG

    def test_run_writes_tables(self, capsys):
        with tempfile.TemporaryDirectory() as tmp:
            code = main(["run", "--preset", "smoke", "--set", "duration_us=400000",
                         "--out", tmp, "--variant", "v2"])
            assert code == EXIT_OK
            assert (Path(tmp) / "summary.csv").exists()
        assert "| v2 | 1 | 0 |" in capsys.readouterr().out

    def test_bad_variant(self):
        with tempfile.TemporaryDirectory() as tmp:
            assert main(["run", "--variant", "raft9", "--out", tmp]) == EXIT_CONFIG

    def test_config_and_preset_together(self):
        assert main(["run", "--config", "x.json", "--preset", "smoke"]) == EXIT_CONFIG

    def test_check_written_trace(self):
        with tempfile.TemporaryDirectory() as tmp:
            assert main(["run", "--preset", "smoke", "--set", "duration_us=400000", "--out", tmp,
                         "--variant", "baseline", "--write-trace"]) == EXIT_OK
            traces = sorted((Path(tmp) / "traces").glob("*.jsonl"))
            assert len(traces) == 1
            assert main(["check", str(traces[0])]) == EXIT_OK

    def test_check_forged_violation(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.jsonl"
            lines = [
                {"schema": "epiraft-trace", "version": 1, "n": 3},
                {"seq": 0, "time": 0, "node": 0, "kind": "role", "role": "leader", "term": 1, "edge": 3},
                {"seq": 1, "time": 1, "node": 1, "kind": "role", "role": "leader", "term": 1, "edge": 3},
            ]
            path.write_text("\n".join(json.dumps(l) for l in lines) + "\n")
            assert main(["check", str(path)]) == EXIT_VIOLATION

    def test_check_unparseable(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.jsonl"
            path.write_text("not json\n")
            assert main(["check", str(path)]) == EXIT_RUNTIME

    def test_check_header_without_size(self, capsys):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.jsonl"
            path.write_text(json.dumps({"schema": "epiraft-trace", "version": 1}) + "\n")
            assert main(["check", str(path)]) == EXIT_RUNTIME
        assert "line 1" in capsys.readouterr().err

    def test_check_record_missing_field(self, capsys):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.jsonl"
            lines = [
                {"schema": "epiraft-trace", "version": 1, "n": 3},
                {"seq": 0, "time": 0, "node": 0, "kind": "commit"},
            ]
            path.write_text("\n".join(json.dumps(l) for l in lines) + "\n")
            assert main(["check", str(path)]) == EXIT_RUNTIME
        assert "line 2" in capsys.readouterr().err

    def test_oracle(self, capsys):
        assert main(["oracle", "--scripts", "20"]) == EXIT_OK
        assert capsys.readouterr().out.startswith("PASS 20 scripts")

    def test_oracle_size_limit(self):
        assert main(["oracle", "--scripts", "1", "--n", "7"]) == EXIT_CONFIG


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
