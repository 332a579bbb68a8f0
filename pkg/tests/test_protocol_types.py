# Protocol Types Tests
# SPDX-License-Identifier: AGPL-3.0

"""
Tests for the log, message validation and the canonical wire encoding.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from epiraft.protocol_types import (
    AppendEntriesMsg,
    AppendEntriesReply,
    ClientReply,
    ClientRequest,
    LogEntry,
    ReplicatedLog,
    ReplyStatus,
    RequestVoteMsg,
    RequestVoteReply,
    Variant,
    bits_to_str,
    canonical_json,
    decode_message,
    encode_message,
    str_to_bits,
    validate_append_entries,
)


def _log(*terms):
    return ReplicatedLog(LogEntry(t, f"c{i}".encode()) for i, t in enumerate(terms))


class TestReplicatedLog:
    """1-indexed log with a sentinel."""

    def test_empty_log(self):
        log = ReplicatedLog()
        assert log.last_index == 0
        assert log.last_term == 0
        assert log.term_at(0) == 0
        assert log.term_at(1) is None

    def test_append_returns_index(self):
        log = _log(1, 1)
        assert log.append(LogEntry(2, b"x")) == 3
        assert log.terms() == [1, 1, 2]

    def test_append_rejects_term_regression(self):
        log = _log(1, 3)
        with pytest.raises(ValueError):
            log.append(LogEntry(2, b"x"))

    def test_truncate_keeps_sentinel(self):
        log = _log(1, 1, 2)
        log.truncate_from(2)
        assert log.terms() == [1]
        with pytest.raises(ValueError):
            log.truncate_from(0)

    def test_entries_from_bounds(self):
        log = _log(1, 2, 2, 3)
        assert [e.term for e in log.entries_from(2)] == [2, 2, 3]
        assert [e.term for e in log.entries_from(2, 3)] == [2, 2]
        assert log.entries_from(5) == ()

    def test_up_to_date_term_dominates(self):
        log = _log(3)
        assert log.is_up_to_date(3, 7)
        assert not log.is_up_to_date(2, 9)

    def test_reconcile_appends_missing_suffix(self):
        log = _log(1, 1)
        change = log.reconcile(2, (LogEntry(2, b"x"),))
        assert change.start == 3 and change.truncated_from is None
        assert log.terms() == [1, 1, 2]

    def test_reconcile_truncates_conflict(self):
        log = _log(1, 1, 1)
        change = log.reconcile(1, (LogEntry(2, b"a"), LogEntry(2, b"b")))
        assert change.truncated_from == 2
        assert log.terms() == [1, 2, 2]

    def test_reconcile_duplicate_is_noop(self):
        log = _log(1, 2)
        entries = log.entries_from(1)
        assert log.reconcile(0, entries) is None
        assert log.terms() == [1, 2]

    def test_digest_depends_on_term_and_command(self):
        assert LogEntry(1, b"a").digest == LogEntry(1, b"a").digest
        assert LogEntry(1, b"a").digest != LogEntry(2, b"a").digest
        assert len(LogEntry(1, b"a").digest) == 16


class TestValidateAppendEntries:
    """Structural checks on AppendEntries."""

    def _msg(self, **kw):
        base = dict(term=3, leader_id=0, prev_log_index=2, prev_log_term=1)
        base.update(kw)
        return AppendEntriesMsg(**base)

    def test_v2_message_ok(self):
        msg = self._msg(is_gossip=True, round_lc=1, bitmap=(1, 0, 0, 0, 0), max_commit=2, next_commit=3)
        assert validate_append_entries(msg, 5, Variant.V2) is None

    def test_v1_with_bitmap(self):
        msg = self._msg(is_gossip=True, bitmap=(0, 0, 0, 0, 0), max_commit=0, next_commit=1)
        assert validate_append_entries(msg, 5, Variant.V1) == "unexpected V2 field"

    def test_non_monotone_terms(self):
        msg = self._msg(prev_log_term=2, entries=(LogEntry(1, b"x"),))
        assert validate_append_entries(msg, 5) == "non-monotone terms"

    def test_partial_fields(self):
        msg = self._msg(bitmap=(0, 0, 0), max_commit=None, next_commit=None)
        assert validate_append_entries(msg, 3) == "partial V2 fields"

    def test_missing_v2_field(self):
        assert validate_append_entries(self._msg(), 5, "v2") == "missing V2 field"

    def test_bitmap_length(self):
        msg = self._msg(bitmap=(0, 0, 0), max_commit=0, next_commit=1)
        assert validate_append_entries(msg, 5).startswith("bitmap length")

    def test_next_commit_not_above_max(self):
        msg = self._msg(bitmap=(0, 0, 0), max_commit=4, next_commit=4)
        assert validate_append_entries(msg, 3) == "nextCommit not above maxCommit"

    def test_leader_out_of_range(self):
        assert validate_append_entries(self._msg(leader_id=7), 5) == "leaderId out of range"

    def test_baseline_gossip_flag(self):
        assert validate_append_entries(self._msg(is_gossip=True), 5, Variant.BASELINE) == "unexpected gossip flag"


class TestEncoding:
    """Canonical JSON encoding of wire records."""

    def test_documented_field_names(self):
        msg = AppendEntriesMsg(2, 1, 4, 2, (LogEntry(2, b"\x01"),), 3, True, 5, (1, 0, 1), 3, 4)
        data = encode_message(msg)
        assert list(data) == ["type", "term", "leaderId", "prevLogIndex", "prevLogTerm", "entries",
                              "leaderCommit", "isGossip", "roundLC", "bitmap", "maxCommit", "nextCommit"]
        assert data["bitmap"] == "101"
        assert data["entries"] == [[2, "01"]]

    def test_decode_inverts_encode(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            n = int(rng.integers(2, 8))
            bits = tuple(int(b) for b in rng.integers(0, 2, n))
            mc = int(rng.integers(0, 20))
            messages = [
                AppendEntriesMsg(int(rng.integers(1, 9)), int(rng.integers(0, n)), mc, 1,
                                 (LogEntry(9, rng.bytes(4)),), mc, True, int(rng.integers(0, 50)),
                                 bits, mc, mc + 1),
                AppendEntriesReply(3, bool(rng.integers(0, 2)), 1, mc, bits, mc, mc + 2),
                RequestVoteMsg(4, 2, mc, 3),
                RequestVoteReply(4, False, 1),
                ClientRequest(1, mc, rng.bytes(8)),
                ClientReply(1, mc, ReplyStatus.REDIRECT, None, 2),
            ]
            for msg in messages:
                assert decode_message(encode_message(msg)) == msg

    def test_canonical_json_is_compact(self):
        text = canonical_json(encode_message(RequestVoteReply(1, True, 0)))
        assert text == '{"type":"RequestVoteReply","term":1,"voteGranted":true,"voterId":0}'

    def test_unknown_type(self):
        with pytest.raises(ValueError):
            decode_message({"type": "Nope"})

    def test_bits_helpers(self):
        assert bits_to_str((1, 0, 1)) == "101"
        assert str_to_bits("011") == (0, 1, 1)
        with pytest.raises(ValueError):
            str_to_bits("012")


class TestVariant:
    def test_parse_aliases(self):
        assert Variant.parse("Raft") is Variant.BASELINE
        assert Variant.parse(" V2 ") is Variant.V2
        with pytest.raises(ValueError):
            Variant.parse("v3")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
