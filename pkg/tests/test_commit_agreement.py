# Commit Agreement Tests
# SPDX-License-Identifier: AGPL-3.0

"""
Tests for Bitmap / MaxCommit / NextCommit:
1. update and merge against hand-worked cases
2. own-bit and commit-index rules
3. term reset
4. nextCommit > maxCommit over randomized call sequences
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from epiraft import commit_agreement as ca
from epiraft.commit_agreement import CommitState
from epiraft.protocol_types import AppendEntriesMsg, LogEntry, ReplicatedLog, str_to_bits


def _log(*terms):
    return ReplicatedLog(LogEntry(t) for t in terms)


def _state(bits, mc, nc, self_id=0):
    return CommitState(n=len(bits), self_id=self_id, bitmap=list(str_to_bits(bits)),
                       max_commit=mc, next_commit=nc)


class TestUpdate:
    """Majority rule on the bitmap."""

    def test_majority_jumps_to_last_index(self):
        cs = _state("11100", mc=4, nc=7, self_id=2)
        assert ca.update(cs, _log(*[2] * 9), current_term=2)
        assert (cs.max_commit, cs.next_commit) == (7, 9)
        assert cs.bitstring() == "00100"

    def test_below_majority(self):
        cs = _state("11000", mc=4, nc=7)
        assert not ca.update(cs, _log(*[2] * 9), current_term=2)
        assert cs.snapshot() == ("11000", 4, 7)

    def test_next_commit_at_last_index(self):
        cs = _state("11100", mc=4, nc=7)
        assert ca.update(cs, _log(*[2] * 7), current_term=2)
        assert cs.snapshot() == ("00000", 7, 8)

    def test_old_term_tail_steps_by_one(self):
        cs = _state("11100", mc=4, nc=7)
        ca.update(cs, _log(*[1] * 9), current_term=2)
        assert cs.snapshot() == ("00000", 7, 8)


class TestMerge:
    """Combining received fields."""

    def test_or_branch_only(self):
        cs = _state("10000", mc=3, nc=5)
        assert ca.merge(cs, str_to_bits("01000"), 3, 5)
        assert cs.snapshot() == ("11000", 3, 5)

    def test_both_branches(self):
        cs = _state("10000", mc=3, nc=5)
        ca.merge(cs, str_to_bits("00100"), 6, 7)
        assert cs.snapshot() == ("00100", 6, 7)

    def test_idempotent_on_self(self):
        cs = _state("10100", mc=3, nc=5)
        assert not ca.merge(cs, tuple(cs.bitmap), cs.max_commit, cs.next_commit)
        assert cs.snapshot() == ("10100", 3, 5)

    def test_older_vote_is_ignored(self):
        cs = _state("10000", mc=3, nc=6)
        assert not ca.merge(cs, str_to_bits("01100"), 2, 4)
        assert cs.snapshot() == ("10000", 3, 6)

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            ca.merge(_state("100", 0, 1), (1, 0), 0, 1)


class TestSubsumes:
    """subsumes() answers exactly when merge() would be a no-op."""

    def test_older_vote(self):
        assert ca.subsumes(_state("10000", mc=3, nc=6), str_to_bits("01100"), 2, 4)

    def test_new_bit(self):
        assert not ca.subsumes(_state("10000", mc=3, nc=5), str_to_bits("01000"), 3, 5)

    def test_newer_decision(self):
        assert not ca.subsumes(_state("10000", mc=3, nc=5), str_to_bits("00000"), 4, 5)

    def test_wrong_length(self):
        assert not ca.subsumes(_state("100", 0, 1), (1, 0), 0, 1)

    def test_matches_merge(self):
        rng = np.random.default_rng(11)
        for _ in range(2000):
            n = int(rng.integers(2, 7))
            mc = int(rng.integers(0, 6))
            cs = CommitState(n=n, self_id=0, bitmap=[int(b) for b in rng.integers(0, 2, n)],
                             max_commit=mc, next_commit=mc + int(rng.integers(1, 4)))
            bits = tuple(int(b) for b in rng.integers(0, 2, n))
            m = int(rng.integers(0, 8))
            nc = m + int(rng.integers(1, 4))
            predicted = ca.subsumes(cs, bits, m, nc)
            assert ca.merge(cs, bits, m, nc) is not predicted


class TestMergeProperties:
    """Order-independent facts about merge; merge itself is receiver-oriented."""

    def test_max_commit_is_running_max(self):
        rng = np.random.default_rng(12)
        for _ in range(500):
            cs = CommitState.fresh(4, 0)
            seen = 0
            for _ in range(20):
                m = int(rng.integers(0, 10))
                bits = tuple(int(b) for b in rng.integers(0, 2, 4))
                ca.merge(cs, bits, m, m + int(rng.integers(1, 3)))
                seen = max(seen, m)
                assert cs.max_commit == seen

    def test_not_commutative(self):
        a, b = _state("100", mc=0, nc=2), _state("010", mc=0, nc=1)
        ab = _state("100", mc=0, nc=2)
        ca.merge(ab, tuple(b.bitmap), b.max_commit, b.next_commit)
        ba = _state("010", mc=0, nc=1)
        ca.merge(ba, tuple(a.bitmap), a.max_commit, a.next_commit)
        assert ab.snapshot() == ("100", 0, 2)
        assert ba.snapshot() == ("110", 0, 1)

    @pytest.mark.parametrize("n,length", [(3, 1), (5, 4), (7, 9)])
    def test_all_pairs_exchange_converges(self, n, length):
        logs = [_log(*[1] * length) for _ in range(n)]
        states = [CommitState.fresh(n, pid) for pid in range(n)]
        for pid in range(n):
            ca.settle(states[pid], logs[pid], 1)
        for _ in range(4):
            for i in range(n):
                for j in range(n):
                    if i != j:
                        ca.merge(states[i], *ca.attach_fields(states[j]))
                        ca.settle(states[i], logs[i], 1)
        assert {cs.snapshot() for cs in states} == {("0" * n, length, length + 1)}
        assert all(ca.follower_commit_index(cs, logs[0], 1, 0) == length for cs in states)


class TestOwnBitAndCommitIndex:
    """Own-bit rule and the commitIndex bound."""

    def test_bit_set_when_holding_next_commit(self):
        cs = _state("00000", mc=4, nc=5, self_id=3)
        assert ca.try_set_own_bit(cs, _log(*[2] * 7), current_term=2)
        assert cs.bitstring() == "00010"

    def test_entry_absent(self):
        cs = _state("00000", mc=3, nc=5)
        assert not ca.try_set_own_bit(cs, _log(*[2] * 4), current_term=2)

    def test_tail_from_older_term(self):
        cs = _state("00000", mc=3, nc=5)
        assert not ca.try_set_own_bit(cs, _log(*[1] * 7), current_term=2)

    def test_commit_bounded_by_last_index(self):
        cs = _state("00000", mc=7, nc=8)
        assert ca.follower_commit_index(cs, _log(*[2] * 5), 2, 0) == 5

    def test_commit_bounded_by_max_commit(self):
        cs = _state("00000", mc=7, nc=8)
        assert ca.follower_commit_index(cs, _log(*[2] * 9), 2, 0) == 7

    def test_commit_needs_current_term_tail(self):
        cs = _state("00000", mc=7, nc=8)
        assert ca.follower_commit_index(cs, _log(*[1] * 9), 2, 3) == 3


class TestTermReset:
    def test_reset(self):
        cs = _state("10110", mc=7, nc=12)
        ca.reset_on_term_change(cs)
        assert cs.snapshot() == ("00000", 7, 8)
        ca.reset_on_term_change(cs)
        assert cs.snapshot() == ("00000", 7, 8)

    def test_fresh_state(self):
        cs = CommitState.fresh(3, 1)
        ca.reset_on_term_change(cs)
        assert cs.snapshot() == ("000", 0, 1)


class TestAbsorb:
    """Receive pipeline."""

    def _msg(self, fields):
        return AppendEntriesMsg(2, 0, 0, 0, is_gossip=True, round_lc=1).with_commit_fields(fields)

    def test_majority_in_message_advances_locally(self):
        log = _log(*[2] * 6)
        cs = _state("00000", mc=0, nc=6, self_id=4)
        changed, commit = ca.absorb_fields(cs, self._msg((str_to_bits("11100"), 0, 6)), log, 2, 0)
        assert changed
        assert cs.max_commit == 6
        assert commit == 6

    def test_stale_fields_change_nothing(self):
        log = _log(*[2] * 6)
        cs = _state("00001", mc=6, nc=7, self_id=4)
        changed, commit = ca.absorb_fields(cs, self._msg((str_to_bits("11000"), 2, 3)), log, 2, 6)
        assert not changed
        assert commit == 6
        assert cs.snapshot() == ("00001", 6, 7)

    def test_leader_reuses_follower_rule(self):
        log = _log(*[3] * 4)
        cs = _state("01100", mc=2, nc=4, self_id=0)
        _, commit = ca.absorb_fields(cs, None, log, 3, 0)
        assert commit == ca.follower_commit_index(cs, log, 3, 0) == 4


class TestInvariant:
    """nextCommit stays above maxCommit under random call sequences."""

    def test_random_sequences(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            n = int(rng.integers(2, 8))
            states = [CommitState.fresh(n, pid) for pid in range(n)]
            logs = [ReplicatedLog() for _ in range(n)]
            term = 1
            for _ in range(80):
                pid = int(rng.integers(0, n))
                roll = rng.random()
                if roll < 0.3:
                    logs[pid].append(LogEntry(term))
                    ca.settle(states[pid], logs[pid], term)
                elif roll < 0.9:
                    other = states[int(rng.integers(0, n))]
                    ca.merge(states[pid], tuple(other.bitmap), other.max_commit, other.next_commit)
                    ca.settle(states[pid], logs[pid], term)
                else:
                    term += 1
                    ca.reset_on_term_change(states[pid])
                for cs in states:
                    assert cs.next_commit > cs.max_commit


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
