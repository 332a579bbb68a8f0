# Gossip Engine Tests
# SPDX-License-Identifier: AGPL-3.0

"""
Tests for the permutation walk, leader rounds and the first-receipt rule.
"""

import sys
from collections import Counter
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from epiraft.commit_agreement import CommitState
from epiraft.gossip_engine import (
    PermutationWalker,
    gossip_round,
    leader_start_round,
    new_walker,
    on_gossip_receive,
)
from epiraft.protocol_types import AppendEntriesMsg, AppendEntriesReply, LogEntry, ReplicatedLog
from epiraft.raft_core import NodeState, Role


def _gossip(term=1, round_lc=1):
    return AppendEntriesMsg(term, 0, 0, 0, is_gossip=True, round_lc=round_lc)


class TestWalker:
    """Seeded permutation of the other processes."""

    def test_two_nodes(self):
        walker = new_walker(2, 0, seed=1)
        assert walker.order == [1]
        assert walker.fanout == 1

    def test_same_seed_same_order(self):
        assert new_walker(9, 4, seed=[3, 1]).order == new_walker(9, 4, seed=[3, 1]).order

    def test_excludes_self(self):
        walker = new_walker(7, 3, seed=2)
        assert sorted(walker.order) == [0, 1, 2, 4, 5, 6]

    def test_first_peer_roughly_uniform(self):
        firsts = Counter(new_walker(5, 0, seed=s).order[0] for s in range(10_000))
        expected = 10_000 / 4
        chi2 = sum((firsts[p] - expected) ** 2 / expected for p in (1, 2, 3, 4))
        # 3 degrees of freedom, p = 0.0001
        assert chi2 < 21.11

    def test_invalid_fanout(self):
        with pytest.raises(ValueError):
            PermutationWalker(order=[1, 2], fanout=3)


class TestRound:
    """Circular walk F peers at a time."""

    def test_walk_wraps(self):
        walker = PermutationWalker(order=[2, 3, 1], fanout=2)
        msg = _gossip()
        assert [d for d, _ in gossip_round(walker, msg)] == [2, 3]
        assert walker.cursor == 2
        assert [d for d, _ in gossip_round(walker, msg)] == [1, 2]
        assert walker.cursor == 4

    def test_full_fanout_is_broadcast(self):
        walker = new_walker(6, 0, seed=4, fanout=5)
        for _ in range(3):
            assert sorted(d for d, _ in gossip_round(walker, _gossip())) == [1, 2, 3, 4, 5]

    @pytest.mark.parametrize("n,fanout,seed", [(5, 1, 1), (5, 3, 2), (21, 3, 3), (21, 4, 4), (51, 4, 5)])
    def test_consecutive_rounds_cover_every_peer(self, n, fanout, seed):
        walker = new_walker(n, 0, seed=seed, fanout=fanout)
        rounds = -(-(n - 1) // fanout)
        targets = set()
        for _ in range(rounds):
            targets.update(d for d, _ in gossip_round(walker, _gossip()))
        assert targets == set(range(1, n))



class TestLeaderRound:
    """Leader rounds carry the uncommitted suffix."""

    def _leader(self, last, commit, v2=False):
        state = NodeState(id=0, n=5, role=Role.LEADER, current_term=2,
                          log=ReplicatedLog(LogEntry(2, bytes([i])) for i in range(last)),
                          commit_index=commit)
        state.gossip.reset(2)
        if v2:
            state.commit_state = CommitState.fresh(5, 0)
        return state

    def test_uncommitted_batch(self):
        state = self._leader(last=6, commit=3)
        sends = leader_start_round(state, new_walker(5, 0, seed=1), now=0)
        msg = sends[0][1]
        assert len(sends) == 3
        assert msg.prev_log_index == 3 and msg.prev_log_term == 2
        assert [e.command for e in msg.entries] == [bytes([3]), bytes([4]), bytes([5])]
        assert msg.is_gossip and msg.leader_commit == 3

    def test_heartbeat_round(self):
        state = self._leader(last=4, commit=4)
        sends = leader_start_round(state, new_walker(5, 0, seed=1), now=0)
        assert sends[0][1].entries == ()

    def test_round_counter_increases(self):
        state = self._leader(last=2, commit=0)
        walker = new_walker(5, 0, seed=1)
        first = leader_start_round(state, walker, 0)[0][1].round_lc
        second = leader_start_round(state, walker, 10)[0][1].round_lc
        assert second > first

    def test_v2_round_carries_fields(self):
        state = self._leader(last=2, commit=0, v2=True)
        msg = leader_start_round(state, new_walker(5, 0, seed=1), 0)[0][1]
        assert msg.has_commit_fields
        assert msg.bitmap == (0, 0, 0, 0, 0)


class TestFirstReceipt:
    """Fresh rounds are delivered, answered and relayed once."""

    def _follower(self, term=1, seen=0):
        state = NodeState(id=1, n=5, current_term=term)
        state.gossip.reset(term)
        state.gossip.round_lc = seen
        return state

    def _deliver(self, msg):
        return AppendEntriesReply(msg.term, True, 1, 0)

    def test_fresh_round(self):
        state = self._follower(seen=4)
        outcome = on_gossip_receive(state, new_walker(5, 1, seed=1), _gossip(round_lc=5), self._deliver)
        assert outcome.deliver
        assert outcome.reply is not None
        assert len(outcome.relays) == 3
        assert state.gossip.round_lc == 5

    def test_duplicate_dropped(self):
        state = self._follower(seen=5)
        calls = []
        outcome = on_gossip_receive(state, new_walker(5, 1, seed=1), _gossip(round_lc=5),
                                    lambda m: calls.append(m))
        assert not outcome.deliver
        assert outcome.reply is None and outcome.relays == []
        assert calls == []

    def test_newer_term_resets_seen(self):
        state = self._follower(term=1, seen=9)
        state.current_term = 2
        outcome = on_gossip_receive(state, new_walker(5, 1, seed=1), _gossip(term=2, round_lc=1), self._deliver)
        assert outcome.deliver
        assert (state.gossip.term, state.gossip.round_lc) == (2, 1)

    def test_relay_disabled(self):
        state = self._follower()
        outcome = on_gossip_receive(state, new_walker(5, 1, seed=1), _gossip(round_lc=1), self._deliver,
                                    relay=False)
        assert outcome.deliver and outcome.relays == []


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
