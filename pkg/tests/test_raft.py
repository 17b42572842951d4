import random

import pytest

from edgekv.command import LOCAL, PUT, Command, LogEntry
from edgekv.raft import (CANDIDATE, FOLLOWER, LEADER, LEARNER, OK, REDIRECT, TIMEOUT,
                         UNAVAILABLE, RaftNode, quorum)
from edgekv.storage import MemoryDisk, RaftStore, StorageEngine
from edgekv.transport import STORAGE, SimNetwork


class Group:
    """A bare Raft group on the simulator, plus optional learners."""

    def __init__(self, n=3, seed=0, learners=0):
        self.net = SimNetwork(seed=seed)
        self.voters = [f"n{i}" for i in range(n)]
        self.learner_ids = [f"l{i}" for i in range(learners)]
        self.disks = {a: MemoryDisk() for a in self.voters + self.learner_ids}
        self.nodes = {}
        self.leaders = []  # (term, id) every time someone wins an election
        for a in self.voters + self.learner_ids:
            self.start(a)

    def start(self, addr):
        ep = self.net.add(addr, STORAGE)
        disk = self.disks[addr]
        node = RaftNode(ep, "g", self.voters, storage=StorageEngine(disk),
                        raft_store=RaftStore(disk),
                        on_leader=lambda g, term, nid: self.leaders.append((term, nid)))
        ep.handler = node.handle
        ep.response_handler = node.handle
        self.nodes[addr] = node
        return node

    def crash(self, addr):
        self.nodes.pop(addr).stop()
        self.net.crash(addr)

    def restart(self, addr):
        del self.net.roles[addr]
        return self.start(addr)

    def leader(self):
        live = [n for n in self.nodes.values() if n.role == LEADER]
        if not live:
            return None
        return max(live, key=lambda n: n.current_term)

    def wait_leader(self, ms=3000):
        assert self.net.run_until(lambda: self.leader() is not None, ms)
        return self.leader()

    def propose(self, node, key, value, rid):
        out = []
        node.propose(Command(PUT, LOCAL, key, value, rid), lambda s, i: out.append((s, i)))
        return out


def _converged(group):
    leader = group.leader()
    return leader is not None and all(
        n.storage.applied_index == leader.commit_index for n in group.nodes.values())


def test_quorum_sizes():
    assert quorum(3) == 2
    assert quorum(5) == 3
    assert quorum(1) == 1


def test_single_leader_emerges():
    g = Group()
    leader = g.wait_leader()
    g.net.run_for(500)
    assert [n.role for n in g.nodes.values()].count(LEADER) == 1
    assert all(n.leader_hint == leader.id for n in g.nodes.values())


def test_five_voters_two_votes_stays_candidate():
    g = Group(n=5)
    for a in ["n2", "n3", "n4"]:
        g.crash(a)
    g.net.run_for(1000)
    assert all(n.role in (FOLLOWER, CANDIDATE) for n in g.nodes.values())
    assert not g.leaders


def test_request_vote_rules():
    g = Group()
    n = g.nodes["n0"]
    n.current_term = 5
    stale = n.handle_request_vote({"term": 3, "candidateId": "n1", "lastLogIndex": 0,
                                   "lastLogTerm": 0})
    assert stale["voteGranted"] is False and stale["term"] == 5
    fresh = n.handle_request_vote({"term": 6, "candidateId": "n1", "lastLogIndex": 0,
                                   "lastLogTerm": 0})
    assert fresh["voteGranted"] is True
    # already voted this term for someone else
    other = n.handle_request_vote({"term": 6, "candidateId": "n2", "lastLogIndex": 0,
                                   "lastLogTerm": 0})
    assert other["voteGranted"] is False
    # candidate log shorter in the same last term
    n.log = [LogEntry(6, 1, Command(PUT, LOCAL, b"k", b"v", "c:1")),
             LogEntry(6, 2, Command(PUT, LOCAL, b"k", b"v", "c:2"))]
    short = n.handle_request_vote({"term": 7, "candidateId": "n2", "lastLogIndex": 1,
                                   "lastLogTerm": 6})
    assert short["voteGranted"] is False


def _ae(term, prev, prev_term, entries=(), commit=0, leader="n1"):
    return {"group": "g", "term": term, "leaderId": leader, "prevLogIndex": prev,
            "prevLogTerm": prev_term, "entries": [e.to_wire() for e in entries],
            "leaderCommit": commit, "seq": 1}


def _e(term, index, value=b"v"):
    return LogEntry(term, index, Command(PUT, LOCAL, b"k", value, f"c:{term}-{index}"))


def test_append_entries_rules():
    g = Group()
    n = g.nodes["n0"]
    assert n.handle_append_entries(_ae(1, 0, 0))["success"]  # heartbeat
    assert n.leader_hint == "n1"
    miss = n.handle_append_entries(_ae(1, 5, 1))
    assert not miss["success"] and miss["matchIndex"] == 0
    assert n.handle_append_entries(_ae(1, 0, 0, [_e(1, 1), _e(1, 2, b"old")]))["success"]
    # conflicting entry at index 2 from a later term replaces the suffix
    r = n.handle_append_entries(_ae(2, 1, 1, [_e(2, 2, b"new")], commit=2))
    assert r["success"] and r["matchIndex"] == 2
    assert [e.term for e in n.log] == [1, 2]
    assert n.storage.read(LOCAL, b"k") == b"new"
    stale = n.handle_append_entries(_ae(1, 0, 0))
    assert not stale["success"] and stale["term"] == 2


def test_commit_with_all_live():
    g = Group()
    leader = g.wait_leader()
    out = g.propose(leader, b"k", b"v", "c:1")
    g.net.run_for(100)
    assert out and out[0][0] == OK
    assert g.net.run_until(lambda: _converged(g), 500)
    assert {n.storage.read(LOCAL, b"k") for n in g.nodes.values()} == {b"v"}


def test_commit_with_minority_down():
    g = Group()
    leader = g.wait_leader()
    g.crash(next(a for a in g.voters if a != leader.id))
    out = g.propose(leader, b"k", b"v", "c:1")
    g.net.run_for(100)
    assert out == [(OK, out[0][1])]


def test_no_commit_with_majority_down():
    g = Group()
    leader = g.wait_leader()
    for a in g.voters:
        if a != leader.id:
            g.crash(a)
    out = g.propose(leader, b"k", b"v", "c:1")
    g.net.run_for(2000)
    assert out == []
    assert leader.storage.read(LOCAL, b"k") is None


def test_follower_redirects():
    g = Group()
    leader = g.wait_leader()
    g.net.run_for(20)
    follower = next(n for n in g.nodes.values() if n is not leader)
    out = g.propose(follower, b"k", b"v", "c:1")
    assert out == [(REDIRECT, None)]
    assert follower.leader_hint == leader.id


def test_read_index_stable_leader():
    g = Group()
    leader = g.wait_leader()
    g.propose(leader, b"k", b"v", "c:1")
    g.net.run_for(50)
    got = []
    cause = g.net.new_cause()
    leader.read_index(lambda s, i: got.append((s, i)))
    g.net.run_for(10)
    assert got == [(OK, leader.commit_index)]
    # one round: an AppendEntries + response per follower, no log growth
    assert g.net.cause_counts[cause] == 4


def test_read_index_fails_on_partitioned_leader():
    g = Group()
    old = g.wait_leader()
    others = [a for a in g.voters if a != old.id]
    g.net.partition([old.id], others)
    got = []
    old.read_index(lambda s, i: got.append(s))
    g.net.run_for(1000)
    assert got == [UNAVAILABLE]
    # the majority side elects a new leader and can commit
    new = g.leader()
    assert new is not None and new.id != old.id and new.current_term > old.current_term


def test_pending_proposal_times_out_on_step_down():
    g = Group()
    old = g.wait_leader()
    others = [a for a in g.voters if a != old.id]
    g.net.partition([old.id], others)
    out = g.propose(old, b"k", b"lost", "c:1")
    g.net.run_for(1000)
    new = g.leader()
    g.propose(new, b"k", b"won", "c:2")
    g.net.heal()
    g.net.run_for(500)
    assert out == [(TIMEOUT, None)]
    assert old.role == FOLLOWER
    assert {n.storage.read(LOCAL, b"k") for n in g.nodes.values()} == {b"won"}


def test_learner_never_votes_and_converges():
    g = Group(learners=1)
    leader = g.wait_leader()
    assert g.nodes["l0"].role == LEARNER
    done = []
    leader.add_learner("l0", "l0", lambda s, i: done.append(s))
    for i in range(150):
        g.propose(leader, b"k%d" % i, b"v%d" % i, f"c:{i}")
    g.net.run_for(2000)
    assert done == [OK]
    assert leader.quorum_size == 2
    learner = g.nodes["l0"]
    assert learner.storage.state_hash() == leader.storage.state_hash()
    assert all(nid != "l0" for _, nid in g.leaders)
    # duplicate add is a no-op
    again = []
    leader.add_learner("l0", "l0", lambda s, i: again.append(s))
    assert again == [OK]
    # serializable read on the learner
    assert learner.serializable_read(LOCAL, b"k3") == b"v3"


def test_lagging_learner_returns_prefix_of_committed_history():
    g = Group(learners=1)
    leader = g.wait_leader()
    leader.add_learner("l0", "l0", lambda s, i: None)
    history = []
    for i in range(40):
        g.propose(leader, b"k", b"v%d" % i, f"c:{i}")
        history.append(b"v%d" % i)
        if i == 20:
            g.net.partition(["l0"], g.voters)
        g.net.run_for(20)
    seen = g.nodes["l0"].serializable_read(LOCAL, b"k")
    assert seen in history[:22]
    g.net.heal()
    g.net.run_for(1000)
    assert g.nodes["l0"].serializable_read(LOCAL, b"k") == history[-1]


def test_restart_recovers_log_and_state():
    g = Group()
    leader = g.wait_leader()
    for i in range(10):
        g.propose(leader, b"k%d" % i, b"v", f"c:{i}")
    g.net.run_for(500)
    victim = next(a for a in g.voters if a != leader.id)
    before = g.nodes[victim].storage.state_hash()
    g.crash(victim)
    g.net.run_for(100)
    node = g.restart(victim)
    assert node.storage.state_hash() == before
    g.net.run_for(500)
    assert node.storage.state_hash() == g.leader().storage.state_hash()


def test_split_vote_resolves_within_ten_timeouts():
    """Two simultaneous candidates; randomized timeouts pick one leader."""
    ok = 0
    for seed in range(100):
        g = Group(seed=seed)
        g.nodes["n0"].start_election()
        g.nodes["n1"].start_election()
        if g.net.run_until(lambda: g.leader() is not None, 10 * 300):
            g.net.run_for(300)
            terms = {}
            for term, nid in g.leaders:
                terms.setdefault(term, set()).add(nid)
            ok += all(len(v) == 1 for v in terms.values())
    assert ok >= 99


def _logs_match(nodes):
    for a in nodes:
        for b in nodes:
            for i in range(min(a.last_index, b.last_index), 0, -1):
                if a.term_at(i) == b.term_at(i):
                    assert a.log[:i] == b.log[:i]
                    break


@pytest.mark.parametrize("seed", range(20))
def test_fault_injection_safety(seed):
    rng = random.Random(seed)
    g = Group(seed=seed)
    results = {}
    for step in range(30):
        leader = g.leader()
        if leader is not None:
            for j in range(3):
                rid = f"c:{step}-{j}"
                leader.propose(Command(PUT, LOCAL, b"k%d" % j, rid.encode(), rid),
                               lambda s, i, rid=rid: results.setdefault(rid, s))
        fault = rng.random()
        live = sorted(g.nodes)
        if fault < 0.15 and len(live) == 3:
            g.crash(rng.choice(live))
        elif fault < 0.3 and len(live) < 3:
            g.restart(next(a for a in g.voters if a not in g.nodes))
        elif fault < 0.4:
            a = rng.choice(g.voters)
            g.net.partition([a], [b for b in g.voters if b != a])
        elif fault < 0.5:
            g.net.heal()
        g.net.run_for(rng.uniform(20, 300))
    g.net.heal()
    for a in g.voters:
        if a not in g.nodes:
            g.restart(a)
    assert g.net.run_until(lambda: _converged(g), 5000)
    g.net.run_for(200)
    terms = {}
    for term, nid in g.leaders:
        terms.setdefault(term, set()).add(nid)
    assert all(len(v) == 1 for v in terms.values()), terms
    nodes = list(g.nodes.values())
    _logs_match(nodes)
    assert len({n.storage.state_hash() for n in nodes}) == 1
    # every acknowledged write survived
    leader = g.leader()
    committed = {e.command.request_id for e in leader.log}
    assert all(rid in committed for rid, s in results.items() if s == OK)
