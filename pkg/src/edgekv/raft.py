"""Raft replication for one edge group, with non-voting learners.

A ``RaftNode`` is driven entirely by its endpoint: inbound RPCs arrive via
``handle`` and timers via ``Endpoint.call_later``. Node ids are the
endpoint addresses of the group members. Several ``RaftNode`` instances
may share one endpoint (a node's own group plus the groups it backs up);
the owning edge node routes by the ``group`` field.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

from edgekv.command import ADD_LEARNER, NOOP, Command, LogEntry
from edgekv.storage import RaftStore, StorageEngine

log = logging.getLogger(__name__)

FOLLOWER = "Follower"
CANDIDATE = "Candidate"
LEADER = "Leader"
LEARNER = "Learner"

# propose/read outcomes handed to callbacks
OK = "ok"
REDIRECT = "redirect"
UNAVAILABLE = "unavailable"
TIMEOUT = "timeout"


@dataclass
class RaftConfig:
    election_min_ms: float = 150.0
    election_max_ms: float = 300.0
    heartbeat_ms: float = 50.0
    read_timeout_ms: float = 600.0
    max_batch: int = 64


def quorum(voters: int) -> int:
    return voters // 2 + 1


@dataclass
class _Peer:
    address: str
    voter: bool
    next_index: int = 1
    match_index: int = 0
    sent_index: int = 0
    acked_seq: int = 0


@dataclass
class _Read:
    needed_seq: int
    index: int
    callback: Callable
    timer: object = None
    done: bool = False


class RaftNode:
    def __init__(self, endpoint, group: str, voters: list[str], *, storage: StorageEngine,
                 raft_store: RaftStore | None = None, learner: bool = False,
                 config: RaftConfig | None = None,
                 on_leader: Callable[[str, int, str], None] | None = None):
        self.ep = endpoint
        self.group = group
        self.id = endpoint.address
        self.voters = sorted(voters)
        self.config = config or RaftConfig()
        self.storage = storage
        self.store = raft_store if raft_store is not None else RaftStore()
        self.is_learner = learner or self.id not in self.voters
        self.on_leader = on_leader
        self.rng = endpoint.rng(f"raft/{group}")

        self.current_term, self.voted_for, self.log = self.store.load()
        self.commit_index = self.storage.applied_index
        self.role = LEARNER if self.is_learner else FOLLOWER
        self.leader_hint: str | None = None
        self.learners: dict[str, str] = {}
        self._scan_learners()

        self.peers: dict[str, _Peer] = {}
        self.votes: set[str] = set()
        self.seq = 0
        self._waiting: dict[int, tuple[int, Callable]] = {}
        self._reads: list[_Read] = []
        self._deferred_reads: list[_Read] = []
        self._election_timer = None
        self._heartbeat_timer = None
        self._flush_pending = False
        self._round_pending = False
        self._term_committed = False
        self.stopped = False
        if self.commit_index > len(self.log):
            raise ValueError("applied state is ahead of the persisted log")
        if not self.is_learner:
            self._reset_election_timer()

    # -- log helpers ----------------------------------------------------------------
    @property
    def last_index(self) -> int:
        return len(self.log)

    @property
    def last_term(self) -> int:
        return self.log[-1].term if self.log else 0

    def term_at(self, index: int) -> int:
        if index == 0:
            return 0
        return self.log[index - 1].term

    @property
    def is_leader(self) -> bool:
        return self.role == LEADER

    @property
    def quorum_size(self) -> int:
        return quorum(len(self.voters))

    def _scan_learners(self) -> None:
        self.learners = dict(self.storage.learners)
        for e in self.log:
            if e.command.kind == ADD_LEARNER:
                self.learners[e.command.key.decode()] = (e.command.value or b"").decode()

    def stop(self) -> None:
        self.stopped = True
        for t in (self._election_timer, self._heartbeat_timer):
            if t is not None:
                t.cancel()

    # -- timers -------------------------------------------------------------------------
    def _reset_election_timer(self) -> None:
        if self._election_timer is not None:
            self._election_timer.cancel()
        if self.is_learner or self.stopped:
            return
        delay = self.rng.uniform(self.config.election_min_ms, self.config.election_max_ms)
        self._election_timer = self.ep.call_later(delay, self._election_timeout, background=True)

    def _election_timeout(self) -> None:
        if self.role in (FOLLOWER, CANDIDATE) and not self.stopped:
            self.start_election()

    def _persist_state(self) -> None:
        self.store.save_state(self.current_term, self.voted_for)

    # -- elections ------------------------------------------------------------------------
    def start_election(self) -> None:
        self.role = CANDIDATE
        self.current_term += 1
        self.voted_for = self.id
        self.leader_hint = None
        self._persist_state()
        self.votes = {self.id}
        log.debug("%s/%s starts election for term %d", self.group, self.id, self.current_term)
        self._reset_election_timer()
        if len(self.votes) >= self.quorum_size:
            self._become_leader()
            return
        payload = {"group": self.group, "term": self.current_term, "candidateId": self.id,
                   "lastLogIndex": self.last_index, "lastLogTerm": self.last_term}
        for v in self.voters:
            if v != self.id:
                self.ep.send(v, "RequestVote", payload)

    def handle_request_vote(self, p: dict) -> dict:
        if p["term"] > self.current_term:
            self._step_down(p["term"])
        granted = False
        if (not self.is_learner and p["term"] == self.current_term
                and self.voted_for in (None, p["candidateId"])
                and (p["lastLogTerm"], p["lastLogIndex"]) >= (self.last_term, self.last_index)):
            granted = True
            self.voted_for = p["candidateId"]
            self._persist_state()
            self._reset_election_timer()
        return {"group": self.group, "term": self.current_term, "voteGranted": granted,
                "voter": self.id}

    def _on_vote(self, p: dict) -> None:
        if p["term"] > self.current_term:
            self._step_down(p["term"])
            return
        if self.role != CANDIDATE or p["term"] != self.current_term or not p["voteGranted"]:
            return
        if p["voter"] in self.voters:
            self.votes.add(p["voter"])
        if len(self.votes) >= self.quorum_size:
            self._become_leader()

    def _become_leader(self) -> None:
        self.role = LEADER
        self.leader_hint = self.id
        if self._election_timer is not None:
            self._election_timer.cancel()
        log.info("%s: %s is leader for term %d", self.group, self.id, self.current_term)
        self.peers = {}
        self._term_committed = False
        for v in self.voters:
            if v != self.id:
                self._add_peer(v, voter=True)
        for lid, addr in sorted(self.learners.items()):
            self._add_peer(addr, voter=False)
        if self.on_leader is not None:
            self.on_leader(self.group, self.current_term, self.id)
        # commit something from this term so reads and commits are safe
        self._append(Command(NOOP))
        self._heartbeat()

    def _add_peer(self, address: str, voter: bool) -> None:
        if address == self.id or address in self.peers:
            return
        last = self.last_index
        self.peers[address] = _Peer(address, voter, next_index=last + 1, sent_index=last)

    def _step_down(self, term: int) -> None:
        was_leader = self.role == LEADER
        if term > self.current_term:
            self.current_term = term
            self.voted_for = None
            self._persist_state()
        if not self.is_learner:
            self.role = FOLLOWER
        if was_leader:
            log.info("%s: %s steps down in term %d", self.group, self.id, self.current_term)
            if self._heartbeat_timer is not None:
                self._heartbeat_timer.cancel()
            self._fail_pending(TIMEOUT)
        self._reset_election_timer()

    def _fail_pending(self, status: str) -> None:
        waiting, self._waiting = self._waiting, {}
        for _, cb in waiting.values():
            cb(status, None)
        reads = self._reads + self._deferred_reads
        self._reads, self._deferred_reads = [], []
        for r in reads:
            self._finish_read(r, UNAVAILABLE)

    # -- replication (leader side) -----------------------------------------------------------
    def _append(self, cmd: Command) -> LogEntry:
        entry = LogEntry(self.current_term, self.last_index + 1, cmd)
        self.log.append(entry)
        self.store.append([entry])
        if cmd.kind == ADD_LEARNER:
            lid, addr = cmd.key.decode(), (cmd.value or b"").decode()
            self.learners[lid] = addr
            self._add_peer(addr, voter=False)
        self._advance_commit()
        return entry

    def _heartbeat(self) -> None:
        if self.role != LEADER or self.stopped:
            return
        self._broadcast(include_learners=True)
        self._heartbeat_timer = self.ep.call_later(self.config.heartbeat_ms, self._heartbeat,
                                                   background=True)

    def _schedule_flush(self) -> None:
        if not self._flush_pending:
            self._flush_pending = True
            self.ep.call_later(0, self._flush)

    def _flush(self) -> None:
        self._flush_pending = False
        if self.role == LEADER:
            self._broadcast(include_learners=False)

    def _broadcast(self, include_learners: bool) -> None:
        self.seq += 1
        for peer in self.peers.values():
            if peer.voter or include_learners:
                self._send_append(peer)

    def _send_append(self, peer: _Peer) -> None:
        prev = peer.sent_index
        hi = min(self.last_index, prev + self.config.max_batch)
        entries = [e.to_wire() for e in self.log[prev:hi]]
        self.ep.send(peer.address, "AppendEntries", {
            "group": self.group, "term": self.current_term, "leaderId": self.id,
            "prevLogIndex": prev, "prevLogTerm": self.term_at(prev), "entries": entries,
            "leaderCommit": self.commit_index, "seq": self.seq})
        peer.sent_index = hi

    def _on_append_resp(self, p: dict) -> None:
        if p["term"] > self.current_term:
            self._step_down(p["term"])
            return
        if self.role != LEADER or p["term"] != self.current_term:
            return
        peer = self.peers.get(p["follower"])
        if peer is None:
            return
        peer.acked_seq = max(peer.acked_seq, p["seq"])
        if p["success"]:
            if p["matchIndex"] > peer.match_index:
                peer.match_index = p["matchIndex"]
                peer.next_index = max(peer.next_index, peer.match_index + 1)
                if peer.voter:
                    self._advance_commit()
            # a lagging peer keeps receiving batches until it has caught up
            if peer.sent_index < self.last_index and peer.match_index >= peer.sent_index:
                self._send_append(peer)
        else:
            hint = max(peer.match_index, min(p["matchIndex"], self.last_index))
            if hint < peer.sent_index:
                peer.next_index = hint + 1
                peer.sent_index = hint
                self._send_append(peer)
        self._check_reads()

    def _advance_commit(self) -> None:
        if self.role != LEADER:
            return
        matches = sorted([self.last_index] + [p.match_index for p in self.peers.values()
                                               if p.voter], reverse=True)
        n = matches[self.quorum_size - 1]
        if n > self.commit_index and self.term_at(n) == self.current_term:
            self.commit_index = n
            self._term_committed = True
            self._apply()
            if self._deferred_reads:
                deferred, self._deferred_reads = self._deferred_reads, []
                for r in deferred:
                    self._register_read(r)

    def _apply(self) -> None:
        while self.storage.applied_index < self.commit_index:
            entry = self.log[self.storage.applied_index]
            self.storage.apply(entry)
            waiter = self._waiting.pop(entry.index, None)
            if waiter is not None:
                term, cb = waiter
                cb(OK if term == entry.term else TIMEOUT, entry.index)

    # -- replication (follower side) ---------------------------------------------------------
    def handle_append_entries(self, p: dict) -> dict:
        def reply(success: bool, match: int) -> dict:
            return {"group": self.group, "term": self.current_term, "success": success,
                    "matchIndex": match, "lastLogIndex": self.last_index, "seq": p["seq"],
                    "follower": self.id}

        if p["term"] < self.current_term:
            return reply(False, self.last_index)
        if p["term"] > self.current_term or self.role in (CANDIDATE, LEADER):
            self._step_down(p["term"])
        self.leader_hint = p["leaderId"]
        self._reset_election_timer()
        prev = p["prevLogIndex"]
        if prev > self.last_index:
            return reply(False, self.last_index)
        if self.term_at(prev) != p["prevLogTerm"]:
            return reply(False, prev - 1)
        new = [LogEntry.from_wire(e) for e in p["entries"]]
        appended = []
        for entry in new:
            if entry.index <= self.last_index:
                if self.term_at(entry.index) == entry.term:
                    continue
                if entry.index <= self.commit_index:
                    raise AssertionError("leader tried to overwrite a committed entry")
                del self.log[entry.index - 1:]
                self.store.truncate_from(entry.index)
                self._scan_learners()
            self.log.append(entry)
            appended.append(entry)
            if entry.command.kind == ADD_LEARNER:
                self.learners[entry.command.key.decode()] = (entry.command.value or b"").decode()
        self.store.append(appended)
        match = prev + len(new)
        if p["leaderCommit"] > self.commit_index:
            self.commit_index = min(p["leaderCommit"], match)
            self._apply()
        return reply(True, match)

    # -- message entry point -------------------------------------------------------------------
    def handle(self, env, src: str) -> None:
        if self.stopped:
            return
        p = env.payload
        if env.kind == "RequestVote":
            self.ep.reply(src, env, "RequestVoteResp", self.handle_request_vote(p))
        elif env.kind == "AppendEntries":
            self.ep.reply(src, env, "AppendEntriesResp", self.handle_append_entries(p))
        elif env.kind == "RequestVoteResp":
            self._on_vote(p)
        elif env.kind == "AppendEntriesResp":
            self._on_append_resp(p)

    # -- client-facing API -----------------------------------------------------------------------
    def propose(self, cmd: Command, callback: Callable[[str, int | None], None]) -> None:
        """Replicate ``cmd``; ``callback(status, index)`` once applied or failed.

        ``status`` is ``ok``, ``redirect`` (not leader, see ``leader_hint``)
        or ``timeout`` (leadership lost; the entry may still commit).
        """
        if self.role != LEADER:
            callback(REDIRECT, None)
            return
        entry = self._append(cmd)
        if entry.index <= self.commit_index:
            callback(OK, entry.index)
        else:
            self._waiting[entry.index] = (entry.term, callback)
            self._schedule_flush()

    def add_learner(self, learner_id: str, address: str,
                    callback: Callable[[str, int | None], None]) -> None:
        if learner_id in self.learners:
            callback(OK, None)
            return
        self.propose(Command(ADD_LEARNER, key=learner_id.encode(), value=address.encode()),
                     callback)

    def read_index(self, callback: Callable[[str, int | None], None]) -> None:
        """Confirm leadership with a quorum, then ``callback(ok, index)`` once applied."""
        if self.role != LEADER:
            callback(REDIRECT, None)
            return
        r = _Read(0, 0, callback)
        r.timer = self.ep.call_later(self.config.read_timeout_ms, self._finish_read, r, UNAVAILABLE)
        if self._term_committed:
            self._register_read(r)
        else:
            self._deferred_reads.append(r)

    def _register_read(self, r: _Read) -> None:
        r.index = self.commit_index
        r.needed_seq = self.seq + 1
        self._reads.append(r)
        if self.quorum_size == 1:
            self._check_reads()
        else:
            self._schedule_round()

    def _schedule_round(self) -> None:
        if not self._round_pending:
            self._round_pending = True
            self.ep.call_later(0, self._read_round)

    def _read_round(self) -> None:
        self._round_pending = False
        if self.role == LEADER and any(r.needed_seq > self.seq for r in self._reads):
            self._broadcast(include_learners=False)

    def _check_reads(self) -> None:
        if not self._reads:
            return
        acks = sorted([self.seq] + [p.acked_seq for p in self.peers.values() if p.voter],
                      reverse=True)
        confirmed = acks[self.quorum_size - 1]
        keep = []
        for r in self._reads:
            if r.needed_seq <= confirmed and self.storage.applied_index >= r.index:
                self._finish_read(r, OK)
            else:
                keep.append(r)
        self._reads = keep

    def _finish_read(self, r: _Read, status: str) -> None:
        if r.done:
            return
        r.done = True
        if r.timer is not None:
            r.timer.cancel()
        if status != OK:
            if r in self._reads:
                self._reads.remove(r)
            if r in self._deferred_reads:
                self._deferred_reads.remove(r)
        r.callback(status, r.index if status == OK else None)

    def serializable_read(self, scope: str, key: bytes) -> bytes | None:
        return self.storage.read(scope, key)
