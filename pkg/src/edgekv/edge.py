"""Edge server: client RPC termination and the placement protocol.

Local-scope operations are replicated inside the node's own group (this
node proposes when it leads, otherwise it forwards to the leader). Global
operations go to the group's gateway and the reply is relayed back.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

from edgekv.command import ADD_LEARNER, DELETE, GLOBAL, LOCAL, PUT, SCOPES, Command
from edgekv.errors import InvalidArgument
from edgekv.raft import OK, REDIRECT, RaftConfig, RaftNode
from edgekv.storage import MemoryDisk, RaftStore, StorageEngine, validate_key_value

log = logging.getLogger(__name__)

LIN = "lin"
SER = "ser"
MODES = (LIN, SER)

RAFT_KINDS = frozenset({"RequestVote", "RequestVoteResp", "AppendEntries", "AppendEntriesResp"})
RETRY_AFTER_MS = 300


@dataclass
class EdgeConfig:
    group: str
    peers: list[str]
    gateway: str | None = None
    local_timeout_ms: float = 2000.0
    global_timeout_ms: float = 5000.0
    forward_timeout_ms: float = 1000.0
    snapshot_every: int = 1000
    fsync: bool = False
    raft: RaftConfig = field(default_factory=RaftConfig)


class EdgeNode:
    def __init__(self, endpoint, config: EdgeConfig,
                 disk_factory: Callable[[str], object] | None = None,
                 on_leader: Callable[[str, int, str], None] | None = None):
        if endpoint.address not in config.peers:
            raise InvalidArgument(f"{endpoint.address} is not in its group's peer list")
        self.ep = endpoint
        self.config = config
        self.group = config.group
        self.disk_factory = disk_factory or (lambda group: MemoryDisk())
        self.on_leader = on_leader
        self.instances: dict[str, RaftNode] = {}
        self.raft = self._instance(self.group, config.peers, learner=False)
        self._hint: str | None = None
        endpoint.handler = self.handle
        endpoint.response_handler = self._on_raft_response

    def _instance(self, group: str, voters: list[str], learner: bool) -> RaftNode:
        disk = self.disk_factory(group)
        node = RaftNode(self.ep, group, voters,
                        storage=StorageEngine(disk, self.config.snapshot_every, self.config.fsync),
                        raft_store=RaftStore(disk, self.config.fsync), learner=learner,
                        config=self.config.raft, on_leader=self.on_leader)
        self.instances[group] = node
        return node

    @property
    def storage(self) -> StorageEngine:
        return self.raft.storage

    @property
    def is_leader(self) -> bool:
        return self.raft.is_leader

    def stop(self) -> None:
        for inst in self.instances.values():
            inst.stop()

    def leader_hint(self) -> str | None:
        if self.raft.is_leader:
            return self.ep.address
        return self.raft.leader_hint or self._hint

    # -- dispatch ---------------------------------------------------------------------
    def handle(self, env, src: str) -> None:
        kind = env.kind
        if kind in RAFT_KINDS:
            group = env.payload["group"]
            inst = self.instances.get(group)
            if inst is None and kind == "AppendEntries":
                log.info("%s: hosting learner replica of group %s", self.ep.address, group)
                inst = self._instance(group, [], learner=True)
            if inst is not None:
                inst.handle(env, src)
        elif kind in ("ClientGet", "ClientPut", "ClientDelete"):
            self._client(env, src)
        elif kind == "GroupPropose":
            self._group_propose(env, src)
        elif kind == "GroupRead":
            self._group_read(env, src)
        elif kind == "Ping":
            self.ep.reply(src, env, "Pong", {"group": self.group, "members": self.config.peers})

    def _on_raft_response(self, env, src: str) -> None:
        if env.kind in RAFT_KINDS:
            inst = self.instances.get(env.payload["group"])
            if inst is not None:
                inst.handle(env, src)

    # -- client requests ------------------------------------------------------------------
    def _client(self, env, src: str) -> None:
        p = env.payload

        def respond(status: str, value: bytes | None = None, error: str | None = None):
            out = {"status": status}
            if value is not None:
                out["value"] = value
            if error:
                out["error"] = error
            if status not in ("ok", "not_found", "invalid_argument"):
                out["retryAfterMs"] = RETRY_AFTER_MS
            self.ep.reply(src, env, "ClientResponse", out)

        scope = p["scope"]
        try:
            if scope not in SCOPES:
                raise InvalidArgument(f"unknown scope {scope!r}")
            if env.kind == "ClientGet":
                if p["mode"] not in MODES:
                    raise InvalidArgument(f"unknown read mode {p['mode']!r}")
                validate_key_value(p["key"])
            elif env.kind == "ClientPut":
                validate_key_value(p["key"], p["value"])
            else:
                validate_key_value(p["key"])
        except InvalidArgument as exc:
            respond("invalid_argument", error=str(exc))
            return

        if scope == GLOBAL:
            self._to_gateway(env, respond)
        elif env.kind == "ClientGet":
            self.placement_read(LOCAL, p["key"], p["mode"], respond)
        else:
            cmd = Command(PUT if env.kind == "ClientPut" else DELETE, LOCAL, p["key"],
                          p.get("value"), p["requestId"])
            self.placement_write(cmd, respond)

    def _to_gateway(self, env, respond) -> None:
        gw = self.config.gateway
        if gw is None:
            respond("gateway_unavailable", error="no gateway configured")
            return
        p = env.payload
        if env.kind == "ClientGet":
            kind, payload = "GlobalGet", {"key": p["key"], "mode": p["mode"], "direct": False}
        elif env.kind == "ClientPut":
            kind, payload = "GlobalPut", {"key": p["key"], "value": p["value"],
                                          "requestId": p["requestId"], "direct": False}
        else:
            kind, payload = "GlobalDelete", {"key": p["key"], "requestId": p["requestId"],
                                             "direct": False}

        def on_resp(resp):
            if resp is None:
                respond("timeout", error="gateway did not answer")
                return
            r = resp.payload
            respond(r["status"], r.get("value"), r.get("error"))

        self.ep.request(gw, kind, payload, self.config.global_timeout_ms, on_resp)

    # -- placement ---------------------------------------------------------------------------------
    def placement_write(self, cmd: Command, respond, timeout_ms: float | None = None) -> None:
        """Replicate ``cmd`` in the local group, forwarding to the leader when needed."""
        deadline = self.ep.now() + (timeout_ms or self.config.local_timeout_ms)
        attempted = [False]

        def give_up():
            respond("timeout" if attempted[0] else "unavailable",
                    error="no quorum before the deadline")

        def attempt():
            remaining = deadline - self.ep.now()
            if remaining <= 0:
                give_up()
                return
            if self.raft.is_leader:
                attempted[0] = True

                def done(status, index):
                    if status == OK:
                        respond("ok")
                    else:
                        self.ep.call_later(min(50.0, remaining), attempt)

                self.raft.propose(cmd, done)
                return
            hint = self.leader_hint()
            if hint is None or hint == self.ep.address:
                self.ep.call_later(min(self.config.raft.election_min_ms / 2, remaining), attempt)
                return
            attempted[0] = True
            payload = {"group": self.group, "op": cmd.kind, "scope": cmd.scope, "key": cmd.key,
                       "requestId": cmd.request_id}
            if cmd.value is not None:
                payload["value"] = cmd.value
            self._forward(hint, "GroupPropose", payload, remaining, respond, attempt)

        attempt()

    def placement_read(self, scope: str, key: bytes, mode: str, respond,
                       timeout_ms: float | None = None) -> None:
        if mode == SER:
            value = self.raft.serializable_read(scope, key)
            respond("ok" if value is not None else "not_found", value)
            return
        deadline = self.ep.now() + (timeout_ms or self.config.local_timeout_ms)

        def attempt():
            remaining = deadline - self.ep.now()
            if remaining <= 0:
                respond("unavailable", error="no read quorum before the deadline")
                return
            if self.raft.is_leader:
                def done(status, index):
                    if status == OK:
                        value = self.raft.storage.read(scope, key)
                        respond("ok" if value is not None else "not_found", value)
                    else:
                        self.ep.call_later(min(50.0, remaining), attempt)

                self.raft.read_index(done)
                return
            hint = self.leader_hint()
            if hint is None or hint == self.ep.address:
                self.ep.call_later(min(self.config.raft.election_min_ms / 2, remaining), attempt)
                return
            self._forward(hint, "GroupRead", {"group": self.group, "scope": scope, "key": key,
                                              "mode": LIN}, remaining, respond, attempt)

        attempt()

    def _forward(self, leader: str, kind: str, payload: dict, remaining: float, respond,
                 retry) -> None:
        def on_resp(resp):
            if resp is None:
                if self._hint == leader:
                    self._hint = None
                retry()
                return
            r = resp.payload
            if r["status"] == REDIRECT:
                new = r.get("leaderHint")
                self._hint = new if new and new != leader else None
                self.ep.call_later(0 if self._hint else 20.0, retry)
            elif r["status"] in ("ok", "not_found"):
                respond(r["status"], r.get("value"))
            else:
                self.ep.call_later(50.0, retry)

        self.ep.request(leader, kind, payload, min(remaining, self.config.forward_timeout_ms),
                        on_resp)

    # -- group RPCs (from peers and the gateway) -------------------------------------------------
    def _group_reply(self, env, src, status, value=None, error=None):
        out = {"status": status}
        if value is not None:
            out["value"] = value
        if error:
            out["error"] = error
        if status == REDIRECT:
            hint = self.leader_hint()
            if hint and hint != self.ep.address:
                out["leaderHint"] = hint
        self.ep.reply(src, env, "GroupResponse", out)

    def _group_propose(self, env, src: str) -> None:
        p = env.payload
        if p["group"] != self.group:
            self._group_reply(env, src, "unavailable", error=f"not a member of {p['group']}")
            return
        if not self.raft.is_leader:
            self._group_reply(env, src, REDIRECT)
            return

        def done(status, index):
            self._group_reply(env, src, "ok" if status == OK else status)

        try:
            if p["op"] == ADD_LEARNER:
                self.raft.add_learner(p["key"].decode(), (p.get("value") or p["key"]).decode(),
                                      done)
                return
            if p["op"] == PUT:
                validate_key_value(p["key"], p.get("value"))
            elif p["op"] == DELETE:
                validate_key_value(p["key"])
            else:
                raise InvalidArgument(f"unknown op {p['op']!r}")
            cmd = Command(p["op"], p["scope"], p["key"], p.get("value") if p["op"] == PUT else None,
                          p["requestId"])
        except (InvalidArgument, ValueError) as exc:
            self._group_reply(env, src, "invalid_argument", error=str(exc))
            return
        self.raft.propose(cmd, done)

    def _group_read(self, env, src: str) -> None:
        p = env.payload
        inst = self.instances.get(p["group"])
        if inst is None:
            self._group_reply(env, src, "no_backup", error=f"no replica of {p['group']}")
            return
        scope, key = p["scope"], p["key"]
        if scope not in SCOPES:
            self._group_reply(env, src, "invalid_argument", error="bad scope")
            return
        if p["mode"] == SER or inst.is_learner:
            value = inst.serializable_read(scope, key)
            self._group_reply(env, src, "ok" if value is not None else "not_found", value)
            return
        if not inst.is_leader:
            self._group_reply(env, src, REDIRECT)
            return

        def done(status, index):
            if status == OK:
                value = inst.storage.read(scope, key)
                self._group_reply(env, src, "ok" if value is not None else "not_found", value)
            else:
                self._group_reply(env, src, "unavailable")

        inst.read_index(done)
