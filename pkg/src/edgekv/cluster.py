"""In-process simulated deployments: edge groups, gateways and clients on one clock."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable

from edgekv.chord import OverlayConfig, converged
from edgekv.command import GLOBAL, LOCAL
from edgekv.edge import LIN, EdgeConfig, EdgeNode
from edgekv.errors import ConfigError
from edgekv.gateway import Gateway, GatewayConfig
from edgekv.history import OpRecord
from edgekv.raft import RaftConfig
from edgekv.storage import MemoryDisk
from edgekv.transport import (CLIENT, EDGE, GATEWAY, GW_GW, STORAGE, SimNetwork,
                              TopologyProfile)

log = logging.getLogger(__name__)

RETRYABLE = ("timeout", "unavailable")

GET = "get"
PUT = "put"
DELETE = "delete"
_KINDS = {GET: "ClientGet", PUT: "ClientPut", DELETE: "ClientDelete"}


def node_address(group: str, i: int) -> str:
    return f"{group}-n{i}"


def gateway_address(group: str) -> str:
    return f"{group}-gw"


# -- client --------------------------------------------------------------------------------

@dataclass
class ClientConfig:
    request_timeout_ms: float = 6000.0   # per attempt; above the edge's own deadlines
    deadline_ms: float = 12000.0         # whole operation, across retries
    retry: bool = True


class Client:
    """A client host running many logical sessions against its group's edge nodes.

    Writes carry a stable ``<client>/<session>:<seq>`` request id, so a retry
    after a lost reply is deduplicated by the group.
    """

    def __init__(self, endpoint, edges: list[str], config: ClientConfig | None = None):
        if not edges:
            raise ConfigError("a client needs at least one edge node")
        self.ep = endpoint
        self.edges = list(edges)
        self.config = config or ClientConfig()
        self.preferred = 0
        self.history: list[OpRecord] = []
        self._seq: dict[int, itertools.count] = {}
        endpoint.handler = lambda env, src: None

    def request_id(self, session: int) -> str:
        counter = self._seq.setdefault(session, itertools.count(1))
        return f"{self.ep.address}/{session}:{next(counter)}"

    def submit(self, op: str, scope: str, key: bytes, value: bytes | None = None, *,
               mode: str = LIN, session: int = 0,
               callback: Callable[[OpRecord], None] | None = None) -> None:
        kind = _KINDS[op]
        payload: dict = {"scope": scope, "key": key}
        rid = ""
        if op == GET:
            payload["mode"] = mode
        else:
            rid = self.request_id(session)
            payload["requestId"] = rid
            if op == PUT:
                payload["value"] = value
        start = self.ep.now()
        deadline = start + self.config.deadline_ms
        attempts = [0]

        def finish(status: str, result: bytes | None) -> None:
            rec = OpRecord(self.ep.address, session, op, scope, key,
                           result if op == GET else value, start, self.ep.now(), status, rid,
                           attempts[0])
            self.history.append(rec)
            if callback is not None:
                callback(rec)

        def attempt() -> None:
            attempts[0] += 1
            target = self.edges[self.preferred % len(self.edges)]
            timeout = min(self.config.request_timeout_ms, max(1.0, deadline - self.ep.now()))

            def on_resp(env):
                if env is None:
                    # edge node unreachable: fail over to the next one in the group
                    self.preferred += 1
                    status, result = "timeout", None
                else:
                    status, result = env.payload["status"], env.payload.get("value")
                retry_in = 0.0 if env is None else env.payload.get("retryAfterMs", 0)
                if (self.config.retry and status in RETRYABLE
                        and self.ep.now() + retry_in < deadline):
                    self.ep.call_later(retry_in, attempt)
                    return
                finish(status, result)

            self.ep.request(target, kind, payload, timeout, on_resp)

        attempt()


# -- cluster -----------------------------------------------------------------------------------

@dataclass
class ClusterSpec:
    groups: list[str] = field(default_factory=lambda: ["g0", "g1", "g2"])
    group_size: int | list[int] = 3
    clients_per_group: int = 1
    vnodes: int | list[int] = 1
    m: int = 64
    cache_capacity: int = 1024
    backups: bool = True
    service_ms: float = 0.0
    raft: RaftConfig = field(default_factory=RaftConfig)
    client: ClientConfig = field(default_factory=ClientConfig)
    local_timeout_ms: float = 2000.0
    global_timeout_ms: float = 5000.0

    def size_of(self, i: int) -> int:
        if isinstance(self.group_size, int):
            return self.group_size
        return self.group_size[i]

    def vnodes_of(self, i: int) -> int:
        if isinstance(self.vnodes, int):
            return self.vnodes
        return self.vnodes[i] if i < len(self.vnodes) else 1


class SimCluster:
    """Edge groups with gateways on a simulated network, plus client hosts."""

    def __init__(self, spec: ClusterSpec | None = None, *, profile: TopologyProfile = EDGE,
                 seed: int = 0, record_trace: bool = False):
        self.spec = spec or ClusterSpec()
        if not self.spec.groups:
            raise ConfigError("at least one group is required")
        self.net = SimNetwork(profile, seed, service_ms=self.spec.service_ms,
                              record_trace=record_trace)
        self.members: dict[str, list[str]] = {}
        self.nodes: dict[str, EdgeNode] = {}
        self.gateways: dict[str, Gateway] = {}
        self.clients: dict[str, Client] = {}
        self.client_group: dict[str, str] = {}
        self.disks: dict[tuple[str, str], MemoryDisk] = {}
        self.leaders: dict[tuple[str, int], set[str]] = {}
        self.last_cause = 0
        self.groups = list(self.spec.groups)
        for i, g in enumerate(self.groups):
            self.members[g] = [node_address(g, k) for k in range(self.spec.size_of(i))]
        for g in self.groups:
            for addr in self.members[g]:
                self._start_node(g, addr)
            for c in range(self.spec.clients_per_group):
                self.add_client(f"{g}-c{c}", g)
        first = self.groups[0]
        for g in self.groups:
            self._start_gateway(g, None if g == first else gateway_address(first))

    # -- construction ------------------------------------------------------------------------
    def _disk(self, addr: str, group: str) -> MemoryDisk:
        return self.disks.setdefault((addr, group), MemoryDisk())

    def _on_leader(self, group: str, term: int, node_id: str) -> None:
        self.leaders.setdefault((group, term), set()).add(node_id)

    def _start_node(self, group: str, addr: str) -> EdgeNode:
        ep = self.net.add(addr, STORAGE)
        cfg = EdgeConfig(group, self.members[group], gateway_address(group),
                         local_timeout_ms=self.spec.local_timeout_ms,
                         global_timeout_ms=self.spec.global_timeout_ms, raft=self.spec.raft)
        node = EdgeNode(ep, cfg, lambda grp, addr=addr: self._disk(addr, grp), self._on_leader)
        self.nodes[addr] = node
        return node

    def _overlay_rpc_ms(self) -> float:
        # a stabilize round trip must fit, with room for queueing, on slow WAN profiles
        one_way = self.net.profile.links[GW_GW].latency_ms
        return max(OverlayConfig.stabilize_ms, 4 * one_way)

    def _start_gateway(self, group: str, bootstrap: str | None) -> Gateway:
        ep = self.net.add(gateway_address(group), GATEWAY)
        cfg = GatewayConfig(group, self.members[group],
                            vnodes=self.spec.vnodes_of(self.groups.index(group)),
                            cache_capacity=self.spec.cache_capacity, bootstrap=bootstrap,
                            overlay=OverlayConfig(m=self.spec.m, rpc_timeout_ms=self._overlay_rpc_ms()))
        gw = Gateway(ep, cfg)
        if not self.spec.backups:
            gw.assign_backup_group = lambda callback=None: None
        self.gateways[group] = gw
        gw.start()
        return gw

    def add_group(self, group: str, size: int = 3, clients: int = 1) -> None:
        """Start a new group and join its gateway to the running overlay."""
        if group in self.members:
            raise ConfigError(f"group {group!r} already exists")
        self.members[group] = [node_address(group, k) for k in range(size)]
        self.groups.append(group)
        for addr in self.members[group]:
            self._start_node(group, addr)
        for c in range(clients):
            self.add_client(f"{group}-c{c}", group)
        live = next(gw.ep.address for gw in self.gateways.values())
        self._start_gateway(group, live)

    def add_client(self, name: str, group: str, edges: list[str] | None = None) -> Client:
        ep = self.net.add(name, CLIENT)
        client = Client(ep, edges or self.members[group], self.spec.client)
        self.clients[name] = client
        self.client_group[name] = group
        return client

    # -- readiness -----------------------------------------------------------------------------------
    def leader_of(self, group: str) -> EdgeNode | None:
        live = [self.nodes[a] for a in self.members[group]
                if a in self.nodes and self.net.is_up(a) and self.nodes[a].is_leader]
        if not live:
            return None
        return max(live, key=lambda n: n.raft.current_term)

    def overlay_converged(self) -> bool:
        ovs = [gw.overlay for gw in self.gateways.values() if self.net.is_up(gw.ep.address)]
        return converged(ovs)

    def backups_ready(self) -> bool:
        if not self.spec.backups or len(self.groups) < 2:
            return True
        for g, gw in self.gateways.items():
            if gw.backup is None:
                return False
            want = set(self.members[gw.backup.physical])
            if not want <= gw.learners_added:
                return False
        return True

    def ready(self) -> bool:
        return (all(self.leader_of(g) is not None for g in self.groups)
                and all(gw.joined for gw in self.gateways.values())
                and self.overlay_converged() and self.backups_ready())

    def start(self, max_ms: float = 60_000) -> float:
        """Run until leaders, overlay and backups are in place; returns elapsed sim ms."""
        t0 = self.net.now()
        if not self.net.run_until(self.ready, max_ms, poll_ms=50):
            raise ConfigError("cluster did not become ready in time")
        return self.net.now() - t0

    # -- faults --------------------------------------------------------------------------------------
    def crash(self, addr: str) -> None:
        if addr in self.nodes:
            self.nodes.pop(addr).stop()
        else:
            for g, gw in list(self.gateways.items()):
                if gw.ep.address == addr:
                    gw.stop()
                    del self.gateways[g]
        self.net.crash(addr)

    def restart(self, addr: str) -> EdgeNode:
        """Bring an edge node back with the disks it had when it crashed."""
        group = next(g for g, ms in self.members.items() if addr in ms)
        del self.net.roles[addr]
        return self._start_node(group, addr)

    def group_nodes(self, group: str) -> list[str]:
        return self.members[group] + [gateway_address(group)]

    # -- operations ------------------------------------------------------------------------------
    def op(self, client: str, op: str, scope: str, key: bytes, value: bytes | None = None, *,
           mode: str = LIN, session: int = 0, max_ms: float = 30_000) -> OpRecord:
        """Issue one operation and run the clock until it completes."""
        out: list[OpRecord] = []
        self.last_cause = self.net.new_cause()
        self.clients[client].submit(op, scope, key, value, mode=mode, session=session,
                                    callback=out.append)
        self.net.run_until(lambda: out, max_ms)
        if not out:
            raise TimeoutError(f"{op} {key!r} did not complete within {max_ms} ms")
        return out[0]

    def put(self, client, key, value, scope=LOCAL, **kw) -> OpRecord:
        return self.op(client, PUT, scope, key, value, **kw)

    def get(self, client, key, scope=LOCAL, **kw) -> OpRecord:
        return self.op(client, GET, scope, key, **kw)

    def delete(self, client, key, scope=LOCAL, **kw) -> OpRecord:
        return self.op(client, DELETE, scope, key, **kw)

    def history(self) -> list[OpRecord]:
        return [r for c in self.clients.values() for r in c.history]

    # -- inspection ---------------------------------------------------------------------------------
    def global_owner(self, key: bytes) -> str:
        """Group owning ``key`` per the converged ring (oracle, not the protocol)."""
        from edgekv.chord import oracle_successor, ring_refs
        from edgekv.ring import hash_id
        refs = ring_refs([gw.overlay for gw in self.gateways.values()])
        target = oracle_successor([r.id for r in refs], hash_id(key, self.spec.m), self.spec.m)
        return next(r.physical for r in refs if r.id == target)

    def dual_leader_terms(self) -> list[tuple[str, int]]:
        return sorted(k for k, v in self.leaders.items() if len(v) > 1)

    def state_hashes(self, group: str) -> dict[str, str]:
        return {a: self.nodes[a].storage.state_hash() for a in self.members[group]
                if a in self.nodes}


__all__ = ["Client", "ClientConfig", "ClusterSpec", "SimCluster", "GLOBAL", "LOCAL",
           "GET", "PUT", "DELETE", "node_address", "gateway_address"]
