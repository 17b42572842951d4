"""Seeded fault-injection runs of one consensus group, checked for safety.

Each run drives concurrent linearizable reads and writes over a few keys while
the leader is crashed and, separately, cut off from its followers. Afterwards
the faults are healed and three properties are checked: the client history is
linearizable, no term had two leaders, and every replica ends with the same
state hash.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field

from edgekv.cluster import GET, PUT, ClusterSpec, SimCluster
from edgekv.command import LOCAL
from edgekv.edge import LIN
from edgekv.history import CheckResult, check_history

log = logging.getLogger(__name__)

GROUP = "g0"


@dataclass
class SafetyConfig:
    ops: int = 500
    keys: int = 4
    sessions: int = 4           # concurrent sessions per client
    clients: int = 2
    read_fraction: float = 0.5
    read_mode: str = LIN
    max_ms: float = 120_000.0


@dataclass
class SafetyResult:
    seed: int
    ops: int
    completed: int
    linearizable: CheckResult
    dual_leader_terms: list = field(default_factory=list)
    hashes: dict = field(default_factory=dict)
    faults: list = field(default_factory=list)

    @property
    def hashes_equal(self) -> bool:
        return len(set(self.hashes.values())) == 1

    @property
    def ok(self) -> bool:
        return (self.linearizable.ok and not self.dual_leader_terms and self.hashes_equal
                and self.completed == self.ops)


def run_once(seed: int, config: SafetyConfig | None = None) -> SafetyResult:
    cfg = config or SafetyConfig()
    rng = random.Random(f"safety/{seed}")
    cluster = SimCluster(ClusterSpec(groups=[GROUP], clients_per_group=cfg.clients,
                                     backups=False), seed=seed)
    cluster.start()
    net = cluster.net
    members = cluster.members[GROUP]
    faults: list[str] = []
    crashed: list[str] = []

    def crash_leader():
        leader = cluster.leader_of(GROUP)
        if leader is None:
            net.call_later(None, 50, crash_leader)
            return
        addr = leader.ep.address
        faults.append(f"{net.now():.1f} crash {addr}")
        cluster.crash(addr)
        crashed.append(addr)
        net.call_later(None, rng.uniform(300, 1500), restart)

    def restart():
        if not crashed:
            return
        addr = crashed.pop()
        faults.append(f"{net.now():.1f} restart {addr}")
        cluster.restart(addr)

    def partition_leader():
        leader = cluster.leader_of(GROUP)
        if leader is None:
            net.call_later(None, 50, partition_leader)  # mid-election: try again shortly
            return
        addr = leader.ep.address
        faults.append(f"{net.now():.1f} partition {addr}")
        net.partition([addr], [m for m in members if m != addr])
        net.call_later(None, rng.uniform(300, 1500), heal)

    def heal():
        faults.append(f"{net.now():.1f} heal")
        net.heal()

    # faults land while the workload is running
    net.call_later(None, rng.uniform(20, 400), crash_leader)
    net.call_later(None, rng.uniform(500, 2500), partition_leader)

    keys = [f"k{i}".encode() for i in range(cfg.keys)]
    issued = [0]
    done = [0]
    clients = list(cluster.clients)
    version = [0]

    def next_op(client: str, session: int, _rec=None):
        if _rec is not None:
            done[0] += 1
        if issued[0] >= cfg.ops:
            return
        issued[0] += 1
        key = rng.choice(keys)
        cb = lambda rec, c=client, s=session: next_op(c, s, rec)  # noqa: E731
        if rng.random() < cfg.read_fraction:
            cluster.clients[client].submit(GET, LOCAL, key, mode=cfg.read_mode, session=session,
                                           callback=cb)
        else:
            version[0] += 1
            value = f"{client}/{session}/{version[0]}".encode()
            cluster.clients[client].submit(PUT, LOCAL, key, value, session=session, callback=cb)

    for c in clients:
        for s in range(cfg.sessions):
            next_op(c, s)

    def partitioned():
        return any(" partition " in f for f in faults)

    net.run_until(lambda: done[0] >= issued[0] >= cfg.ops and partitioned(), cfg.max_ms,
                  poll_ms=10)
    faults.append(f"{net.now():.1f} workload done")

    # heal everything and let the replicas catch up
    net.heal()
    while crashed:
        restart()

    def caught_up():
        nodes = [cluster.nodes[a] for a in members if a in cluster.nodes]
        leader = cluster.leader_of(GROUP)
        if leader is None or len(nodes) != len(members):
            return False
        target = leader.raft.commit_index
        return all(n.storage.applied_index >= target for n in nodes) and \
            len(set(cluster.state_hashes(GROUP).values())) == 1

    net.run_until(caught_up, 30_000, poll_ms=50)
    history = cluster.history()
    return SafetyResult(seed, cfg.ops, done[0], check_history(history),
                        cluster.dual_leader_terms(), cluster.state_hashes(GROUP), faults)


def run_many(seeds, config: SafetyConfig | None = None) -> list[SafetyResult]:
    results = []
    for seed in seeds:
        res = run_once(seed, config)
        if not res.ok:
            log.error("seed %d unsafe: lin=%s dual=%s hashes=%s faults=%s", seed,
                      res.linearizable.ok, res.dual_leader_terms, res.hashes, res.faults)
        results.append(res)
    return results


__all__ = ["SafetyConfig", "SafetyResult", "run_once", "run_many"]
