"""YCSB-style workloads: key generators, load and run phases, sweeps, reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import random
import statistics
from dataclasses import dataclass, field
from typing import Callable

from edgekv.cluster import GET, PUT, ClusterSpec, SimCluster
from edgekv.command import GLOBAL, LOCAL
from edgekv.edge import LIN
from edgekv.errors import ConfigError, EdgeKVError
from edgekv.transport import ms_to_ticks, profile_from_config

log = logging.getLogger(__name__)

UNIFORM = "uniform"
HOTSPOT = "hotspot"
LATEST = "latest"
DISTRIBUTIONS = (UNIFORM, HOTSPOT, LATEST)
MAX_ERROR_RATE = 0.01


@dataclass
class WorkloadSpec:
    record_count: int = 10_000
    operation_count: int = 10_000        # per client
    read_proportion: float = 0.5
    update_proportion: float = 0.5
    distribution: str = UNIFORM
    hotspot_data_fraction: float = 0.2
    hotspot_op_fraction: float = 0.8
    latest_skew: float = 0.99
    global_proportion: float = 0.0
    clients: int = 3
    threads_per_client: int = 100
    value_size: int = 1024
    seed: int = 0

    def __post_init__(self):
        if not math.isclose(self.read_proportion + self.update_proportion, 1.0):
            raise ConfigError("read and update proportions must sum to 1")
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigError(f"unknown distribution {self.distribution!r}")
        if not 0.0 <= self.global_proportion <= 1.0:
            raise ConfigError("global proportion must be within [0, 1]")
        if self.record_count < 0 or self.operation_count < 0:
            raise ConfigError("counts must be non-negative")
        if self.clients < 1 or self.threads_per_client < 1:
            raise ConfigError("need at least one client and one thread")

    @classmethod
    def from_dict(cls, d: dict) -> WorkloadSpec:
        """From a workload file (camelCase keys); snake_case field names are accepted too."""
        if not isinstance(d, dict):
            raise ConfigError("workload must be a JSON object")
        kw = {}
        for key, value in d.items():
            name = WORKLOAD_KEYS.get(key, key)
            if name not in cls.__dataclass_fields__:
                raise ConfigError(f"unknown workload field {key!r}")
            kw[name] = value
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(f"bad workload: {exc}") from exc

    def to_dict(self) -> dict:
        names = {v: k for k, v in WORKLOAD_KEYS.items()}
        return {names[f]: getattr(self, f) for f in self.__dataclass_fields__}


WORKLOAD_KEYS = {
    "recordCount": "record_count", "operationCount": "operation_count",
    "readProportion": "read_proportion", "updateProportion": "update_proportion",
    "distribution": "distribution", "hotspotDataFraction": "hotspot_data_fraction",
    "hotspotOpFraction": "hotspot_op_fraction", "latestSkew": "latest_skew",
    "globalProportion": "global_proportion", "clients": "clients",
    "threadsPerClient": "threads_per_client", "valueSizeBytes": "value_size", "seed": "seed",
}


# -- key generators ----------------------------------------------------------------------------

def key_name(i: int) -> bytes:
    return f"user{i:08d}".encode()


class UniformGenerator:
    def __init__(self, n: int, rng: random.Random):
        self.n, self.rng = n, rng

    def next(self) -> int:
        return self.rng.randrange(self.n)


class HotspotGenerator:
    """``op_fraction`` of draws land in the first ``data_fraction`` of the key space."""

    def __init__(self, n: int, rng: random.Random, data_fraction: float = 0.2,
                 op_fraction: float = 0.8):
        self.n, self.rng = n, rng
        self.hot = max(1, int(n * data_fraction))
        self.op_fraction = op_fraction

    def is_hot(self, i: int) -> bool:
        return i < self.hot

    def next(self) -> int:
        if self.hot >= self.n or self.rng.random() < self.op_fraction:
            return self.rng.randrange(self.hot)
        return self.hot + self.rng.randrange(self.n - self.hot)


class ZipfianGenerator:
    """Zipfian ranks in [0, n) with the closed-form sampler YCSB uses."""

    def __init__(self, n: int, rng: random.Random, theta: float = 0.99):
        self.n, self.rng, self.theta = n, rng, theta
        self.zetan = sum(1.0 / (i ** theta) for i in range(1, n + 1))
        zeta2 = 1.0 + 0.5 ** theta
        self.alpha = 1.0 / (1.0 - theta)
        self.eta = (1 - (2.0 / n) ** (1 - theta)) / (1 - zeta2 / self.zetan) if n > 1 else 0.0

    def next(self) -> int:
        u = self.rng.random()
        uz = u * self.zetan
        if uz < 1.0:
            return 0
        if uz < 1.0 + 0.5 ** self.theta:
            return 1
        return min(self.n - 1, int(self.n * (self.eta * u - self.eta + 1) ** self.alpha))


class LatestGenerator:
    """Recently inserted keys are the most popular: zipfian over insertion recency."""

    def __init__(self, n: int, rng: random.Random, skew: float = 0.99):
        self.n = n
        self.zipf = ZipfianGenerator(n, rng, skew)

    def next(self) -> int:
        return self.n - 1 - self.zipf.next()


def make_generator(spec: WorkloadSpec, rng: random.Random):
    n = max(1, spec.record_count)
    if spec.distribution == UNIFORM:
        return UniformGenerator(n, rng)
    if spec.distribution == HOTSPOT:
        return HotspotGenerator(n, rng, spec.hotspot_data_fraction, spec.hotspot_op_fraction)
    return LatestGenerator(n, rng, spec.latest_skew)


def value_for(key: bytes, size: int, version: int = 0) -> bytes:
    stem = key + b":" + str(version).encode() + b":"
    return (stem * (size // len(stem) + 1))[:size]


@dataclass
class Op:
    kind: str
    scope: str
    key: bytes


class OpStream:
    """Per-thread operation sequence; a pure function of (spec, client, thread)."""

    def __init__(self, spec: WorkloadSpec, client: str, thread: int):
        self.spec = spec
        self.rng = random.Random(f"{spec.seed}/{client}/{thread}")
        self.keys = make_generator(spec, random.Random(f"{spec.seed}/{client}/{thread}/keys"))
        self.version = 0

    def next(self) -> Op:
        kind = GET if self.rng.random() < self.spec.read_proportion else PUT
        scope = GLOBAL if self.rng.random() < self.spec.global_proportion else LOCAL
        return Op(kind, scope, key_name(self.keys.next()))


# -- reports ------------------------------------------------------------------------------------

def percentile(values: list[float], q: float) -> float:
    if not values:
        return float("nan")
    ordered = sorted(values)
    k = max(0, math.ceil(q / 100 * len(ordered)) - 1)
    return ordered[k]


@dataclass
class BenchReport:
    latencies: dict[str, list[float]] = field(default_factory=dict)   # "<op>/<scope>" -> ms
    per_client_ops: dict[str, int] = field(default_factory=dict)
    per_client_ms: dict[str, float] = field(default_factory=dict)
    errors: int = 0
    ops: int = 0
    messages: int = 0
    gateway_messages: int = 0
    hops: list[int] = field(default_factory=list)
    issued: int = 0
    elapsed_ms: float = 0.0

    def add(self, op: str, scope: str, latency: float) -> None:
        self.latencies.setdefault(f"{op}/{scope}", []).append(latency)

    def _pool(self, op: str | None = None, scope: str | None = None) -> list[float]:
        out = []
        for k, v in sorted(self.latencies.items()):
            o, s = k.split("/")
            if (op is None or o == op) and (scope is None or s == scope):
                out.extend(v)
        return out

    def mean(self, op: str | None = None, scope: str | None = None) -> float:
        pool = self._pool(op, scope)
        return statistics.fmean(pool) if pool else float("nan")

    def pct(self, q: float, op: str | None = None, scope: str | None = None) -> float:
        return percentile(self._pool(op, scope), q)

    @property
    def write_mean(self) -> float:
        return self.mean(PUT)

    @property
    def read_mean(self) -> float:
        return self.mean(GET)

    @property
    def throughput(self) -> float:
        """Ops/s computed per client, then averaged over clients."""
        rates = [self.per_client_ops[c] / (self.per_client_ms[c] / 1000.0)
                 for c in sorted(self.per_client_ops) if self.per_client_ms.get(c)]
        return statistics.fmean(rates) if rates else 0.0

    @property
    def error_rate(self) -> float:
        return self.errors / self.ops if self.ops else 0.0

    @property
    def failed(self) -> bool:
        return self.error_rate > MAX_ERROR_RATE

    def summary(self) -> dict:
        def r(x):
            return None if isinstance(x, float) and math.isnan(x) else round(x, 4)

        return {
            "ops": self.ops, "errors": self.errors, "error_rate": r(self.error_rate),
            "failed": self.failed, "throughput_ops_s": r(self.throughput),
            "mean_ms": r(self.mean()), "p50_ms": r(self.pct(50)), "p99_ms": r(self.pct(99)),
            "read_mean_ms": r(self.read_mean), "write_mean_ms": r(self.write_mean),
            "local_write_mean_ms": r(self.mean(PUT, LOCAL)),
            "global_write_mean_ms": r(self.mean(PUT, GLOBAL)),
            "local_read_mean_ms": r(self.mean(GET, LOCAL)),
            "global_read_mean_ms": r(self.mean(GET, GLOBAL)),
            "messages": self.messages, "gateway_messages": self.gateway_messages,
            "mean_hops": r(statistics.fmean(self.hops)) if self.hops else None,
        }


class LoadAborted(EdgeKVError):
    def __init__(self, message: str, inserted: int, failed: int):
        super().__init__(message)
        self.inserted = inserted
        self.failed = failed


# -- phases --------------------------------------------------------------------------------------

def client_names(cluster: SimCluster, spec: WorkloadSpec) -> list[str]:
    names = sorted(cluster.clients)
    if len(names) < spec.clients:
        raise ConfigError(f"workload wants {spec.clients} clients, cluster has {len(names)}")
    # spread clients over groups: g0-c0, g1-c0, ..., g0-c1, ...
    names.sort(key=lambda n: (int(n.rsplit("-c", 1)[1]), n))
    return names[:spec.clients]


def _drive(cluster: SimCluster, jobs: dict[str, list], threads: int, on_done: Callable,
           max_ms: float) -> None:
    """Closed loop: ``threads`` sessions per client, each issuing its client's jobs in turn."""
    remaining = [sum(len(v) for v in jobs.values())]
    cursors = {c: iter(v) for c, v in jobs.items()}

    def launch(client: str, session: int) -> None:
        job = next(cursors[client], None)
        if job is None:
            return
        op, scope, key, value = job

        def done(rec):
            remaining[0] -= 1
            on_done(client, rec)
            launch(client, session)

        cluster.clients[client].submit(op, scope, key, value, mode=LIN, session=session,
                                       callback=done)

    for client in sorted(jobs):
        for s in range(threads):
            launch(client, s)
    if not cluster.net.run_until(lambda: remaining[0] == 0, max_ms, poll_ms=10):
        raise EdgeKVError(f"{remaining[0]} operations still outstanding after {max_ms} ms")


def load_phase(cluster: SimCluster, spec: WorkloadSpec, max_ms: float = 3_600_000) -> int:
    """Insert every record twice: into each client's local store and once globally."""
    if spec.record_count == 0:
        return 0
    clients = client_names(cluster, spec)
    groups_done: set[str] = set()
    jobs: dict[str, list] = {c: [] for c in clients}
    for c in clients:
        g = cluster.client_group[c]
        if g in groups_done:
            continue
        groups_done.add(g)
        for i in range(spec.record_count):
            k = key_name(i)
            jobs[c].append((PUT, LOCAL, k, value_for(k, spec.value_size)))
    for i in range(spec.record_count):
        k = key_name(i)
        jobs[clients[i % len(clients)]].append((PUT, GLOBAL, k, value_for(k, spec.value_size)))
    stats = {"ok": 0, "failed": 0}

    def on_done(client, rec):
        stats["ok" if rec.status == "ok" else "failed"] += 1

    _drive(cluster, jobs, spec.threads_per_client, on_done, max_ms)
    if stats["failed"]:
        raise LoadAborted(f"{stats['failed']} inserts failed", stats["ok"], stats["failed"])
    return stats["ok"]


def run_phase(cluster: SimCluster, spec: WorkloadSpec, max_ms: float = 3_600_000) -> BenchReport:
    clients = client_names(cluster, spec)
    report = BenchReport()
    jobs: dict[str, list] = {}
    threads = spec.threads_per_client
    for c in clients:
        streams = [OpStream(spec, c, t) for t in range(threads)]
        seq = []
        for n in range(spec.operation_count):
            s = streams[n % threads]
            op = s.next()
            value = None
            if op.kind == PUT:
                s.version += 1
                value = value_for(op.key, spec.value_size, s.version)
            seq.append((op.kind, op.scope, op.key, value))
        jobs[c] = seq
    start = cluster.net.now()
    msgs0 = sum(cluster.net.kind_counts.values())
    gw0 = _gw_count(cluster)
    hops0 = {g: len(gw.overlay.hops) for g, gw in cluster.gateways.items()}

    def on_done(client, rec):
        report.ops += 1
        report.per_client_ops[client] = report.per_client_ops.get(client, 0) + 1
        report.per_client_ms[client] = rec.complete - start
        if rec.status in ("ok", "not_found"):
            report.add(rec.kind, rec.scope, rec.latency)
        else:
            report.errors += 1

    _drive(cluster, jobs, threads, on_done, max_ms)
    report.messages = sum(cluster.net.kind_counts.values()) - msgs0
    report.gateway_messages = _gw_count(cluster) - gw0
    for g, gw in cluster.gateways.items():
        report.hops.extend(gw.overlay.hops[hops0.get(g, 0):])
    return report


_GW_KINDS = ("GlobalPut", "GlobalGet", "GlobalDelete", "GlobalResponse")


def _gw_count(cluster: SimCluster) -> int:
    return sum(cluster.net.kind_counts[k] for k in _GW_KINDS)


def rate_limited_run(cluster: SimCluster, spec: WorkloadSpec, rate: float, duration_ms: float,
                     drain_ms: float = 60_000) -> BenchReport:
    """Open loop: issue ``rate`` ops/s in total, evenly spaced, for ``duration_ms``."""
    if rate <= 0:
        raise ConfigError("rate must be positive")
    clients = client_names(cluster, spec)
    report = BenchReport()
    interval = 1000.0 / rate
    count = int(round(duration_ms / interval))
    streams = {c: OpStream(spec, c, 0) for c in clients}
    start = cluster.net.now()
    issued = [0]
    outstanding = [0]

    def on_done(client, rec):
        outstanding[0] -= 1
        report.ops += 1
        report.per_client_ops[client] = report.per_client_ops.get(client, 0) + 1
        report.per_client_ms[client] = duration_ms
        if rec.status in ("ok", "not_found"):
            report.add(rec.kind, rec.scope, rec.latency)
        else:
            report.errors += 1

    def fire(n: int) -> None:
        client = clients[n % len(clients)]
        s = streams[client]
        op = s.next()
        value = None
        if op.kind == PUT:
            s.version += 1
            value = value_for(op.key, spec.value_size, s.version)
        issued[0] += 1
        outstanding[0] += 1
        cluster.clients[client].submit(op.kind, op.scope, op.key, value, mode=LIN, session=n,
                                       callback=lambda rec, c=client: on_done(c, rec))

    for n in range(count):
        cluster.net.schedule(ms_to_ticks(n * interval), fire, n)
    cluster.net.run_until(lambda: issued[0] == count and outstanding[0] == 0,
                          duration_ms + drain_ms, poll_ms=10)
    report.issued = issued[0]
    report.elapsed_ms = cluster.net.now() - start
    return report


# -- topologies, scenarios and sweeps -------------------------------------------------------------

def _fields(d, allowed: set[str], what: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be a JSON object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {what} fields: {sorted(unknown)}")
    return d


@dataclass
class GroupTopology:
    group_id: str
    edge_nodes: list[str]
    gateway_endpoint: str | None = None
    vnode_count: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> GroupTopology:
        d = _fields(d, {"groupId", "edgeNodes", "gatewayEndpoint", "vnodeCount"}, "group")
        if not isinstance(d.get("groupId"), str) or not d["groupId"]:
            raise ConfigError("every group needs a groupId")
        nodes = d.get("edgeNodes")
        if not isinstance(nodes, list) or not nodes:
            raise ConfigError(f"group {d['groupId']!r} needs at least one edge node")
        vn = d.get("vnodeCount", 1)
        if not isinstance(vn, int) or vn < 1:
            raise ConfigError(f"group {d['groupId']!r}: vnodeCount must be a positive integer")
        return cls(d["groupId"], list(nodes), d.get("gatewayEndpoint"), vn)

    def to_dict(self) -> dict:
        out = {"groupId": self.group_id, "edgeNodes": self.edge_nodes,
               "vnodeCount": self.vnode_count}
        if self.gateway_endpoint:
            out["gatewayEndpoint"] = self.gateway_endpoint
        return out


def default_groups(n: int = 3, size: int = 3) -> list[GroupTopology]:
    return [GroupTopology(f"g{i}", [f"g{i}-n{k}" for k in range(size)], f"g{i}-gw")
            for i in range(n)]


@dataclass
class Topology:
    """Groups, their sizes and vnode counts, the overlay join order and the link profile.

    The simulator names nodes itself (``<group>-n<k>``); endpoint strings only
    set the group sizes there.
    """

    groups: list[GroupTopology] = field(default_factory=default_groups)
    bootstrap_order: list[str] = field(default_factory=list)
    transport: str = "sim"
    profile: str | dict = "edge"
    service_ms: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> Topology:
        d = _fields(d, {"groups", "overlayBootstrapOrder", "transport", "profile", "serviceMs"},
                    "topology")
        groups = ([GroupTopology.from_dict(g) for g in d["groups"]] if "groups" in d
                  else default_groups())
        topo = cls(groups, list(d.get("overlayBootstrapOrder", [])), d.get("transport", "sim"),
                   d.get("profile", "edge"), float(d.get("serviceMs", 0.0)))
        topo.validate()
        return topo

    def to_dict(self) -> dict:
        return {"groups": [g.to_dict() for g in self.groups],
                "overlayBootstrapOrder": self.ordered_ids(), "transport": self.transport,
                "profile": self.profile, "serviceMs": self.service_ms}

    def validate(self) -> None:
        if not self.groups:
            raise ConfigError("topology needs at least one group")
        ids = [g.group_id for g in self.groups]
        if len(set(ids)) != len(ids):
            raise ConfigError("group ids must be unique")
        if self.bootstrap_order and sorted(self.bootstrap_order) != sorted(ids):
            raise ConfigError("overlayBootstrapOrder must list every group exactly once")
        if self.transport not in ("sim", "real"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.service_ms < 0:
            raise ConfigError("serviceMs must be non-negative")
        profile_from_config(self.profile)

    def ordered_ids(self) -> list[str]:
        return list(self.bootstrap_order) or [g.group_id for g in self.groups]

    def cluster_spec(self, clients: int) -> ClusterSpec:
        by_id = {g.group_id: g for g in self.groups}
        order = [by_id[i] for i in self.ordered_ids()]
        return ClusterSpec(groups=[g.group_id for g in order],
                           group_size=[len(g.edge_nodes) for g in order],
                           clients_per_group=math.ceil(clients / len(order)),
                           vnodes=[g.vnode_count for g in order], service_ms=self.service_ms)


SWEEP_PARAMETERS = {"globalProportion": "global_proportion", "clients": "clients",
                    "requestRate": "rate", "distribution": "distribution"}


@dataclass
class SweepSpec:
    parameter: str = "globalProportion"
    values: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    profiles: list = field(default_factory=lambda: ["edge", "cloud"])

    @classmethod
    def from_dict(cls, d: dict) -> SweepSpec:
        d = _fields(d, {"parameter", "values", "profiles"}, "sweep")
        sw = cls(d.get("parameter", "globalProportion"),
                 list(d.get("values", [0.0, 0.25, 0.5, 0.75, 1.0])),
                 list(d.get("profiles", ["edge", "cloud"])))
        if sw.parameter not in SWEEP_PARAMETERS:
            raise ConfigError(f"cannot sweep {sw.parameter!r}; "
                              f"choose from {sorted(SWEEP_PARAMETERS)}")
        for p in sw.profiles:
            profile_from_config(p)
        return sw

    def to_dict(self) -> dict:
        return {"parameter": self.parameter, "values": self.values, "profiles": self.profiles}


@dataclass
class Scenario:
    """A topology, a workload and optionally a sweep; without one it is a single cell."""

    name: str = "scenario"
    topology: Topology = field(default_factory=Topology)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    sweep: SweepSpec | None = None
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> Scenario:
        d = _fields(d, {"name", "topology", "workload", "sweep", "seed"}, "scenario")
        sc = cls(str(d.get("name", "scenario")), Topology.from_dict(d.get("topology", {})),
                 WorkloadSpec.from_dict(d.get("workload", {})),
                 SweepSpec.from_dict(d["sweep"]) if d.get("sweep") is not None else None,
                 int(d.get("seed", 0)))
        sc.validate()
        return sc

    def to_dict(self) -> dict:
        out = {"name": self.name, "topology": self.topology.to_dict(),
               "workload": self.workload.to_dict(), "seed": self.seed}
        if self.sweep is not None:
            out["sweep"] = self.sweep.to_dict()
        return out

    def validate(self) -> None:
        if self.topology.transport != "sim":
            raise ConfigError("benchmarks run on the simulated transport; set transport to sim")
        self.topology.validate()

    def cells(self) -> list[tuple[str, object, object]]:
        """(parameter, value, profile) for every cell, values outermost."""
        if self.sweep is None:
            return [("", "", self.topology.profile)]
        return [(self.sweep.parameter, v, p) for v in self.sweep.values
                for p in self.sweep.profiles]


SWEEP_COLUMNS = ["parameter", "value", "profile", "ops", "errors", "error_rate", "failed",
                 "throughput_ops_s", "mean_ms", "p50_ms", "p99_ms", "read_mean_ms",
                 "write_mean_ms", "local_write_mean_ms", "global_write_mean_ms",
                 "messages", "gateway_messages"]


def run_cell(scenario: Scenario, profile, parameter: str = "", value=None) -> BenchReport:
    wl = scenario.workload.to_dict()
    rate = None
    if parameter == "requestRate":
        rate = float(value)
    elif parameter:
        wl[parameter] = value
    spec = WorkloadSpec.from_dict(wl)
    cluster = SimCluster(scenario.topology.cluster_spec(spec.clients),
                         profile=profile_from_config(profile), seed=scenario.seed)
    cluster.start()
    load_phase(cluster, spec)
    if rate is not None:
        return rate_limited_run(cluster, spec, rate, 1000.0 * spec.operation_count / rate)
    return run_phase(cluster, spec)


def _profile_label(profile) -> str:
    return profile if isinstance(profile, str) else profile_from_config(profile).name


def sweep(scenario: Scenario, on_cell: Callable | None = None) -> list[dict]:
    """Run every cell; a failing cell is recorded and the sweep carries on."""
    rows = []
    for parameter, value, profile in scenario.cells():
        row = {"parameter": parameter, "value": value, "profile": _profile_label(profile)}
        try:
            rep = run_cell(scenario, profile, parameter, value)
            row.update(rep.summary())
        except EdgeKVError as exc:
            log.error("cell %s=%s/%s failed: %s", parameter, value, row["profile"], exc)
            row.update({"ops": 0, "errors": 0, "error_rate": 1.0, "failed": True})
        rows.append(row)
        if on_cell is not None:
            on_cell(row)
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, SWEEP_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: row.get(k, "") for k in SWEEP_COLUMNS})
    return buf.getvalue()


def plot_data(rows: list[dict]) -> dict:
    """Series per profile, shaped like the evaluation figures."""
    out: dict = {}
    for metric in ("write_mean_ms", "read_mean_ms", "throughput_ops_s"):
        series: dict[str, list] = {}
        for row in rows:
            series.setdefault(row["profile"], []).append([row["value"], row.get(metric)])
        out[metric] = series
    return out


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


__all__ = ["BenchReport", "DISTRIBUTIONS", "GroupTopology", "HotspotGenerator", "LatestGenerator",
           "LoadAborted", "Scenario", "SweepSpec", "Topology", "UniformGenerator", "WorkloadSpec", "ZipfianGenerator",
           "load_phase", "plot_data", "rate_limited_run", "rows_to_csv", "run_cell", "run_phase",
           "sweep"]
