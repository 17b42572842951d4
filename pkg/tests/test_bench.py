import csv
import io
import math
import random
from collections import Counter

import pytest

from edgekv.bench import (HotspotGenerator, LatestGenerator, LoadAborted, OpStream, Scenario,
                          Topology, UniformGenerator, WorkloadSpec, ZipfianGenerator, key_name, load_phase,
                          percentile, plot_data, rate_limited_run, rows_to_csv, run_phase, sweep)
from edgekv.chord import ring_refs
from edgekv.cluster import ClusterSpec, SimCluster
from edgekv.command import GLOBAL, LOCAL
from edgekv.errors import ConfigError


def chi2_critical(df, z=2.3263478740):
    """Upper 1% point of chi-square via the Wilson-Hilferty approximation."""
    h = 2 / (9 * df)
    return df * (1 - h + z * math.sqrt(h)) ** 3


def small_spec(**kw):
    base = dict(record_count=60, operation_count=90, clients=3, threads_per_client=5,
                value_size=64, seed=7)
    base.update(kw)
    return WorkloadSpec(**base)


def cluster(seed=1, **kw):
    c = SimCluster(ClusterSpec(**kw), seed=seed, record_trace=True)
    c.start()
    return c


# -- generators ----------------------------------------------------------------------------------

def test_uniform_passes_chi_square():
    n, draws = 100, 20_000
    g = UniformGenerator(n, random.Random(1))
    counts = Counter(g.next() for _ in range(draws))
    expected = draws / n
    stat = sum((counts[i] - expected) ** 2 / expected for i in range(n))
    assert stat < chi2_critical(n - 1)


def test_chi2_critical_value_matches_table():
    assert chi2_critical(99) == pytest.approx(134.642, abs=0.1)


def test_hotspot_fraction():
    g = HotspotGenerator(10_000, random.Random(3), 0.2, 0.8)
    draws = [g.next() for _ in range(10_000)]
    frac = sum(1 for d in draws if g.is_hot(d)) / len(draws)
    assert abs(frac - 0.8) <= 0.03
    assert all(0 <= d < 10_000 for d in draws)


def test_latest_prefers_recent_keys():
    n = 10_000
    g = LatestGenerator(n, random.Random(4))
    draws = [g.next() for _ in range(10_000)]
    recent = sum(1 for d in draws if d >= n - n // 10)
    oldest = sum(1 for d in draws if d < n // 10)
    assert recent > oldest
    assert all(0 <= d < n for d in draws)


def test_zipfian_rank_zero_is_most_popular():
    g = ZipfianGenerator(1000, random.Random(5))
    counts = Counter(g.next() for _ in range(20_000))
    assert counts.most_common(1)[0][0] == 0
    assert counts[0] > counts[10] > counts[500]


def test_op_stream_is_deterministic_and_respects_proportions():
    spec = small_spec(global_proportion=0.3, record_count=1000)
    s1, s2 = OpStream(spec, "c", 1), OpStream(spec, "c", 1)
    ops1 = [s1.next() for _ in range(4000)]
    assert ops1 == [s2.next() for _ in range(4000)]
    reads = sum(1 for o in ops1 if o.kind == "get") / len(ops1)
    glob = sum(1 for o in ops1 if o.scope == GLOBAL) / len(ops1)
    assert abs(reads - 0.5) < 0.03 and abs(glob - 0.3) < 0.03
    assert OpStream(spec, "c", 2).next() != ops1[0] or OpStream(spec, "d", 1).next() != ops1[0]


def test_spec_validation():
    with pytest.raises(ConfigError):
        WorkloadSpec(read_proportion=0.6, update_proportion=0.5)
    with pytest.raises(ConfigError):
        WorkloadSpec(distribution="zipf")
    with pytest.raises(ConfigError):
        WorkloadSpec.from_dict({"bogus": 1})


def test_percentile():
    assert percentile([3, 1, 2, 4], 50) == 2
    assert percentile([3, 1, 2, 4], 100) == 4
    assert math.isnan(percentile([], 50))


# -- phases --------------------------------------------------------------------------------------

def test_load_writes_local_copy_per_group_and_one_global_copy():
    c = cluster()
    spec = small_spec()
    assert load_phase(c, spec) == 60 * 3 + 60
    c.net.run_for(200)
    owners = Counter()
    for g in c.groups:
        node = c.nodes[c.members[g][0]]
        assert sum(1 for i in range(60) if node.storage.read(LOCAL, key_name(i))) == 60
        owners[g] = sum(1 for i in range(60) if node.storage.read(GLOBAL, key_name(i)))
    assert sum(owners.values()) == 60
    for i in range(60):
        assert c.nodes[c.members[c.global_owner(key_name(i))][0]].storage.read(
            GLOBAL, key_name(i)) is not None


def test_load_with_zero_records_is_noop():
    c = cluster()
    before = sum(c.net.kind_counts.values())
    assert load_phase(c, small_spec(record_count=0)) == 0
    assert sum(c.net.kind_counts.values()) == before


def test_load_aborts_when_a_group_is_down():
    c = cluster()
    for a in c.members["g1"][:2]:
        c.crash(a)
    c.spec.client.deadline_ms = 2500
    with pytest.raises(LoadAborted) as info:
        load_phase(c, small_spec(record_count=5))
    assert info.value.failed > 0 and info.value.inserted > 0


def test_local_only_run_has_no_gateway_traffic():
    c = cluster()
    spec = small_spec(global_proportion=0.0)
    load_phase(c, spec)
    rep = run_phase(c, spec)
    assert rep.ops == 270 and rep.errors == 0
    assert rep.gateway_messages == 0


def test_run_report_per_client_throughput():
    c = cluster()
    spec = small_spec(global_proportion=0.5)
    load_phase(c, spec)
    rep = run_phase(c, spec)
    assert rep.ops == 270 and not rep.failed
    rates = [rep.per_client_ops[k] / rep.per_client_ms[k] * 1000 for k in rep.per_client_ops]
    assert rep.throughput == pytest.approx(sum(rates) / len(rates))
    assert rep.mean(scope=GLOBAL) > rep.mean(scope=LOCAL)


def test_latency_equals_trace_delta():
    c = cluster()
    for scope in (LOCAL, GLOBAL):
        rec = c.put("g0-c0", b"lat", b"v", scope=scope)
        msgs = [t for t in c.net.trace if t.cause == c.last_cause]
        sent = min(t.sent for t in msgs if t.src == "g0-c0")
        got = max(t.delivered for t in msgs if t.dst == "g0-c0")
        assert abs(rec.latency * 100 - (got - sent)) <= 1


def test_same_seed_same_report():
    def once():
        c = cluster(seed=3)
        spec = small_spec(global_proportion=0.5, distribution="hotspot")
        load_phase(c, spec)
        return run_phase(c, spec).summary(), c.net.trace_digest()

    assert once() == once()


def test_rate_limited_issue_count():
    c = cluster()
    spec = small_spec(record_count=20)
    rep = rate_limited_run(c, spec, rate=100, duration_ms=10_000)
    assert abs(rep.issued - 1000) <= 1
    assert rep.ops == rep.issued


# -- sweeps ---------------------------------------------------------------------------------------

def _scenario(**kw):
    base = dict(name="t", workload=dict(recordCount=15, operationCount=30, clients=3,
                                        threadsPerClient=3, valueSizeBytes=32, seed=1),
                sweep={})
    base.update(kw)
    return Scenario.from_dict(base)


def test_empty_sweep_gives_empty_table():
    rows = sweep(_scenario(sweep={"values": []}))
    assert rows == []
    assert rows_to_csv(rows).strip().count("\n") == 0


def test_global_sweep_gives_ten_cells():
    rows = sweep(_scenario())
    table = list(csv.DictReader(io.StringIO(rows_to_csv(rows))))
    assert len(table) == 10
    assert {(r["value"], r["profile"]) for r in table} == {
        (str(v), p) for v in [0.0, 0.25, 0.5, 0.75, 1.0] for p in ["edge", "cloud"]}
    plots = plot_data(rows)
    assert len(plots["write_mean_ms"]["edge"]) == 5


def test_no_sweep_is_one_cell_on_the_topology_profile():
    sc = _scenario(sweep=None, topology={"profile": "cloud"})
    rows = sweep(sc)
    assert [(r["parameter"], r["profile"]) for r in rows] == [("", "cloud")]
    assert rows[0]["ops"] == 90


def test_topology_group_sizes_vnodes_and_order():
    topo = Topology.from_dict({
        "groups": [{"groupId": "a", "edgeNodes": ["a1"], "vnodeCount": 2},
                   {"groupId": "b", "edgeNodes": ["b1", "b2", "b3"], "vnodeCount": 3}],
        "overlayBootstrapOrder": ["b", "a"]})
    spec = topo.cluster_spec(clients=3)
    assert spec.groups == ["b", "a"] and spec.group_size == [3, 1] and spec.vnodes == [3, 2]
    assert spec.clients_per_group == 2
    c = SimCluster(spec, seed=1)
    c.start()
    assert len(ring_refs([g.overlay for g in c.gateways.values()])) == 5


def test_custom_profile_overrides_one_link_class():
    wl = dict(recordCount=15, operationCount=30, clients=3, threadsPerClient=3,
              globalProportion=1.0, seed=1)
    sc = _scenario(sweep=None, workload=wl, topology={"profile": {
        "base": "edge", "name": "slow-wan",
        "overrides": {"Gw-Gw": {"latencyMs": 40, "bandwidthMbps": 500}}}})
    fast = _scenario(sweep=None, workload=wl)
    slow_rows, fast_rows = sweep(sc), sweep(fast)
    assert slow_rows[0]["profile"] == "slow-wan"
    assert slow_rows[0]["global_write_mean_ms"] > fast_rows[0]["global_write_mean_ms"]


def test_camel_case_workload_round_trips():
    spec = WorkloadSpec.from_dict({"recordCount": 5, "valueSizeBytes": 8, "globalProportion": 1})
    assert (spec.record_count, spec.value_size, spec.global_proportion) == (5, 8, 1)
    assert WorkloadSpec.from_dict(spec.to_dict()) == spec


def test_scenario_validation():
    with pytest.raises(ConfigError):
        _scenario(sweep={"profiles": ["moon"]})
    with pytest.raises(ConfigError):
        _scenario(sweep={"parameter": "colour"})
    with pytest.raises(ConfigError):
        Scenario.from_dict({"nope": 1})
    with pytest.raises(ConfigError):
        _scenario(topology={"transport": "real"})
    with pytest.raises(ConfigError):
        _scenario(topology={"groups": [{"groupId": "a", "edgeNodes": []}]})
    with pytest.raises(ConfigError):
        _scenario(topology={"groups": [{"groupId": "a", "edgeNodes": ["x"]}],
                            "overlayBootstrapOrder": ["a", "b"]})
