import pytest

from edgekv import wire
from edgekv.errors import ConfigError, HorizonExceeded
from edgekv.transport import (CLI_ST, CLIENT, CLOUD, EDGE, GATEWAY, GW_GW, ST_GW, ST_ST, STORAGE,
                              LinkProfile, SimNetwork, profile_from_config)
from edgekv.wire import Envelope


def _padded_put(total_frame_bytes):
    """ClientPut whose encoded frame is exactly ``total_frame_bytes`` long."""
    base = {"scope": "local", "key": b"k", "value": b"", "requestId": "r"}
    empty = len(wire.encode(Envelope(1, "ClientPut", base)))
    # base64 grows 3 bytes of value into 4 characters; the request id soaks up the rest
    n = (total_frame_bytes - empty) // 4 * 3
    rest = total_frame_bytes - empty - n // 3 * 4
    payload = dict(base, value=b"x" * n, requestId="r" + "y" * rest)
    assert len(wire.encode(Envelope(1, "ClientPut", payload))) == total_frame_bytes
    return payload


def _pair(net, a_role=CLIENT, b_role=STORAGE):
    a = net.add("a", a_role)
    b = net.add("b", b_role)
    inbox = []
    b.handler = lambda env, src: inbox.append((net.now_ticks, env, src))
    return a, b, inbox


def test_presets_match_link_table():
    assert EDGE.links[CLI_ST] == LinkProfile(5, 100)
    assert EDGE.links[ST_ST] == LinkProfile(2, 1000)
    assert EDGE.links[ST_GW] == LinkProfile(2, 750)
    assert EDGE.links[GW_GW] == LinkProfile(10, 500)
    assert CLOUD.links[CLI_ST] == LinkProfile(50, 100)
    assert CLOUD.links[ST_ST] == LinkProfile(0.05, 1000)
    assert CLOUD.links[ST_GW] == LinkProfile(0.05, 1000)
    assert CLOUD.links[GW_GW] == LinkProfile(0.05, 1000)


def test_link_profile_invariants():
    with pytest.raises(ConfigError):
        LinkProfile(-1, 10)
    with pytest.raises(ConfigError):
        LinkProfile(1, 0)


@pytest.mark.parametrize("profile,expected_ticks", [(EDGE, 508), (CLOUD, 5008)])
def test_delivery_time_latency_plus_serialization(profile, expected_ticks):
    # 1,000-byte frame at 100 Mbps = 0.08 ms on the wire
    net = SimNetwork(profile)
    a, _, inbox = _pair(net)
    a.send("b", "ClientPut", _padded_put(1000))
    net.run_for(100)
    assert inbox[0][0] == expected_ticks
    assert profile.links[CLI_ST].one_way_ms(1000) == pytest.approx(expected_ticks / 100)


def test_shaping_fidelity_every_link_class():
    net = SimNetwork(EDGE)
    roles = {"c": CLIENT, "s1": STORAGE, "s2": STORAGE, "g1": GATEWAY, "g2": GATEWAY}
    arrivals = {}
    for addr, role in roles.items():
        ep = net.add(addr, role)
        ep.handler = lambda env, src, addr=addr: arrivals.setdefault((src, addr), net.now_ticks)
    for src, dst, cls in [("c", "s1", CLI_ST), ("s1", "s2", ST_ST), ("s1", "g1", ST_GW),
                          ("g1", "g2", GW_GW)]:
        start = net.now_ticks
        payload = _padded_put(1500)
        net.endpoints[src].send(dst, "ClientPut", payload)
        net.run_for(50)
        expected = EDGE.links[cls].one_way_ms(1500) * 100
        assert abs((arrivals[(src, dst)] - start) - expected) <= 1


def test_fifo_per_link():
    net = SimNetwork(EDGE)
    a, _, inbox = _pair(net)
    a.send("b", "ClientPut", _padded_put(20_000))
    a.send("b", "Ping", {})
    net.run_for(100)
    assert [env.kind for _, env, _ in inbox] == ["ClientPut", "Ping"]
    assert inbox[0][0] <= inbox[1][0]


def test_request_response_and_timeout():
    net = SimNetwork(EDGE)
    a, b, _ = _pair(net, STORAGE, STORAGE)
    b.handler = lambda env, src: b.reply(src, env, "Pong", {"group": "g"})
    got = []
    a.request("b", "Ping", {}, 100, got.append)
    net.run_for(10)
    assert got[0].kind == "Pong" and got[0].payload == {"group": "g"}
    net.partition(["a"], ["b"])
    a.request("b", "Ping", {}, 100, got.append)
    net.run_for(200)
    assert got[1] is None


def test_partition_drops_until_heal_and_empty_cut_is_noop():
    net = SimNetwork(EDGE)
    a, _, inbox = _pair(net, STORAGE, STORAGE)
    net.partition(["a"], [])
    a.send("b", "Ping", {})
    net.run_for(10)
    assert len(inbox) == 1
    net.partition(["a"], ["b"])
    a.send("b", "Ping", {})
    net.run_for(10)
    assert len(inbox) == 1
    net.heal()
    a.send("b", "Ping", {})
    net.run_for(10)
    assert len(inbox) == 2


def test_crash_drops_deliveries_and_timers():
    net = SimNetwork(EDGE)
    a, b, inbox = _pair(net, STORAGE, STORAGE)
    fired = []
    b.call_later(5, fired.append, 1)
    a.send("b", "Ping", {})
    net.crash("b")
    net.run_for(20)
    assert inbox == [] and fired == []


def test_no_events_quiescent_immediately():
    net = SimNetwork()
    assert net.run_until_quiescent(1000) == 0


def test_timer_fires_at_exact_tick():
    net = SimNetwork()
    fired = []
    net.schedule(150, lambda: fired.append(net.now_ticks))
    assert net.run_until_quiescent(1000) == 150
    assert fired == [150]


def test_quiescence_horizon_exceeded():
    net = SimNetwork()

    def tick():
        net.schedule(10, tick)

    tick()
    with pytest.raises(HorizonExceeded):
        net.run_until_quiescent(100)


def test_service_time_queues_messages():
    net = SimNetwork(EDGE, service_ms=1.0)
    a, _, inbox = _pair(net, STORAGE, STORAGE)
    a.send("b", "Ping", {})
    a.send("b", "Ping", {})
    net.run_for(20)
    t0, t1 = inbox[0][0], inbox[1][0]
    assert t1 - t0 == 100


def _chatter(seed):
    net = SimNetwork(EDGE, seed=seed, record_trace=True)
    eps = [net.add(f"n{i}", STORAGE) for i in range(4)]
    for ep in eps:
        rng = ep.rng()

        def handler(env, src, ep=ep, rng=rng):
            if env.payload.get("target", "") .count("x") < 6:
                dst = f"n{rng.randrange(4)}"
                ep.send(dst, "Ping", {"target": env.payload.get("target", "") + "x"})

        ep.handler = handler
    for ep in eps:
        ep.send("n0", "Ping", {"target": ""})
    net.run_until_quiescent(10_000_000)
    return net.trace, net.trace_digest()


def test_determinism_same_seed_identical_traces():
    runs = [_chatter(42) for _ in range(5)]
    assert all(r == runs[0] for r in runs)
    assert _chatter(43)[1] != runs[0][1]


def test_profile_from_config():
    assert profile_from_config("cloud") is CLOUD
    custom = profile_from_config({"base": "edge",
                                  "overrides": {"Gw-Gw": {"latencyMs": 30, "bandwidthMbps": 100}}})
    assert custom.links[GW_GW] == LinkProfile(30, 100)
    assert custom.links[CLI_ST] == EDGE.links[CLI_ST]
    with pytest.raises(ConfigError):
        profile_from_config("mars")
