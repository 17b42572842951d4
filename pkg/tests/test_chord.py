import random
import statistics

import pytest

from edgekv.chord import (ChordNode, NodeRef, Overlay, OverlayConfig, converged,
                          oracle_successor, ring_refs)
from edgekv.errors import IdCollision, InvalidArgument, JoinFailed
from edgekv.ring import M_BITS, finger_start, hash_id, in_interval
from edgekv.transport import GATEWAY, SimNetwork


class Ring:
    """Overlays on the simulator with nothing but Chord plumbing."""

    def __init__(self, seed=0, m=M_BITS):
        self.net = SimNetwork(seed=seed)
        self.m = m
        self.overlays = {}

    def add(self, name, vnodes=1, bootstrap=None):
        ep = self.net.add(name, GATEWAY)
        ov = Overlay(ep, name, vnodes, OverlayConfig(m=self.m))

        def handler(env, src, ov=ov, ep=ep):
            if not ov.handle(env, src) and env.kind == "Ping":
                ep.reply(src, env, "Pong", {})

        ep.handler = handler
        self.overlays[name] = ov
        result = []
        if bootstrap is None:
            ov.create()
        else:
            ov.join(bootstrap, result.append)
        return ov, result

    def crash(self, name):
        self.overlays.pop(name).stop()
        self.net.crash(name)

    def build(self, names, vnodes=1, sequential=False):
        first = names[0]
        self.add(first, vnodes)
        for name in names[1:]:
            _, result = self.add(name, vnodes, bootstrap=first)
            if sequential:
                self.net.run_until(lambda: result, 1000)
                assert result == [None]
        assert self.converge(), "overlay did not converge"

    def converge(self, max_ms=60_000):
        ovs = list(self.overlays.values())
        return self.net.run_until(lambda: converged(ovs), max_ms, poll_ms=50)

    def locate(self, name, h):
        out = []
        self.overlays[name].locate(h, lambda ref, hops, route, err: out.append((ref, hops, err)))
        self.net.run_until(lambda: out, 5000)
        return out[0]


def _manual(ids, m=8):
    """Converged ChordNodes with exact routing state, no network."""
    ids = sorted(ids)
    refs = [NodeRef(i, f"a{i}", f"p{i}") for i in ids]
    nodes = {}
    for k, ref in enumerate(refs):
        n = ChordNode(ref, m)
        n.set_successors([refs[(k + j) % len(refs)] for j in range(1, 4)])
        n.predecessor = refs[k - 1] if len(refs) > 1 else None
        n.fingers = [next(r for r in refs if r.id == oracle_successor(ids, finger_start(ref.id, i, m), m))
                     for i in range(1, m + 1)]
        nodes[ref.id] = n
    return nodes


def _resolve(nodes, start, target):
    node, hops = nodes[start], 0
    while True:
        done, ref = node.route(target)
        if done:
            return ref.id, hops
        node, hops = nodes[ref.id], hops + 1


def test_single_node_resolves_to_self():
    n = _manual([42])[42]
    assert n.route(7) == (True, n.ref)


def test_wraparound_successor_m8():
    nodes = _manual([10, 80, 200])
    assert _resolve(nodes, 10, 81)[0] == 200
    assert _resolve(nodes, 80, 201)[0] == 10
    assert _resolve(nodes, 200, 10)[0] == 10


def test_closest_preceding_examples():
    n = ChordNode(NodeRef(10, "a", "p"), m=8)
    assert n.closest_preceding(205) == n.ref
    n.fingers[0] = NodeRef(80, "b", "q")
    n.fingers[1] = NodeRef(200, "c", "r")
    assert n.closest_preceding(205).id == 200


def test_closest_preceding_matches_linear_scan():
    rng = random.Random(3)
    for _ in range(300):
        me = rng.randrange(256)
        n = ChordNode(NodeRef(me, "self", "p"), m=8)
        known = [NodeRef(rng.randrange(256), f"x{i}", "q") for i in range(rng.randrange(0, 10))]
        for i, ref in enumerate(known[:8]):
            n.fingers[i] = ref
        target = rng.randrange(256)
        cands = [r for r in n.known() if r != n.ref and in_interval(r.id, me, target, m=8)]
        expect = max(cands, key=lambda r: (r.id - me) % 256) if cands else n.ref
        assert n.closest_preceding(target).id == expect.id


def test_notify_self_is_rejected():
    n = ChordNode(NodeRef(10, "a", "p"), m=8)
    assert not n.notify(n.ref)
    assert n.predecessor is None


@pytest.mark.parametrize("size", [1, 2, 8, 32])
def test_locate_matches_oracle(size):
    ring = Ring(seed=size)
    names = [f"gw-{i}" for i in range(size)]
    ring.build(names)
    ids = [r.id for r in ring_refs(list(ring.overlays.values()))]
    rng = random.Random(size)
    keys = [rng.randrange(1 << M_BITS) for _ in range(200)]
    for k in keys:
        ref, _, err = ring.locate(rng.choice(names), k)
        assert err is None and ref.id == oracle_successor(ids, k)


def test_locate_self_id_is_self():
    ring = Ring()
    ring.build([f"gw-{i}" for i in range(4)])
    ov = ring.overlays["gw-2"]
    ref, hops, _ = ring.locate("gw-2", ov.vnodes[0].id)
    assert ref == ov.vnodes[0].ref and hops == 0


def test_two_node_symmetry_within_three_rounds():
    ring = Ring()
    ring.add("a")
    b, result = ring.add("b", bootstrap="a")
    ring.net.run_until(lambda: result, 1000)
    ring.net.run_for(3 * 50 + 25)
    a = ring.overlays["a"].vnodes[0]
    bv = b.vnodes[0]
    assert a.successor == bv.ref and a.predecessor == bv.ref
    assert bv.successor == a.ref and bv.predecessor == a.ref


def test_sequential_joins_order_matches_sorted_ids():
    ring = Ring(seed=16)
    ring.build([f"n{i}" for i in range(16)], sequential=True)
    refs = ring_refs(list(ring.overlays.values()))
    start = ring.overlays["n0"].vnodes[0]
    by_id = {v.id: v for o in ring.overlays.values() for v in o.vnodes}
    walk, node = [], start
    for _ in range(len(refs)):
        walk.append(node.id)
        node = by_id[node.successor.id]
    assert node is start
    k = walk.index(min(walk))
    assert walk[k:] + walk[:k] == [r.id for r in refs]


def test_join_with_dead_bootstrap_fails():
    ring = Ring()
    ring.add("a")
    ring.net.crash("a")
    _, result = ring.add("b", bootstrap="a")
    ring.net.run_for(OverlayConfig().join_timeout_ms + 10)
    assert len(result) == 1 and isinstance(result[0], JoinFailed)


def test_id_collision_on_join():
    ring = Ring()
    ring.add("a")
    ep = ring.net.add("a-clone", GATEWAY)
    clone = Overlay(ep, "a", 1)  # same physical name -> same vnode id
    out = []
    clone.join("a", out.append)
    ring.net.run_for(100)
    assert isinstance(out[0], IdCollision)


def test_converged_ring_stabilize_is_fixpoint():
    ring = Ring(seed=5)
    ring.build([f"n{i}" for i in range(8)])

    def snapshot():
        return [(v.predecessor, tuple(v.successors), tuple(v.fingers))
                for o in ring.overlays.values() for v in o.vnodes]

    before = snapshot()
    ring.net.run_for(500)
    assert snapshot() == before


def test_ring_repairs_after_crash():
    ring = Ring(seed=8)
    names = [f"n{i}" for i in range(8)]
    ring.build(names)
    refs = ring_refs(list(ring.overlays.values()))
    victim = refs[3]
    pred = next(o for o in ring.overlays.values() if o.vnodes[0].ref == refs[2]).vnodes[0]
    ring.crash(victim.physical)
    ring.net.run_for(3 * 50)
    assert pred.successor == refs[4]
    assert ring.converge(), "ring did not re-converge"


def test_mean_hops_on_64_vnode_ring():
    ring = Ring(seed=64)
    ring.build([f"g{i}" for i in range(8)], vnodes=8)
    rng = random.Random(1)
    hops = []
    for _ in range(300):
        ref, h, err = ring.locate(f"g{rng.randrange(8)}", rng.randrange(1 << M_BITS))
        assert err is None
        hops.append(h)
    assert statistics.mean(hops) <= 8 and max(hops) <= 64


def test_vnodes_share_physical_and_names_are_reproducible():
    net = SimNetwork()
    ov = Overlay(net.add("gw", GATEWAY), "gw", 4)
    assert {v.ref.physical for v in ov.vnodes} == {"gw"}
    assert [v.id for v in ov.vnodes] == [hash_id(f"gw#{k}") for k in range(4)]
    with pytest.raises(InvalidArgument):
        ov.spawn_virtual_nodes(0)
    with pytest.raises(InvalidArgument):
        Overlay(net.add("gw2", GATEWAY), "gw2", 0)


def test_single_vnode_is_plain_node():
    ring = Ring()
    ring.build(["a", "b", "c"], vnodes=1)
    assert all(len(o.vnodes) == 1 for o in ring.overlays.values())


def test_ghost_keeps_dead_arc_out_of_ownership():
    ring = Ring(seed=2)
    names = [f"n{i}" for i in range(4)]
    ring.build(names)
    refs = ring_refs(list(ring.overlays.values()))
    dead, heir = refs[1], refs[2]
    heir_node = next(v for o in ring.overlays.values() for v in o.vnodes if v.ref == heir)
    ring.crash(dead.physical)
    ring.net.run_for(1000)
    assert heir_node.predecessor == refs[0]
    key_in_dead_arc = dead.id
    assert heir_node.owner_of(key_in_dead_arc) == dead
    assert heir_node.owner_of(heir.id) == heir


def test_partitioned_gateway_merges_back_after_heal():
    ring = Ring(seed=4)
    names = [f"n{i}" for i in range(5)]
    ring.build(names, vnodes=2)
    ring.net.isolate(["n2"])
    ring.net.run_for(2000)
    rest = [o for n, o in ring.overlays.items() if n != "n2"]
    assert converged(rest, fingers=False)
    ring.net.heal()
    assert ring.converge(), "rings did not merge"
    assert all(not v.ghosts for o in ring.overlays.values() for v in o.vnodes)


def test_lookup_hop_bound_on_small_ring_m8():
    ring = Ring(seed=11, m=8)
    ring.build([f"s{i}" for i in range(6)])
    ids = [r.id for r in ring_refs(list(ring.overlays.values()))]
    for k in range(256):
        ref, hops, err = ring.locate("s0", k)
        assert ref.id == oracle_successor(ids, k, 8) and hops <= 8
