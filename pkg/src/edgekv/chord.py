"""Chord overlay for gateway nodes.

``ChordNode`` holds one overlay identity's routing state (virtual node).
``Overlay`` runs every vnode of one physical gateway over a shared
endpoint: join, periodic stabilize / fix_fingers / check_predecessor, and
recursive ``find_successor`` lookups. Calls between vnodes of the same
gateway never touch the network.

A vnode whose predecessor fails remembers it as a *ghost*: the arc the
ghost used to own is still routed here by Chord, but the data lives in the
ghost's group, so the gateway must not claim it. Failed successors are
remembered too and probed, which lets two halves of a healed partition
merge back into one ring.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass
from typing import Callable

from edgekv.errors import IdCollision, InvalidArgument, JoinFailed, LookupFailed
from edgekv.ring import M_BITS, distance, finger_start, hash_id, hex_to_id, id_to_hex, in_interval
from edgekv.wire import Envelope

log = logging.getLogger(__name__)

CHORD_KINDS = frozenset({"FindSuccessor", "GetPredecessor", "Notify"})


@dataclass(frozen=True)
class NodeRef:
    id: int
    address: str
    physical: str

    def to_wire(self, m: int = M_BITS) -> dict:
        return {"id": id_to_hex(self.id, m), "address": self.address, "physical": self.physical}

    @classmethod
    def from_wire(cls, d: dict, m: int = M_BITS) -> NodeRef:
        return cls(hex_to_id(d["id"], m), d["address"], d["physical"])


def vnode_name(physical: str, k: int) -> str:
    return f"{physical}#{k}"


def oracle_successor(ids, target: int, m: int = M_BITS) -> int:
    """Smallest id >= target on the ring (brute force)."""
    return min(ids, key=lambda i: distance(target, i, m))


class ChordNode:
    """Routing state of one overlay identity."""

    def __init__(self, ref: NodeRef, m: int = M_BITS, r: int = 3):
        self.ref = ref
        self.m = m
        self.r = r
        self.predecessor: NodeRef | None = None
        self.successors: list[NodeRef] = [ref]
        self.fingers: list[NodeRef | None] = [None] * m
        self.next_finger = 0
        self.ghosts: dict[int, NodeRef] = {}
        self.lost: dict[int, NodeRef] = {}

    @property
    def id(self) -> int:
        return self.ref.id

    @property
    def hex(self) -> str:
        return id_to_hex(self.ref.id, self.m)

    @property
    def successor(self) -> NodeRef:
        return self.successors[0]

    def _between(self, x: int, lo: int, hi: int, closed_right: bool = False) -> bool:
        return in_interval(x, lo, hi, closed_right=closed_right, m=self.m)

    def set_successors(self, refs) -> None:
        out: list[NodeRef] = []
        for ref in refs:
            if ref is None or ref == self.ref or ref in out:
                continue
            out.append(ref)
            if len(out) == self.r:
                break
        self.successors = out or [self.ref]

    def known(self) -> list[NodeRef]:
        refs = [f for f in self.fingers if f is not None] + list(self.successors)
        if self.predecessor is not None:
            refs.append(self.predecessor)
        return refs

    def closest_preceding(self, target: int, exclude=frozenset()) -> NodeRef:
        """Known node with the largest id strictly inside (self, target)."""
        best, best_d = self.ref, 0
        for ref in self.known():
            if ref.address in exclude or ref == self.ref:
                continue
            if self._between(ref.id, self.id, target):
                d = distance(self.id, ref.id, self.m)
                if d > best_d:
                    best, best_d = ref, d
        return best

    def notify(self, candidate: NodeRef) -> bool:
        if candidate == self.ref:
            return False
        if self.predecessor is None or self._between(candidate.id, self.predecessor.id, self.id):
            self.predecessor = candidate
            self.ghosts.pop(candidate.id, None)
            self.lost.pop(candidate.id, None)
            self.ghosts = {gid: g for gid, g in self.ghosts.items()
                           if self._between(gid, candidate.id, self.id)}
            return True
        return False

    def predecessor_failed(self) -> None:
        pred = self.predecessor
        if pred is not None and pred.physical != self.ref.physical:
            self.ghosts[pred.id] = pred
        self.predecessor = None

    def successor_failed(self, ref: NodeRef) -> None:
        self.lost[ref.id] = ref
        while len(self.lost) > 2 * self.r:
            self.lost.pop(next(iter(self.lost)))
        self.set_successors([s for s in self.successors if s != ref])
        self.forget(ref.address)

    def forget(self, address: str) -> None:
        self.fingers = [None if f is not None and f.address == address else f
                        for f in self.fingers]

    def responsible_for(self, target: int) -> bool:
        """``target`` falls in (predecessor, self]; unknown predecessor counts as yes."""
        if self.predecessor is None:
            return True
        return self._between(target, self.predecessor.id, self.id, closed_right=True)

    def owner_of(self, target: int) -> NodeRef:
        """Which identity really owns ``target``: self, or a ghost whose arc we inherited."""
        best, best_d = self.ref, distance(target, self.id, self.m)
        for ghost in self.ghosts.values():
            d = distance(target, ghost.id, self.m)
            if d < best_d:
                best, best_d = ghost, d
        return best

    def route(self, target: int, exclude=frozenset()) -> tuple[bool, NodeRef]:
        """One lookup step: ``(True, owner)`` when resolved, else ``(False, next_hop)``."""
        succ = self.successor
        if succ == self.ref:
            return True, self.ref
        if self.predecessor is not None and self._between(
                target, self.predecessor.id, self.id, closed_right=True):
            return True, self.ref
        if self._between(target, self.id, succ.id, closed_right=True):
            return True, succ
        nxt = self.closest_preceding(target, exclude)
        if nxt == self.ref:
            nxt = succ
        return False, nxt


@dataclass
class OverlayConfig:
    m: int = M_BITS
    r: int = 3
    stabilize_ms: float = 50.0
    lookup_timeout_ms: float = 1000.0
    lookup_retries: int = 3
    join_timeout_ms: float = 2000.0
    rpc_timeout_ms: float | None = None     # stabilize/probe RPCs; defaults to the period

    @property
    def rpc_ms(self) -> float:
        return self.rpc_timeout_ms if self.rpc_timeout_ms is not None else self.stabilize_ms


LookupCallback = Callable[[NodeRef | None, int, list, Exception | None], None]


class Overlay:
    def __init__(self, endpoint, physical: str, vnode_count: int = 1,
                 config: OverlayConfig | None = None):
        if vnode_count < 1:
            raise InvalidArgument("vnode count must be positive")
        self.ep = endpoint
        self.physical = physical
        self.config = config or OverlayConfig()
        self.m = self.config.m
        self.vnodes: list[ChordNode] = []
        self.by_id: dict[int, ChordNode] = {}
        self.suspects: dict[str, float] = {}
        self.hops: list[int] = []
        self.isolated = False
        self.running = False
        self.spawn_virtual_nodes(vnode_count)

    # -- identities ---------------------------------------------------------------
    def spawn_virtual_nodes(self, count: int) -> list[NodeRef]:
        if count < 1:
            raise InvalidArgument("vnode count must be positive")
        refs = []
        for k in range(len(self.vnodes), len(self.vnodes) + count):
            ref = NodeRef(hash_id(vnode_name(self.physical, k), self.m), self.ep.address,
                          self.physical)
            if ref.id in self.by_id:
                raise IdCollision(f"vnode {vnode_name(self.physical, k)} collides")
            node = ChordNode(ref, self.m, self.config.r)
            self.vnodes.append(node)
            self.by_id[ref.id] = node
            refs.append(ref)
        return refs

    @property
    def refs(self) -> list[NodeRef]:
        return [v.ref for v in self.vnodes]

    def _local(self, ref: NodeRef) -> ChordNode | None:
        if ref.address != self.ep.address:
            return None
        return self.by_id.get(ref.id)

    # -- liveness ------------------------------------------------------------------
    def suspect(self, address: str) -> None:
        if address == self.ep.address:
            return
        self.suspects[address] = self.ep.now() + 4 * self.config.stabilize_ms
        for v in self.vnodes:
            v.forget(address)

    def alive(self, address: str) -> None:
        self.suspects.pop(address, None)

    def _excluded(self) -> frozenset:
        now = self.ep.now()
        for addr in [a for a, t in self.suspects.items() if t < now]:
            del self.suspects[addr]
        return frozenset(self.suspects)

    # -- bootstrap ----------------------------------------------------------------
    def create(self) -> None:
        """Form a new ring out of this gateway's vnodes."""
        first = self.vnodes[0]
        for v in self.vnodes[1:]:
            self._join_local(v, first)
        self.start()

    def _join_local(self, v: ChordNode, via: ChordNode) -> None:
        target = v.id
        node = via
        for _ in range(len(self.vnodes) + 1):
            done, ref = node.route(target)
            if done:
                v.set_successors([ref])
                return
            node = self.by_id[ref.id]
        v.set_successors([via.ref])

    def join(self, bootstrap: str, callback: Callable[[Exception | None], None]) -> None:
        """Join every vnode through the gateway at ``bootstrap``."""
        remaining = [len(self.vnodes)]
        failed: list[Exception] = []

        def one_done(err):
            if err is not None:
                failed.append(err)
            remaining[0] -= 1
            if remaining[0] == 0:
                if not failed:
                    self.start()
                callback(failed[0] if failed else None)

        for v in self.vnodes:
            self._join_one(v, bootstrap, one_done)

    def _join_one(self, v: ChordNode, bootstrap: str, done) -> None:
        payload = {"target": "", "id": v.hex, "hops": 0, "route": []}

        def on_resp(env):
            if env is None or env.payload.get("status") != "ok":
                done(JoinFailed(f"bootstrap {bootstrap} did not answer"))
                return
            ref = NodeRef.from_wire(env.payload["node"], self.m)
            if ref.id == v.id:
                done(IdCollision(f"identifier {v.hex} already on the overlay"))
                return
            v.set_successors([ref])
            done(None)

        self.ep.request(bootstrap, "FindSuccessor", payload, self.config.join_timeout_ms, on_resp,
                        reply_to=self.ep.address)

    # -- periodic maintenance -------------------------------------------------------
    def start(self) -> None:
        if not self.running:
            self.running = True
            self.ep.call_later(self.config.stabilize_ms, self._tick, background=True)

    def stop(self) -> None:
        self.running = False

    def _tick(self) -> None:
        if not self.running or self.ep.closed:
            return
        for v in self.vnodes:
            self.check_predecessor(v)
            self.stabilize(v)
            self.fix_fingers(v)
            self._probe_lost(v)
        self.ep.call_later(self.config.stabilize_ms, self._tick, background=True)

    def _call(self, ref: NodeRef, kind: str, payload: dict, callback) -> None:
        """RPC to a vnode; ``callback(payload | None)``. Sibling vnodes answer in-process."""
        if self._local(ref) is not None or ref.address == self.ep.address:
            callback(self.serve(kind, payload))
            return

        def on_resp(env):
            if env is None:
                self.suspect(ref.address)
                callback(None)
            else:
                self.alive(ref.address)
                callback(env.payload)

        self.ep.request(ref.address, kind, payload, self.config.rpc_ms, on_resp)

    def stabilize(self, v: ChordNode) -> None:
        succ = v.successor
        if succ == v.ref:
            if v.predecessor is not None:
                v.set_successors([v.predecessor])
                self._notify(v.successor, v.ref)
            return

        def on_resp(p):
            if p is None:
                v.successor_failed(succ)
                if v.successor == v.ref:
                    if not self.isolated:
                        log.warning("%s: overlay isolated, all successors unreachable", v.hex)
                    self.isolated = True
                return
            self.isolated = False
            x = NodeRef.from_wire(p["node"], self.m) if p.get("node") else None
            rest = [NodeRef.from_wire(s, self.m) for s in p.get("successors", [])]
            if v.successor != succ:
                return  # changed while we waited
            if x is not None and x != v.ref and in_interval(x.id, v.id, succ.id, m=self.m) \
                    and x.address not in self._excluded():
                v.set_successors([x, succ] + rest)
            else:
                v.set_successors([succ] + rest)
            self._notify(v.successor, v.ref)

        self._call(succ, "GetPredecessor", {"target": id_to_hex(succ.id, self.m)}, on_resp)

    def _notify(self, target: NodeRef, candidate: NodeRef) -> None:
        payload = {"target": id_to_hex(target.id, self.m), "candidate": candidate.to_wire(self.m)}
        if target.address == self.ep.address:
            self.serve("Notify", payload)
        else:
            self.ep.send(target.address, "Notify", payload)

    def check_predecessor(self, v: ChordNode) -> None:
        pred = v.predecessor
        if pred is None or pred.address == self.ep.address:
            return

        def on_resp(p):
            if p is None and v.predecessor == pred:
                log.info("%s: predecessor %s unreachable", v.hex, pred.physical)
                v.predecessor_failed()

        self._call(pred, "Ping", {"target": id_to_hex(pred.id, self.m)}, on_resp)

    def fix_fingers(self, v: ChordNode) -> None:
        i = v.next_finger
        start = finger_start(v.id, i + 1, self.m)

        def done(ref, hops, route, err):
            if ref is None:
                return
            v.fingers[i] = ref
            j = i + 1
            while j < self.m and in_interval(finger_start(v.id, j + 1, self.m), v.id, ref.id,
                                             closed_right=True, m=self.m):
                v.fingers[j] = ref
                j += 1
            v.next_finger = j % self.m

        v.next_finger = (i + 1) % self.m
        self.lookup_from(v, start, done, retries=0, record=False)

    def _probe_lost(self, v: ChordNode) -> None:
        if not v.lost:
            return
        ref = v.lost[min(v.lost, key=lambda k: distance(v.id, k, self.m))]

        def on_resp(p):
            if p is None:
                return
            v.lost.pop(ref.id, None)
            if in_interval(ref.id, v.id, v.successor.id, m=self.m) or v.successor == v.ref:
                log.info("%s: successor %s is back", v.hex, ref.physical)
                v.set_successors([ref] + v.successors)

        if ref.address in self.suspects:
            # probe with a plain request so a dead node is not re-suspected forever
            self.ep.request(ref.address, "GetPredecessor",
                            {"target": id_to_hex(ref.id, self.m)}, self.config.rpc_ms,
                            lambda env: on_resp(None if env is None else env.payload))
        else:
            self._call(ref, "GetPredecessor", {"target": id_to_hex(ref.id, self.m)}, on_resp)

    # -- serving ------------------------------------------------------------------------------
    def _vnode_for(self, target: str) -> ChordNode | None:
        if not target:
            return self.vnodes[0]
        try:
            return self.by_id.get(hex_to_id(target, self.m))
        except InvalidArgument:
            return None

    def serve(self, kind: str, p: dict) -> dict | None:
        """Answer a request-response Chord RPC addressed to one of our vnodes."""
        v = self._vnode_for(p.get("target") or "")
        if kind == "GetPredecessor":
            if v is None:
                return {"successors": []}
            out = {"successors": [s.to_wire(self.m) for s in v.successors]}
            if v.predecessor is not None:
                out["node"] = v.predecessor.to_wire(self.m)
            return out
        if kind == "Notify":
            if v is not None:
                v.notify(NodeRef.from_wire(p["candidate"], self.m))
            return None
        if kind == "Ping":
            return {}
        raise ValueError(kind)

    def handle(self, env: Envelope, src: str) -> bool:
        """Process a Chord message; False if it is not one."""
        if env.kind == "FindSuccessor":
            self._on_find_successor(env, src)
        elif env.kind == "GetPredecessor":
            self.ep.reply(src, env, "GetPredecessorResp", self.serve("GetPredecessor", env.payload))
        elif env.kind == "Notify":
            self.serve("Notify", env.payload)
        else:
            return False
        self.alive(src)
        return True

    # -- lookups ------------------------------------------------------------------------------
    def start_vnode(self, target: int) -> ChordNode:
        """Our vnode closest before ``target``: the cheapest place to start a lookup."""
        return min(self.vnodes, key=lambda v: distance(v.id, target, self.m))

    def locate(self, key_hash: int, callback: LookupCallback) -> None:
        self.lookup_from(self.start_vnode(key_hash), key_hash, callback)

    def lookup_from(self, v: ChordNode, target: int, callback: LookupCallback, *,
                    retries: int | None = None, record: bool = True) -> None:
        left = self.config.lookup_retries if retries is None else retries
        route: list[str] = []

        def finish(ref, hops, rt, err):
            if record and ref is not None:
                self.hops.append(hops)
            callback(ref, hops, rt, err)

        def attempt(left):
            status, ref, hops, rt, nxt, payload = self._walk(v, target, 0, [])
            route[:] = rt
            if status == "done":
                finish(ref, hops, rt, None)
                return
            if status == "failed":
                finish(None, hops, rt, LookupFailed("lookup exceeded hop bound", rt))
                return

            def on_resp(env):
                if env is not None and env.payload.get("status") == "ok":
                    self.alive(nxt.address)
                    p = env.payload
                    finish(NodeRef.from_wire(p["node"], self.m), p["hops"], p["route"], None)
                    return
                if env is None:
                    self.suspect(nxt.address)
                if left > 0:
                    self.ep.call_later(self.config.stabilize_ms, attempt, left - 1)
                else:
                    finish(None, 0, route, LookupFailed(
                        f"lookup of {id_to_hex(target, self.m)} failed", route))

            self.ep.request(nxt.address, "FindSuccessor", payload, self.config.lookup_timeout_ms,
                            on_resp, reply_to=self.ep.address)

        attempt(left)

    def _walk(self, v: ChordNode, target: int, hops: int, route: list):
        """Route locally until resolved or the next hop is remote."""
        exclude = self._excluded()
        limit = self.m + len(self.vnodes) + 8
        while True:
            route = route + [v.hex]
            done, ref = v.route(target, exclude)
            if done:
                return "done", ref, hops, route, None, None
            hops += 1
            if hops > limit:
                return "failed", None, hops, route, None, None
            local = self._local(ref)
            if local is not None:
                v = local
                continue
            payload = {"target": id_to_hex(ref.id, self.m), "id": id_to_hex(target, self.m),
                       "hops": hops, "route": route}
            return "forward", None, hops, route, ref, payload

    def _on_find_successor(self, env: Envelope, src: str) -> None:
        p = env.payload
        origin = env.reply_to or src
        v = self._vnode_for(p["target"])
        try:
            target = hex_to_id(p["id"], self.m)
        except InvalidArgument:
            v = None
        if v is None:
            self._answer(origin, env.id, {"status": "no_such_node", "hops": p["hops"],
                                          "route": p["route"]})
            return
        status, ref, hops, route, nxt, payload = self._walk(v, target, p["hops"], p["route"])
        if status == "done":
            self._answer(origin, env.id, {"status": "ok", "node": ref.to_wire(self.m),
                                          "hops": hops, "route": route})
        elif status == "failed":
            self._answer(origin, env.id, {"status": "lookup_failed", "hops": hops, "route": route})
        else:
            self.ep.forward(nxt.address, Envelope(env.id, "FindSuccessor", payload, origin))

    def _answer(self, origin: str, msg_id: int, payload: dict) -> None:
        if origin == self.ep.address:
            self.ep.deliver(Envelope(msg_id, "FindSuccessorResp", payload), origin)
        else:
            self.ep.send(origin, "FindSuccessorResp", payload, msg_id=msg_id)


def ring_refs(overlays) -> list[NodeRef]:
    return sorted((v.ref for o in overlays for v in o.vnodes), key=lambda r: r.id)


def converged(overlays, fingers: bool = True) -> bool:
    """Every vnode's successor, predecessor and (optionally) fingers match the oracle."""
    refs = ring_refs(overlays)
    if not refs:
        return True
    m = overlays[0].m
    ids = [r.id for r in refs]
    index = {r.id: i for i, r in enumerate(refs)}
    for o in overlays:
        for v in o.vnodes:
            i = index[v.id]
            succ = refs[(i + 1) % len(refs)]
            pred = refs[i - 1]
            if len(refs) == 1:
                if v.successor != v.ref:
                    return False
                continue
            if v.successor != succ or v.predecessor != pred:
                return False
            if fingers:
                for k in range(m):
                    j = bisect.bisect_left(ids, finger_start(v.id, k + 1, m))
                    if v.fingers[k] != refs[j % len(refs)]:
                        return False
    return True
