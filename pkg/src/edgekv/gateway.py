"""Gateway: overlay member, resource finder, location cache and backup reads.

A gateway stores routing state only. Global keys hash onto the overlay;
the group whose gateway owns the key's arc applies the operation. Reads
for a group that cannot be reached are served from its backup group's
learner replicas; writes to such a group are rejected.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field

from edgekv.chord import NodeRef, Overlay, OverlayConfig, vnode_name
from edgekv.command import ADD_LEARNER, DELETE, GLOBAL, PUT
from edgekv.edge import LIN, MODES, SER
from edgekv.errors import InvalidArgument
from edgekv.ring import hash_id
from edgekv.storage import validate_key_value

log = logging.getLogger(__name__)

OK = "ok"
NOT_FOUND = "not_found"
WRONG_OWNER = "wrong_owner"
OWNER_UNAVAILABLE = "owner_unavailable"
GROUP_UNAVAILABLE = "group_unavailable"
GLOBAL_UNAVAILABLE = "global_unavailable"
LOOKUP_FAILED = "lookup_failed"
NO_BACKUP = "no_backup"
TIMEOUT = "timeout"
INVALID = "invalid_argument"

GLOBAL_KINDS = ("GlobalPut", "GlobalGet", "GlobalDelete")
_OPS = {"GlobalPut": PUT, "GlobalDelete": DELETE}


@dataclass
class GatewayConfig:
    group: str                      # also the gateway's overlay (physical) name
    members: list[str]
    vnodes: int = 1
    cache_capacity: int = 1024
    bootstrap: str | None = None
    forward_timeout_ms: float = 3000.0
    group_timeout_ms: float = 2000.0
    member_timeout_ms: float = 500.0
    backup_timeout_ms: float = 1000.0
    down_failures: int = 3
    down_window_ms: float = 5000.0
    probe_ms: float = 500.0
    backup_refresh_ms: float = 1000.0
    relocate_attempts: int = 3
    overlay: OverlayConfig = field(default_factory=OverlayConfig)


class LocationCache:
    """LRU map from key hash to owning overlay identity."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._map: OrderedDict[int, NodeRef] = OrderedDict()
        self.hits = 0
        self.misses = 0
        self.invalidations = 0

    def get(self, h: int) -> NodeRef | None:
        ref = self._map.get(h)
        if ref is None:
            self.misses += 1
            return None
        self._map.move_to_end(h)
        self.hits += 1
        return ref

    def put(self, h: int, ref: NodeRef) -> None:
        if self.capacity <= 0:
            return
        self._map[h] = ref
        self._map.move_to_end(h)
        while len(self._map) > self.capacity:
            self._map.popitem(last=False)

    def invalidate(self, h: int) -> None:
        if self._map.pop(h, None) is not None:
            self.invalidations += 1

    def drop_address(self, address: str) -> None:
        for h in [h for h, r in self._map.items() if r.address == address]:
            del self._map[h]

    def __len__(self) -> int:
        return len(self._map)


class Gateway:
    def __init__(self, endpoint, config: GatewayConfig):
        if not config.members:
            raise InvalidArgument("a gateway needs at least one group member")
        self.ep = endpoint
        self.config = config
        self.group = config.group
        self.overlay = Overlay(endpoint, config.group, config.vnodes, config.overlay)
        self.cache = LocationCache(config.cache_capacity)
        self.leader: str | None = None
        self.backup: NodeRef | None = None      # our backup group's gateway
        self.backups: dict[str, str] = {}       # physical -> backup gateway address
        self.learners_added: set[str] = set()
        self._failures: dict[str, list[float]] = {}
        self.down: set[str] = set()
        self.joined = False
        self.running = False
        self.backup_reads = 0
        self.reassignments = 0
        endpoint.handler = self.handle

    # -- lifecycle ----------------------------------------------------------------------
    def start(self, callback=None) -> None:
        """Create the overlay, or join it through ``config.bootstrap``."""
        def joined(err):
            if err is None:
                self.joined = True
                self.running = True
                self.ep.call_later(self.config.backup_refresh_ms, self._refresh_backup,
                                   background=True)
            else:
                log.error("%s: overlay join failed: %s", self.group, err)
            if callback is not None:
                callback(err)

        if self.config.bootstrap is None:
            self.overlay.create()
            joined(None)
        else:
            self.overlay.join(self.config.bootstrap, joined)

    def stop(self) -> None:
        self.running = False
        self.overlay.stop()

    # -- dispatch ---------------------------------------------------------------------------
    def handle(self, env, src: str) -> None:
        if self.overlay.handle(env, src):
            return
        if env.kind == "Ping":
            out = {"group": self.group, "members": list(self.config.members)}
            if self.backup is not None:
                out["backup"] = self.backup.address
            self.ep.reply(src, env, "Pong", out)
        elif env.kind in GLOBAL_KINDS:
            self._on_global(env, src)

    def _on_global(self, env, src: str) -> None:
        p = env.payload

        def respond(status, value=None, error=None, owner=None):
            out = {"status": status}
            if value is not None:
                out["value"] = value
            if error:
                out["error"] = error
            if owner is not None:
                out["owner"] = owner.to_wire(self.overlay.m)
            if self.backup is not None and status not in (WRONG_OWNER, OWNER_UNAVAILABLE):
                out["backup"] = self.backup.address
            self.ep.reply(src, env, "GlobalResponse", out)

        try:
            if env.kind == "GlobalPut":
                validate_key_value(p["key"], p["value"])
            else:
                validate_key_value(p["key"])
            if env.kind == "GlobalGet" and p["mode"] not in MODES:
                raise InvalidArgument(f"unknown read mode {p['mode']!r}")
        except InvalidArgument as exc:
            respond(INVALID, error=str(exc))
            return

        if p.get("backupFor"):
            self._serve_backup(p["backupFor"], p["key"], respond)
        elif p["direct"]:
            self._owner_side(env.kind, p, respond)
        else:
            self._origin(env.kind, p, respond)

    # -- ownership ------------------------------------------------------------------------------
    def owns(self, h: int) -> tuple[bool, NodeRef | None]:
        """(True, ghost) when one of our vnodes covers ``h``; ghost is set if the arc is
        inherited from an unreachable predecessor and must not be served."""
        for v in self.overlay.vnodes:
            if v.predecessor is None and v.successor != v.ref:
                continue
            if v.responsible_for(h):
                owner = v.owner_of(h)
                return True, (None if owner == v.ref else owner)
        return False, None

    # -- origin path ----------------------------------------------------------------------------
    def _origin(self, kind: str, p: dict, respond) -> None:
        h = hash_id(p["key"], self.overlay.m)
        is_read = kind == "GlobalGet"

        def route(attempts_left: int) -> None:
            mine, ghost = self.owns(h)
            if mine:
                if ghost is None:
                    self._owner_side(kind, p, own_group_reply)
                else:
                    unreachable(ghost, "owner gateway unreachable")
                return
            cached = self.cache.get(h)
            if cached is not None:
                forward(cached, attempts_left)
                return

            def located(ref, hops, rt, err):
                if ref is None:
                    respond(LOOKUP_FAILED, error=str(err))
                    return
                if ref.address == self.ep.address:
                    # our own vnode, but the arc is not (yet) ours to serve
                    if attempts_left > 0:
                        self.ep.call_later(self.config.overlay.stabilize_ms, route,
                                           attempts_left - 1)
                    else:
                        respond(LOOKUP_FAILED, error="ownership unsettled")
                    return
                self.cache.put(h, ref)
                forward(ref, attempts_left)

            self.overlay.locate(h, located)

        def forward(ref: NodeRef, attempts_left: int) -> None:
            if ref.physical in self.down:
                unreachable(ref, "owner group marked down")
                return
            payload = dict(p, direct=True)

            def on_resp(env):
                if env is None:
                    self.cache.invalidate(h)
                    self.note_failure(ref)
                    if is_read:
                        self.backup_read(ref.physical, p["key"], respond)
                    else:
                        respond(TIMEOUT, error=f"owner {ref.physical} did not answer")
                    return
                r = env.payload
                status = r["status"]
                if r.get("backup"):
                    self.backups[ref.physical] = r["backup"]
                if status == WRONG_OWNER:
                    self.cache.invalidate(h)
                    if attempts_left > 0:
                        route(attempts_left - 1)
                    else:
                        respond(LOOKUP_FAILED, error="owner kept moving")
                    return
                if status == OWNER_UNAVAILABLE:
                    self.cache.invalidate(h)
                    owner = NodeRef.from_wire(r["owner"], self.overlay.m) if r.get("owner") else ref
                    unreachable(owner, r.get("error") or "owner unavailable")
                    return
                if status == GROUP_UNAVAILABLE:
                    self.note_failure(ref)
                    unreachable(ref, r.get("error") or "owner group has no quorum")
                    return
                self.note_success(ref)
                respond(status, r.get("value"), r.get("error"))

            self.ep.request(ref.address, kind, payload, self.config.forward_timeout_ms, on_resp)

        def unreachable(owner: NodeRef, why: str) -> None:
            if is_read:
                self.backup_read(owner.physical, p["key"], respond)
            else:
                respond(GROUP_UNAVAILABLE, error=f"{why}; writes are not redirected")

        def own_group_reply(status, value=None, error=None, owner=None):
            if status == GROUP_UNAVAILABLE and is_read:
                self.backup_read(self.group, p["key"], respond)
            else:
                respond(status, value, error, owner)

        route(self.config.relocate_attempts)

    # -- failure tracking -------------------------------------------------------------------------
    def note_failure(self, ref: NodeRef) -> None:
        now = self.ep.now()
        window = [t for t in self._failures.get(ref.physical, [])
                  if now - t <= self.config.down_window_ms]
        window.append(now)
        self._failures[ref.physical] = window
        self.cache.drop_address(ref.address)
        if len(window) >= self.config.down_failures and ref.physical not in self.down:
            log.warning("%s: marking group %s down", self.group, ref.physical)
            self.down.add(ref.physical)
            self.ep.call_later(self.config.probe_ms, self._probe, ref, background=True)

    def note_success(self, ref: NodeRef) -> None:
        self._failures.pop(ref.physical, None)

    def _probe(self, ref: NodeRef) -> None:
        if ref.physical not in self.down or self.ep.closed:
            return

        def on_resp(env):
            if env is not None and ref.physical in self.down:
                log.info("%s: group %s reachable again", self.group, ref.physical)
                self.down.discard(ref.physical)
                self._failures.pop(ref.physical, None)
            elif ref.physical in self.down:
                self.ep.call_later(self.config.probe_ms, self._probe, ref, background=True)

        self.ep.request(ref.address, "Ping", {}, self.config.probe_ms, on_resp)

    # -- owner side ---------------------------------------------------------------------------------
    def _owner_side(self, kind: str, p: dict, respond) -> None:
        h = hash_id(p["key"], self.overlay.m)
        mine, ghost = self.owns(h)
        if not mine:
            respond(WRONG_OWNER, error="key hash is outside this gateway's arcs")
            return
        if ghost is not None:
            respond(OWNER_UNAVAILABLE, error="arc belongs to an unreachable predecessor",
                    owner=ghost)
            return

        def done(status, value=None, error=None):
            if status in (OK, NOT_FOUND, INVALID):
                respond(status, value, error)
            else:
                respond(GROUP_UNAVAILABLE, error=error or status)

        if kind == "GlobalGet":
            self.group_call("GroupRead", {"group": self.group, "scope": GLOBAL, "key": p["key"],
                                          "mode": p["mode"]}, done)
        else:
            payload = {"group": self.group, "op": _OPS[kind], "scope": GLOBAL, "key": p["key"],
                       "requestId": p["requestId"]}
            if kind == "GlobalPut":
                payload["value"] = p["value"]
            self.group_call("GroupPropose", payload, done)

    def group_call(self, kind: str, payload: dict, done, timeout_ms: float | None = None) -> None:
        """Send a group RPC to the leader, following redirects and trying other members."""
        deadline = self.ep.now() + (timeout_ms or self.config.group_timeout_ms)
        members = self.config.members
        tried = [0]

        def pick() -> str:
            if self.leader is not None and self.leader in members:
                return self.leader
            return members[tried[0] % len(members)]

        def attempt() -> None:
            remaining = deadline - self.ep.now()
            if remaining <= 0:
                done(GROUP_UNAVAILABLE, error="no leader answered before the deadline")
                return
            target = pick()

            def on_resp(env):
                if env is None:
                    if self.leader == target:
                        self.leader = None
                    tried[0] += 1
                    attempt()
                    return
                r = env.payload
                status = r["status"]
                if status == "redirect":
                    hint = r.get("leaderHint")
                    if hint and hint != target:
                        self.leader = hint
                        attempt()
                    else:
                        self.leader = None
                        tried[0] += 1
                        self.ep.call_later(min(50.0, remaining), attempt)
                    return
                if status in (OK, NOT_FOUND, INVALID):
                    if kind == "GroupPropose" or payload.get("mode") == LIN:
                        self.leader = target
                    done(status, r.get("value"), r.get("error"))
                    return
                # unavailable or timeout inside the group: give the group time to recover
                self.ep.call_later(min(50.0, remaining), attempt)

            self.ep.request(target, kind, payload, min(remaining, self.config.member_timeout_ms),
                            on_resp)

        attempt()

    # -- backup reads ---------------------------------------------------------------------------
    def backup_read(self, physical: str, key: bytes, respond) -> None:
        """Serve a read for unreachable group ``physical`` from its backup group."""
        self.backup_reads += 1

        def with_backup(address: str | None) -> None:
            if address is None:
                respond(GLOBAL_UNAVAILABLE, error=f"group {physical} is unreachable and has no backup")
                return
            if address == self.ep.address:
                self._serve_backup(physical, key, respond)
                return
            payload = {"key": key, "mode": SER, "direct": True, "backupFor": physical}

            def on_resp(env):
                if env is None:
                    respond(GLOBAL_UNAVAILABLE, error="backup gateway did not answer")
                    return
                r = env.payload
                if r["status"] in (OK, NOT_FOUND):
                    respond(r["status"], r.get("value"))
                else:
                    respond(GLOBAL_UNAVAILABLE, error=r.get("error") or r["status"])

            self.ep.request(address, "GlobalGet", payload, self.config.backup_timeout_ms, on_resp)

        known = self.backups.get(physical)
        if known is not None:
            with_backup(known)
        else:
            self.find_backup(physical, lambda ref: with_backup(ref.address if ref else None))

    def find_backup(self, physical: str, callback) -> None:
        """The gateway owning the successor of ``physical``'s first identifier, skipping
        ``physical``'s own vnodes. ``None`` when no other group is on the overlay."""
        m = self.overlay.m
        start = hash_id(vnode_name(physical, 0), m)
        budget = [self.config.vnodes * 4 + 64]

        def step(after: int) -> None:
            def located(ref, hops, rt, err):
                if ref is None:
                    callback(None)
                elif ref.physical != physical:
                    callback(ref)
                elif budget[0] <= 0 or ref.id == start:
                    callback(None)
                else:
                    budget[0] -= 1
                    step(ref.id)

            self.overlay.locate((after + 1) % (1 << m), located)

        step(start)

    def _serve_backup(self, physical: str, key: bytes, respond) -> None:
        members = list(self.config.members)

        def attempt(i: int) -> None:
            if i >= len(members):
                respond(NO_BACKUP, error=f"no member holds a replica of {physical}")
                return

            def on_resp(env):
                if env is not None and env.payload["status"] in (OK, NOT_FOUND):
                    respond(env.payload["status"], env.payload.get("value"))
                else:
                    attempt(i + 1)

            self.ep.request(members[i], "GroupRead",
                            {"group": physical, "scope": GLOBAL, "key": key, "mode": SER},
                            self.config.member_timeout_ms, on_resp)

        attempt(0)

    # -- backup assignment ---------------------------------------------------------------------
    def assign_backup_group(self, callback=None) -> None:
        """Recompute our backup group and register its members as learners of ours."""
        def found(ref):
            if ref is None:
                if self.backup is not None:
                    log.info("%s: no backup group available", self.group)
                self.backup = None
            elif self.backup is None or ref.physical != self.backup.physical:
                if self.backup is not None:
                    self.reassignments += 1
                log.info("%s: backup group is now %s", self.group, ref.physical)
                self.backup = ref
                self.learners_added.clear()
            if self.backup is None:
                if callback:
                    callback(None)
                return
            self._register_learners(self.backup, callback)

        self.find_backup(self.group, found)

    def _register_learners(self, ref: NodeRef, callback) -> None:
        def on_pong(env):
            if env is None:
                if callback:
                    callback(ref)
                return
            members = [a for a in env.payload.get("members") or [] if a not in self.learners_added]
            pending = [len(members)]
            if not members and callback:
                callback(ref)
            for addr in members:
                def added(status, value=None, error=None, addr=addr):
                    if status == OK:
                        self.learners_added.add(addr)
                    pending[0] -= 1
                    if pending[0] == 0 and callback:
                        callback(ref)

                self.group_call("GroupPropose", {
                    "group": self.group, "op": ADD_LEARNER, "scope": GLOBAL,
                    "key": addr.encode(), "value": addr.encode(),
                    "requestId": f"{self.group}-gw:learner:{addr}"}, added)

        self.ep.request(ref.address, "Ping", {}, self.config.backup_timeout_ms, on_pong)

    def _refresh_backup(self) -> None:
        if not self.running or self.ep.closed:
            return
        self.assign_backup_group()
        self.ep.call_later(self.config.backup_refresh_ms, self._refresh_backup, background=True)
