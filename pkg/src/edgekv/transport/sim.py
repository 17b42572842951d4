"""Deterministic in-process network with per-link latency/bandwidth shaping.

Virtual time advances in ticks of 0.01 ms. Events are ordered by
``(tick, sequence)``; every random choice made by a node comes from
``rng_for`` streams derived from the network seed, so a run is a pure
function of (topology, workload, seed).
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass
from typing import Callable

from edgekv import wire
from edgekv.errors import ConfigError, HorizonExceeded
from edgekv.transport.base import EDGE, Endpoint, TopologyProfile
from edgekv.wire import Envelope

log = logging.getLogger(__name__)

TICKS_PER_MS = 100

_DELIVER = 0
_PROCESS = 1
_TIMER = 2


def ms_to_ticks(ms: float) -> int:
    return int(round(ms * TICKS_PER_MS))


class Timer:
    __slots__ = ("owner", "fn", "args", "cancelled", "due", "cause")

    def __init__(self, owner, fn, args, due, cause):
        self.owner = owner
        self.fn = fn
        self.args = args
        self.due = due
        self.cause = cause
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True

    @property
    def live(self) -> bool:
        return not self.cancelled and (self.owner is None or not self.owner.closed)


@dataclass(frozen=True)
class TraceRecord:
    sent: int
    delivered: int
    src: str
    dst: str
    kind: str
    id: int
    size: int
    cause: int


class SimNetwork:
    def __init__(self, profile: TopologyProfile = EDGE, seed: int = 0, *,
                 service_ms: float = 0.0, record_trace: bool = False):
        self.profile = profile
        self.seed = seed
        self.service_ticks = ms_to_ticks(service_ms)
        self.record_trace = record_trace
        self.now_ticks = 0
        self.endpoints: dict[str, Endpoint] = {}
        self.roles: dict[str, str] = {}
        self.trace: list[TraceRecord] = []
        self.kind_counts: Counter = Counter()
        self.cause_counts: Counter = Counter()
        self.dropped = 0
        self.delivered = 0
        self.cause = 0
        self._causes = itertools.count(1)
        self._queue: list = []
        self._seq = itertools.count()
        self._inflight = 0
        self._link_tail: dict[tuple[str, str], int] = {}
        self._busy_until: dict[str, int] = {}
        self._blocked: set[tuple[str, str]] = set()
        self._digest = hashlib.sha256()

    # -- topology -----------------------------------------------------------
    def add(self, address: str, role: str) -> Endpoint:
        if address in self.endpoints:
            raise ConfigError(f"address {address!r} already registered")
        ep = Endpoint(self, address, role)
        self.endpoints[address] = ep
        self.roles[address] = role
        return ep

    def crash(self, address: str) -> None:
        """Stop a node: drop its timers, pending requests and in-flight deliveries."""
        ep = self.endpoints.pop(address, None)
        if ep is not None:
            ep.close()
        self._busy_until.pop(address, None)

    def is_up(self, address: str) -> bool:
        return address in self.endpoints

    def partition(self, side_a, side_b) -> None:
        for a in side_a:
            for b in side_b:
                if a != b:
                    self._blocked.add((a, b))
                    self._blocked.add((b, a))

    def isolate(self, nodes) -> None:
        nodes = list(nodes)
        others = [a for a in sorted(self.roles) if a not in nodes]
        self.partition(nodes, others)

    def heal(self) -> None:
        self._blocked.clear()

    def connected(self, a: str, b: str) -> bool:
        return (a, b) not in self._blocked

    # -- time ---------------------------------------------------------------
    def now(self) -> float:
        return self.now_ticks / TICKS_PER_MS

    def rng_for(self, name: str) -> random.Random:
        return random.Random(f"{self.seed}/{name}")

    def new_cause(self) -> int:
        self.cause = next(self._causes)
        return self.cause

    def schedule(self, delay_ticks: int, fn: Callable, *args, owner: Endpoint | None = None,
                 background: bool = False) -> Timer:
        due = self.now_ticks + max(0, int(delay_ticks))
        timer = Timer(owner, fn, args, due, 0 if background else self.cause)
        heapq.heappush(self._queue, (due, next(self._seq), _TIMER, timer))
        return timer

    def call_later(self, owner: Endpoint, delay_ms: float, fn: Callable, *args,
                   background: bool = False) -> Timer:
        return self.schedule(ms_to_ticks(delay_ms), fn, *args, owner=owner, background=background)

    # -- messages -------------------------------------------------------------
    def transmit(self, src: str, dst: str, env: Envelope) -> None:
        frame = wire.encode(env)
        self.kind_counts[env.kind] += 1
        self.cause_counts[self.cause] += 1
        src_role = self.roles.get(src)
        dst_role = self.roles.get(dst)
        if src_role is None or dst_role is None or (src, dst) in self._blocked:
            self.dropped += 1
            return
        link = self.profile.link(src_role, dst_role)
        # serialization delay rounds up so a frame never arrives early
        ser = math.ceil(len(frame) * 8 * TICKS_PER_MS * 1e3 / (link.bandwidth_mbps * 1e6) - 1e-9)
        due = self.now_ticks + ms_to_ticks(link.latency_ms) + ser
        key = (src, dst)
        due = max(due, self._link_tail.get(key, 0))
        self._link_tail[key] = due
        record = TraceRecord(self.now_ticks, due, src, dst, env.kind, env.id, len(frame), self.cause)
        self._digest.update(f"{self.now_ticks}|{due}|{src}|{dst}|".encode())
        self._digest.update(frame)
        if self.record_trace:
            self.trace.append(record)
        self._inflight += 1
        heapq.heappush(self._queue, (due, next(self._seq), _DELIVER, (record, frame)))

    def trace_digest(self) -> str:
        return self._digest.copy().hexdigest()

    # -- event loop -------------------------------------------------------------
    def _run_event(self, item) -> None:
        tick, _, kind, data = item
        self.now_ticks = tick
        if kind == _TIMER:
            if data.live:
                self.cause = data.cause
                data.fn(*data.args)
            return
        record, frame = data
        if kind == _DELIVER:
            self._inflight -= 1
            if record.dst not in self.endpoints or (record.src, record.dst) in self._blocked:
                self.dropped += 1
                return
            if self.service_ticks:
                start = max(tick, self._busy_until.get(record.dst, 0))
                done = start + self.service_ticks
                self._busy_until[record.dst] = done
                self._inflight += 1
                heapq.heappush(self._queue, (done, next(self._seq), _PROCESS, data))
                return
        else:
            self._inflight -= 1
        ep = self.endpoints.get(record.dst)
        if ep is None:
            self.dropped += 1
            return
        self.cause = record.cause
        self.delivered += 1
        ep.deliver(wire.decode(frame)[0], record.src)

    def step(self) -> bool:
        if not self._queue:
            return False
        self._run_event(heapq.heappop(self._queue))
        return True

    def next_tick(self) -> int | None:
        while self._queue:
            item = self._queue[0]
            if item[2] == _TIMER and not item[3].live:
                heapq.heappop(self._queue)
                continue
            return item[0]
        return None

    def advance_clock(self, ticks: int) -> None:
        end = self.now_ticks + int(ticks)
        while True:
            nxt = self.next_tick()
            if nxt is None or nxt > end:
                break
            self.step()
        self.now_ticks = end

    def run_for(self, ms: float) -> None:
        self.advance_clock(ms_to_ticks(ms))

    def run_until(self, predicate: Callable[[], bool], max_ms: float,
                  poll_ms: float | None = None) -> bool:
        """Run until ``predicate()`` holds; False if ``max_ms`` of virtual time passed first.

        The predicate is checked after every event, or every ``poll_ms`` of
        virtual time when that is given (for expensive predicates).
        """
        end = self.now_ticks + ms_to_ticks(max_ms)
        if poll_ms:
            while not predicate():
                if self.now_ticks >= end:
                    return False
                self.advance_clock(min(ms_to_ticks(poll_ms), end - self.now_ticks))
            return True
        while not predicate():
            nxt = self.next_tick()
            if nxt is None or nxt > end:
                self.now_ticks = max(self.now_ticks, end)
                return predicate()
            self.step()
        return True

    def _live_timers(self) -> bool:
        return any(item[2] == _TIMER and item[3].live for item in self._queue)

    def run_until_quiescent(self, max_ticks: int) -> int:
        """Run until nothing is in flight and no live timer is armed.

        Returns elapsed ticks; raises ``HorizonExceeded`` if the network is
        still busy after ``max_ticks``.
        """
        start = self.now_ticks
        deadline = start + int(max_ticks)
        while self._inflight or self._live_timers():
            nxt = self.next_tick()
            if nxt is None:
                break
            if nxt > deadline:
                self.now_ticks = deadline
                raise HorizonExceeded(f"not quiescent after {max_ticks} ticks")
            self.step()
        return self.now_ticks - start
