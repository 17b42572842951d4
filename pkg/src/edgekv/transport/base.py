from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable

from edgekv.errors import ConfigError
from edgekv.wire import RESPONSE_KINDS, Envelope

log = logging.getLogger(__name__)

CLIENT = "client"
STORAGE = "storage"
GATEWAY = "gateway"
ROLES = (CLIENT, STORAGE, GATEWAY)

CLI_ST = "Cli-St"
ST_ST = "St-St"
ST_GW = "St-Gw"
GW_GW = "Gw-Gw"
LINK_CLASSES = (CLI_ST, ST_ST, ST_GW, GW_GW)


@dataclass(frozen=True)
class LinkProfile:
    latency_ms: float
    bandwidth_mbps: float

    def __post_init__(self):
        if self.latency_ms < 0:
            raise ConfigError("latency must be >= 0")
        if self.bandwidth_mbps <= 0:
            raise ConfigError("bandwidth must be > 0")

    def one_way_ms(self, frame_bytes: int) -> float:
        return self.latency_ms + frame_bytes * 8 / (self.bandwidth_mbps * 1e6) * 1e3


@dataclass(frozen=True)
class TopologyProfile:
    name: str
    links: dict[str, LinkProfile] = field(default_factory=dict)

    def __post_init__(self):
        missing = set(LINK_CLASSES) - set(self.links)
        if missing:
            raise ConfigError(f"profile {self.name!r} lacks link classes {sorted(missing)}")

    def link(self, src_role: str, dst_role: str) -> LinkProfile:
        return self.links[link_class(src_role, dst_role)]

    def with_overrides(self, overrides: dict[str, dict[str, float]], name: str | None = None):
        links = dict(self.links)
        for cls, spec in overrides.items():
            if cls not in LINK_CLASSES:
                raise ConfigError(f"unknown link class {cls!r}")
            links[cls] = LinkProfile(float(spec["latencyMs"]), float(spec["bandwidthMbps"]))
        return TopologyProfile(name or f"{self.name}+custom", links)


def link_class(src_role: str, dst_role: str) -> str:
    pair = {src_role, dst_role}
    if CLIENT in pair:
        return CLI_ST
    if pair == {STORAGE}:
        return ST_ST
    if pair == {GATEWAY}:
        return GW_GW
    if pair == {STORAGE, GATEWAY}:
        return ST_GW
    raise ConfigError(f"no link class for {src_role}->{dst_role}")


EDGE = TopologyProfile("edge", {
    CLI_ST: LinkProfile(5, 100),
    ST_ST: LinkProfile(2, 1000),
    ST_GW: LinkProfile(2, 750),
    GW_GW: LinkProfile(10, 500),
})
CLOUD = TopologyProfile("cloud", {
    CLI_ST: LinkProfile(50, 100),
    ST_ST: LinkProfile(0.05, 1000),
    ST_GW: LinkProfile(0.05, 1000),
    GW_GW: LinkProfile(0.05, 1000),
})
PROFILES = {"edge": EDGE, "cloud": CLOUD}


def profile_from_config(spec: Any) -> TopologyProfile:
    """``"edge"``, ``"cloud"`` or ``{"base": ..., "overrides": {...}}``."""
    if isinstance(spec, str):
        try:
            return PROFILES[spec]
        except KeyError:
            raise ConfigError(f"unknown profile {spec!r}") from None
    if isinstance(spec, dict):
        base = profile_from_config(spec.get("base", "edge"))
        return base.with_overrides(spec.get("overrides", {}), spec.get("name"))
    raise ConfigError(f"bad profile spec {spec!r}")


Callback = Callable[[Envelope | None], None]


class Endpoint:
    """A node's attachment to a network: sends, timers, request correlation.

    ``handler(env, src)`` receives every inbound request. Responses are
    matched to outstanding ``request`` calls by id; the callback gets the
    response envelope, or ``None`` on timeout.
    """

    def __init__(self, network, address: str, role: str):
        self.network = network
        self.address = address
        self.role = role
        self.handler: Callable[[Envelope, str], None] | None = None
        # responses nobody is waiting for (one-way protocols such as Raft)
        self.response_handler: Callable[[Envelope, str], None] | None = None
        self.closed = False
        self._ids = itertools.count(1)
        self._pending: dict[int, tuple[Callback, Any]] = {}

    def now(self) -> float:
        return self.network.now()

    def call_later(self, delay_ms: float, fn, *args, background: bool = False):
        """Arm a timer. Background timers are not attributed to the current request."""
        return self.network.call_later(self, delay_ms, fn, *args, background=background)

    def rng(self, name: str = ""):
        return self.network.rng_for(f"{self.address}/{name}")

    def next_id(self) -> int:
        return next(self._ids)

    def send(self, dst: str, kind: str, payload: dict, *, msg_id: int | None = None,
             reply_to: str | None = None) -> int:
        msg_id = self.next_id() if msg_id is None else msg_id
        if not self.closed:
            self.network.transmit(self.address, dst, Envelope(msg_id, kind, payload, reply_to))
        return msg_id

    def forward(self, dst: str, env: Envelope) -> None:
        if not self.closed:
            self.network.transmit(self.address, dst, env)

    def request(self, dst: str, kind: str, payload: dict, timeout_ms: float,
                callback: Callback, *, reply_to: str | None = None) -> int:
        msg_id = self.next_id()
        timer = self.call_later(timeout_ms, self._expire, msg_id)
        self._pending[msg_id] = (callback, timer)
        self.send(dst, kind, payload, msg_id=msg_id, reply_to=reply_to)
        return msg_id

    def reply(self, src: str, request: Envelope, kind: str, payload: dict) -> None:
        self.send(request.reply_to or src, kind, payload, msg_id=request.id)

    def _expire(self, msg_id: int) -> None:
        pending = self._pending.pop(msg_id, None)
        if pending is not None:
            pending[0](None)

    def deliver(self, env: Envelope, src: str) -> None:
        if self.closed:
            return
        if env.kind in RESPONSE_KINDS:
            pending = self._pending.pop(env.id, None)
            if pending is None:
                if self.response_handler is not None:
                    self.response_handler(env, src)
                return  # late or unsolicited
            callback, timer = pending
            timer.cancel()
            callback(env)
            return
        if self.handler is not None:
            self.handler(env, src)

    def close(self) -> None:
        self.closed = True
        self._pending.clear()
