"""Message delivery: a deterministic simulator and a TCP transport behind one ``Endpoint`` API."""

from edgekv.transport.base import (CLI_ST, CLIENT, CLOUD, EDGE, GATEWAY, GW_GW, PROFILES, ST_GW,
                                   ST_ST, STORAGE, Endpoint, LinkProfile, TopologyProfile,
                                   link_class, profile_from_config)
from edgekv.transport.sim import TICKS_PER_MS, SimNetwork, ms_to_ticks

__all__ = [
    "CLI_ST", "CLIENT", "CLOUD", "EDGE", "GATEWAY", "GW_GW", "PROFILES", "ST_GW", "ST_ST",
    "STORAGE", "Endpoint", "LinkProfile", "SimNetwork", "TICKS_PER_MS", "TopologyProfile",
    "link_class", "ms_to_ticks", "profile_from_config",
]
