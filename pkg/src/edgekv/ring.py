"""Identifier space of the gateway overlay.

Identifiers are plain ints in ``[0, 2**m)``. All helpers take the ring
width ``m`` as a keyword so tests can shrink the ring to 8 bits.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from edgekv.errors import InvalidArgument

M_BITS = 64


def ring_size(m: int = M_BITS) -> int:
    return 1 << m


def hash_id(name: bytes | str, m: int = M_BITS) -> int:
    """First ``m`` bits (big-endian) of SHA-256 over ``name``."""
    if isinstance(name, str):
        name = name.encode("utf-8")
    if not name:
        raise InvalidArgument("cannot hash an empty name")
    digest = int.from_bytes(hashlib.sha256(name).digest(), "big")
    return digest >> (256 - m)


def in_interval(x: int, lo: int, hi: int, *, closed_left: bool = False,
                closed_right: bool = False, m: int = M_BITS) -> bool:
    """Ring membership test with wraparound.

    When ``lo == hi`` the interval spans the whole ring; the single
    endpoint belongs to it only if either side is closed.
    """
    size = 1 << m
    if lo == hi:
        if x == lo:
            return closed_left or closed_right
        return True
    dx = (x - lo) % size
    dhi = (hi - lo) % size
    if dx == 0:
        return closed_left
    if dx == dhi:
        return closed_right
    return dx < dhi


@dataclass(frozen=True)
class RingInterval:
    start: int
    end: int
    closed_left: bool = False
    closed_right: bool = False
    m: int = M_BITS

    def __contains__(self, x: int) -> bool:
        return in_interval(x, self.start, self.end, closed_left=self.closed_left,
                           closed_right=self.closed_right, m=self.m)


def finger_start(n: int, i: int, m: int = M_BITS) -> int:
    if not 1 <= i <= m:
        raise InvalidArgument(f"finger index {i} outside [1, {m}]")
    return (n + (1 << (i - 1))) % (1 << m)


def distance(a: int, b: int, m: int = M_BITS) -> int:
    """Clockwise distance from ``a`` to ``b``."""
    return (b - a) % (1 << m)


def id_to_hex(x: int, m: int = M_BITS) -> str:
    return format(x, f"0{(m + 3) // 4}x")


def hex_to_id(s: str, m: int = M_BITS) -> int:
    try:
        x = int(s, 16)
    except (TypeError, ValueError) as exc:
        raise InvalidArgument(f"bad identifier {s!r}") from exc
    if not 0 <= x < (1 << m):
        raise InvalidArgument(f"identifier {s!r} outside the {m}-bit ring")
    return x
