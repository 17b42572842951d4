"""Client operation histories and a per-key linearizability checker.

The checker is the Wing-Gong search with memoisation on (linearized set,
register value). Each key is an independent register, so histories are
split per key before checking. A write whose outcome is unknown (timeout,
unavailable) may or may not have taken effect: it gets an infinite return
time and may be left out of the linearization. Failed reads carry no
information and are dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

READ = "get"
WRITE = "put"
DELETE = "delete"

DEFINITE = ("ok", "not_found")


@dataclass
class OpRecord:
    client: str
    session: int
    kind: str                 # get / put / delete
    scope: str
    key: bytes
    value: bytes | None       # written value, or the value a read returned
    invoke: float
    complete: float
    status: str
    request_id: str = ""
    attempts: int = 1

    @property
    def latency(self) -> float:
        return self.complete - self.invoke

    @property
    def ok(self) -> bool:
        return self.status in DEFINITE


@dataclass
class _Op:
    inv: float
    ret: float
    write: bool
    value: bytes | None
    required: bool
    rec: OpRecord = field(repr=False)


@dataclass
class CheckResult:
    ok: bool
    key: tuple | None = None
    ops: list = field(default_factory=list)
    checked: int = 0


def _prepare(records) -> list[_Op]:
    ops = []
    for r in records:
        if r.kind == READ:
            if r.status not in DEFINITE:
                continue
            ops.append(_Op(r.invoke, r.complete, False,
                           r.value if r.status == "ok" else None, True, r))
        else:
            value = r.value if r.kind == WRITE else None
            if r.status == "ok":
                ops.append(_Op(r.invoke, r.complete, True, value, True, r))
            elif r.status != "invalid_argument":
                ops.append(_Op(r.invoke, math.inf, True, value, False, r))
    ops.sort(key=lambda o: (o.inv, o.ret))
    return ops


def check_register(records, initial: bytes | None = None, max_states: int = 2_000_000) -> bool:
    """True when the single-register history has a legal linearization."""
    ops = _prepare(records)
    n = len(ops)
    if n == 0:
        return True
    required = 0
    for i, o in enumerate(ops):
        if o.required:
            required |= 1 << i
    seen: set = set()
    stack = [(0, initial)]
    while stack:
        done, state = stack.pop()
        if done & required == required:
            return True
        key = (done, state)
        if key in seen:
            continue
        seen.add(key)
        if len(seen) > max_states:
            raise RuntimeError("linearizability search exceeded its state budget")
        pending = [i for i in range(n) if not done >> i & 1]
        min_ret = min(ops[i].ret for i in pending)
        for i in pending:
            o = ops[i]
            if o.inv > min_ret:
                break  # ops are sorted by invocation; later ones start even later
            if o.write:
                stack.append((done | 1 << i, o.value))
            elif o.value == state:
                stack.append((done | 1 << i, state))
    return False


def check_history(records, initial: dict | None = None) -> CheckResult:
    """Check every (scope, key) register in ``records`` independently."""
    by_key: dict[tuple, list[OpRecord]] = {}
    for r in records:
        by_key.setdefault((r.scope, r.key), []).append(r)
    initial = initial or {}
    for k in sorted(by_key):
        if not check_register(by_key[k], initial.get(k)):
            return CheckResult(False, k, by_key[k], len(records))
    return CheckResult(True, checked=len(records))
