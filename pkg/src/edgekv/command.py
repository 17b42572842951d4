"""Replicated commands and log entries."""

from __future__ import annotations

import base64
from dataclasses import dataclass
from typing import Any

LOCAL = "local"
GLOBAL = "global"
SCOPES = (LOCAL, GLOBAL)

PUT = "Put"
DELETE = "Delete"
# Internal kinds: the no-op a new leader commits in its own term, and the
# learner-membership change used by backup groups.
NOOP = "Noop"
ADD_LEARNER = "AddLearner"
KINDS = (PUT, DELETE, NOOP, ADD_LEARNER)


@dataclass(frozen=True)
class Command:
    kind: str
    scope: str = LOCAL
    key: bytes = b""
    value: bytes | None = None
    request_id: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown command kind {self.kind!r}")
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.kind == PUT and self.value is None:
            raise ValueError("Put needs a value")
        if self.kind == DELETE and self.value is not None:
            raise ValueError("Delete carries no value")

    def to_wire(self) -> dict[str, Any]:
        out = {"kind": self.kind, "scope": self.scope, "key": self.key,
               "requestId": self.request_id}
        if self.value is not None:
            out["value"] = self.value
        return out

    @classmethod
    def from_wire(cls, d: dict[str, Any]) -> Command:
        return cls(d["kind"], d["scope"], d["key"], d.get("value"), d["requestId"])

    def to_json(self) -> dict[str, Any]:
        out = {"kind": self.kind, "scope": self.scope,
               "key": base64.b64encode(self.key).decode("ascii"), "rid": self.request_id}
        if self.value is not None:
            out["value"] = base64.b64encode(self.value).decode("ascii")
        return out

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> Command:
        value = d.get("value")
        return cls(d["kind"], d["scope"], base64.b64decode(d["key"]),
                   None if value is None else base64.b64decode(value), d["rid"])


@dataclass(frozen=True)
class LogEntry:
    term: int
    index: int
    command: Command

    def to_wire(self) -> dict[str, Any]:
        return {"term": self.term, "index": self.index, "command": self.command.to_wire()}

    @classmethod
    def from_wire(cls, d: dict[str, Any]) -> LogEntry:
        return cls(d["term"], d["index"], Command.from_wire(d["command"]))

    def to_json(self) -> dict[str, Any]:
        return {"term": self.term, "index": self.index, "cmd": self.command.to_json()}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> LogEntry:
        return cls(d["term"], d["index"], Command.from_json(d["cmd"]))


def client_of(request_id: str) -> str:
    """Session part of a ``<session>:<seq>`` request id."""
    return request_id.rsplit(":", 1)[0]
