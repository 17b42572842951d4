"""Message schemas and length-prefixed JSON framing.

A frame is a 4-byte big-endian length followed by a UTF-8 JSON object
``{"id", "kind", "payload"[, "replyTo"]}``. Byte-string fields travel
base64-encoded. The field table below is normative; ``docs/wire.md``
mirrors it.
"""

from __future__ import annotations

import base64
import binascii
import json
import struct
from dataclasses import dataclass, field
from typing import Any

from edgekv.errors import FrameTooLarge, ProtocolError

HEADER = struct.Struct(">I")
MAX_FRAME = 16 * 1024 * 1024
MAX_ID = (1 << 64) - 1

COMMAND_SCHEMA = {
    "kind": "str",
    "scope": "str",
    "key": "bytes",
    "value": "bytes?",
    "requestId": "str",
}
ENTRY_SCHEMA = {"term": "int", "index": "int", "command": "command"}
REF_SCHEMA = {"id": "str", "address": "str", "physical": "str"}

SCHEMAS: dict[str, dict[str, str]] = {
    "ClientGet": {"scope": "str", "key": "bytes", "mode": "str"},
    "ClientPut": {"scope": "str", "key": "bytes", "value": "bytes", "requestId": "str"},
    "ClientDelete": {"scope": "str", "key": "bytes", "requestId": "str"},
    "ClientResponse": {"status": "str", "value": "bytes?", "error": "str?",
                       "retryAfterMs": "int?"},
    "RequestVote": {"group": "str", "term": "int", "candidateId": "str",
                    "lastLogIndex": "int", "lastLogTerm": "int"},
    "RequestVoteResp": {"group": "str", "term": "int", "voteGranted": "bool", "voter": "str"},
    "AppendEntries": {"group": "str", "term": "int", "leaderId": "str",
                      "prevLogIndex": "int", "prevLogTerm": "int",
                      "entries": "list[entry]", "leaderCommit": "int", "seq": "int"},
    "AppendEntriesResp": {"group": "str", "term": "int", "success": "bool",
                          "matchIndex": "int", "lastLogIndex": "int", "seq": "int",
                          "follower": "str"},
    "FindSuccessor": {"target": "str", "id": "str", "hops": "int", "route": "list[str]"},
    "FindSuccessorResp": {"status": "str", "node": "ref?", "hops": "int", "route": "list[str]"},
    "GetPredecessor": {"target": "str"},
    "GetPredecessorResp": {"node": "ref?", "successors": "list[ref]"},
    "Notify": {"target": "str", "candidate": "ref"},
    "Ping": {"target": "str?"},
    "Pong": {"group": "str?", "members": "list[str]?", "backup": "str?"},
    "GlobalPut": {"key": "bytes", "value": "bytes", "requestId": "str", "direct": "bool"},
    "GlobalGet": {"key": "bytes", "mode": "str", "direct": "bool", "backupFor": "str?"},
    "GlobalDelete": {"key": "bytes", "requestId": "str", "direct": "bool"},
    "GlobalResponse": {"status": "str", "value": "bytes?", "error": "str?",
                       "owner": "ref?", "backup": "str?"},
    "GroupPropose": {"group": "str", "op": "str", "scope": "str", "key": "bytes",
                     "value": "bytes?", "requestId": "str"},
    "GroupRead": {"group": "str", "scope": "str", "key": "bytes", "mode": "str"},
    "GroupResponse": {"status": "str", "value": "bytes?", "leaderHint": "str?",
                      "error": "str?"},
}

MESSAGE_KINDS = tuple(SCHEMAS)
RESPONSE_KINDS = frozenset({
    "ClientResponse", "RequestVoteResp", "AppendEntriesResp", "FindSuccessorResp",
    "GetPredecessorResp", "Pong", "GlobalResponse", "GroupResponse",
})

_NESTED = {"entry": ENTRY_SCHEMA, "command": COMMAND_SCHEMA, "ref": REF_SCHEMA}


@dataclass
class Envelope:
    id: int
    kind: str
    payload: dict[str, Any] = field(default_factory=dict)
    reply_to: str | None = None


# -- value conversion -------------------------------------------------------

def _to_json(type_: str, value: Any, where: str) -> Any:
    if type_.startswith("list["):
        inner = type_[5:-1]
        if not isinstance(value, (list, tuple)):
            raise ProtocolError(f"{where}: expected list")
        return [_to_json(inner, v, where) for v in value]
    if type_ == "bytes":
        if not isinstance(value, (bytes, bytearray)):
            raise ProtocolError(f"{where}: expected bytes")
        return base64.b64encode(bytes(value)).decode("ascii")
    if type_ in _NESTED:
        return _obj_to_json(_NESTED[type_], value, where)
    _check_scalar(type_, value, where)
    return value


def _from_json(type_: str, value: Any, where: str) -> Any:
    if type_.startswith("list["):
        inner = type_[5:-1]
        if not isinstance(value, list):
            raise ProtocolError(f"{where}: expected list")
        return [_from_json(inner, v, where) for v in value]
    if type_ == "bytes":
        if not isinstance(value, str):
            raise ProtocolError(f"{where}: expected base64 string")
        try:
            return base64.b64decode(value.encode("ascii"), validate=True)
        except (binascii.Error, UnicodeEncodeError) as exc:
            raise ProtocolError(f"{where}: bad base64") from exc
    if type_ in _NESTED:
        return _obj_from_json(_NESTED[type_], value, where)
    _check_scalar(type_, value, where)
    return value


def _check_scalar(type_: str, value: Any, where: str) -> None:
    if type_ == "int":
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif type_ == "str":
        ok = isinstance(value, str)
    elif type_ == "bool":
        ok = isinstance(value, bool)
    else:
        raise ProtocolError(f"{where}: unknown field type {type_}")
    if not ok:
        raise ProtocolError(f"{where}: expected {type_}, got {type(value).__name__}")


def _obj_to_json(schema: dict[str, str], obj: Any, where: str) -> dict[str, Any]:
    if not isinstance(obj, dict):
        raise ProtocolError(f"{where}: expected object")
    extra = set(obj) - set(schema)
    if extra:
        raise ProtocolError(f"{where}: unknown fields {sorted(extra)}")
    out = {}
    for name, type_ in schema.items():
        optional = type_.endswith("?")
        base = type_.rstrip("?")
        if obj.get(name) is None:
            if optional:
                continue
            raise ProtocolError(f"{where}: missing field {name}")
        out[name] = _to_json(base, obj[name], f"{where}.{name}")
    return out


def _obj_from_json(schema: dict[str, str], obj: Any, where: str) -> dict[str, Any]:
    if not isinstance(obj, dict):
        raise ProtocolError(f"{where}: expected object")
    extra = set(obj) - set(schema)
    if extra:
        raise ProtocolError(f"{where}: unknown fields {sorted(extra)}")
    out = {}
    for name, type_ in schema.items():
        optional = type_.endswith("?")
        base = type_.rstrip("?")
        if name not in obj or obj[name] is None:
            if optional:
                continue
            raise ProtocolError(f"{where}: missing field {name}")
        out[name] = _from_json(base, obj[name], f"{where}.{name}")
    return out


def _schema_for(kind: Any) -> dict[str, str]:
    if not isinstance(kind, str) or kind not in SCHEMAS:
        raise ProtocolError(f"unknown message kind {kind!r}")
    return SCHEMAS[kind]


def normalize(kind: str, payload: dict[str, Any]) -> dict[str, Any]:
    """Payload as a decoder would return it (drops None-valued optionals)."""
    return _obj_from_json(_schema_for(kind), _obj_to_json(_schema_for(kind), payload, kind), kind)


# -- framing ----------------------------------------------------------------

def encode_body(env: Envelope) -> bytes:
    if not isinstance(env.id, int) or isinstance(env.id, bool) or not 0 <= env.id <= MAX_ID:
        raise ProtocolError(f"request id {env.id!r} is not a 64-bit unsigned int")
    obj: dict[str, Any] = {
        "id": env.id,
        "kind": env.kind,
        "payload": _obj_to_json(_schema_for(env.kind), env.payload, env.kind),
    }
    if env.reply_to is not None:
        if not isinstance(env.reply_to, str):
            raise ProtocolError("replyTo must be a string")
        obj["replyTo"] = env.reply_to
    return json.dumps(obj, separators=(",", ":"), sort_keys=True,
                      ensure_ascii=False).encode("utf-8")


def encode(env: Envelope) -> bytes:
    body = encode_body(env)
    if len(body) > MAX_FRAME:
        raise FrameTooLarge(f"frame of {len(body)} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(len(body)) + body


def decode_body(body: bytes) -> Envelope:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        raise ProtocolError(f"malformed frame body: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("frame body is not an object")
    extra = set(obj) - {"id", "kind", "payload", "replyTo"}
    if extra:
        raise ProtocolError(f"unknown envelope keys {sorted(extra)}")
    msg_id = obj.get("id")
    if not isinstance(msg_id, int) or isinstance(msg_id, bool) or not 0 <= msg_id <= MAX_ID:
        raise ProtocolError("envelope id missing or out of range")
    kind = obj.get("kind")
    payload = _obj_from_json(_schema_for(kind), obj.get("payload"), kind)
    reply_to = obj.get("replyTo")
    if reply_to is not None and not isinstance(reply_to, str):
        raise ProtocolError("replyTo must be a string")
    return Envelope(msg_id, kind, payload, reply_to)


def decode(buf: bytes) -> tuple[Envelope | None, int]:
    """Decode one frame from the head of ``buf``.

    Returns ``(None, 0)`` if ``buf`` does not yet hold a complete frame.
    """
    if len(buf) < HEADER.size:
        return None, 0
    (length,) = HEADER.unpack_from(buf)
    if length > MAX_FRAME:
        raise FrameTooLarge(f"declared frame length {length} exceeds {MAX_FRAME}")
    end = HEADER.size + length
    if len(buf) < end:
        return None, 0
    return decode_body(bytes(buf[HEADER.size:end])), end


class FrameReader:
    """Incremental decoder for a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Envelope]:
        """Append ``data`` and return every complete frame.

        A malformed frame is consumed before ``ProtocolError`` is raised, so
        the stream stays aligned; ``FrameTooLarge`` leaves the buffer alone
        and the connection should be dropped.
        """
        self._buf.extend(data)
        out = []
        while len(self._buf) >= HEADER.size:
            (length,) = HEADER.unpack_from(self._buf)
            if length > MAX_FRAME:
                raise FrameTooLarge(f"declared frame length {length} exceeds {MAX_FRAME}")
            end = HEADER.size + length
            if len(self._buf) < end:
                break
            body = bytes(self._buf[HEADER.size:end])
            del self._buf[:end]
            out.append(decode_body(body))
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)
