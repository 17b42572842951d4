"""Per-node durable storage: two key-value namespaces plus consensus state.

On-disk layout (see ``docs/storage.md``)::

    <dataDir>/state.snap   one framed record: full applied state
    <dataDir>/state.wal    framed records: applied log entries since the snapshot
    <dataDir>/raft.wal     framed records: term/vote changes, appends, truncations

Every record is ``length(4, big-endian) + payload + crc32(payload)(4)``.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import struct
import zlib
from collections import OrderedDict
from pathlib import Path

from edgekv.command import ADD_LEARNER, DELETE, GLOBAL, LOCAL, NOOP, PUT, LogEntry, client_of
from edgekv.errors import ConsistencyError, CorruptSnapshot, InvalidArgument

log = logging.getLogger(__name__)

MAX_KEY = 4 * 1024
MAX_VALUE = 1024 * 1024
DEDUP_WINDOW = 4096

_LEN = struct.Struct(">I")
_CRC = struct.Struct(">I")

SNAP_FILE = "state.snap"
STATE_WAL = "state.wal"
RAFT_WAL = "raft.wal"


def validate_key_value(key: bytes, value: bytes | None = None) -> None:
    if not key:
        raise InvalidArgument("empty key")
    if len(key) > MAX_KEY:
        raise InvalidArgument(f"key of {len(key)} bytes exceeds {MAX_KEY}")
    if value is not None and len(value) > MAX_VALUE:
        raise InvalidArgument(f"value of {len(value)} bytes exceeds {MAX_VALUE}")


# -- disks --------------------------------------------------------------------

class MemoryDisk:
    """Volatile stand-in for a data directory.

    Lives outside the node object, so a simulated crash that throws the
    node away keeps whatever was "written to disk".
    """

    def __init__(self):
        self.files: dict[str, bytearray] = {}

    def read(self, name: str) -> bytes | None:
        data = self.files.get(name)
        return None if data is None else bytes(data)

    def append(self, name: str, data: bytes, sync: bool = False) -> None:
        self.files.setdefault(name, bytearray()).extend(data)

    def write_atomic(self, name: str, data: bytes) -> None:
        self.files[name] = bytearray(data)

    def truncate(self, name: str, size: int) -> None:
        if name in self.files:
            del self.files[name][size:]

    def close(self) -> None:
        pass

    def names(self) -> list[str]:
        return sorted(self.files)


class FileDisk:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._handles: dict[str, object] = {}

    def _path(self, name: str) -> Path:
        return self.root / name

    def read(self, name: str) -> bytes | None:
        self._flush(name)
        try:
            return self._path(name).read_bytes()
        except FileNotFoundError:
            return None

    def append(self, name: str, data: bytes, sync: bool = False) -> None:
        fh = self._handles.get(name)
        if fh is None:
            fh = self._handles[name] = open(self._path(name), "ab")
        fh.write(data)
        if sync:
            fh.flush()
            os.fsync(fh.fileno())

    def _flush(self, name: str) -> None:
        fh = self._handles.get(name)
        if fh is not None:
            fh.flush()

    def write_atomic(self, name: str, data: bytes) -> None:
        tmp = self._path(name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self._path(name))
        dir_fd = os.open(self.root, os.O_RDONLY)
        try:
            os.fsync(dir_fd)
        finally:
            os.close(dir_fd)

    def truncate(self, name: str, size: int) -> None:
        fh = self._handles.pop(name, None)
        if fh is not None:
            fh.close()
        path = self._path(name)
        if path.exists():
            with open(path, "r+b") as f:
                f.truncate(size)

    def close(self) -> None:
        for fh in self._handles.values():
            fh.flush()
            os.fsync(fh.fileno())
            fh.close()
        self._handles.clear()

    def names(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if p.is_file())


# -- record framing -----------------------------------------------------------

def frame_record(payload: bytes) -> bytes:
    return _LEN.pack(len(payload)) + payload + _CRC.pack(zlib.crc32(payload))


def scan_records(data: bytes) -> tuple[list[bytes], int]:
    """Valid records from the head of ``data`` and the byte offset where they end."""
    out = []
    pos = 0
    while pos + _LEN.size <= len(data):
        (length,) = _LEN.unpack_from(data, pos)
        end = pos + _LEN.size + length + _CRC.size
        if end > len(data):
            break
        payload = data[pos + _LEN.size:pos + _LEN.size + length]
        (crc,) = _CRC.unpack_from(data, end - _CRC.size)
        if crc != zlib.crc32(payload):
            break
        out.append(payload)
        pos = end
    return out, pos


class WriteAheadLog:
    def __init__(self, disk, name: str, fsync: bool = False):
        self.disk = disk
        self.name = name
        self.fsync = fsync

    def append(self, payload: bytes) -> None:
        self.disk.append(self.name, frame_record(payload), sync=self.fsync)

    def read_all(self) -> list[bytes]:
        """Every intact record; a torn or corrupt tail is cut off."""
        data = self.disk.read(self.name)
        if not data:
            return []
        records, end = scan_records(data)
        if end != len(data):
            log.warning("%s: dropping %d bytes of torn tail", self.name, len(data) - end)
            self.disk.truncate(self.name, end)
        return records

    def reset(self) -> None:
        self.disk.truncate(self.name, 0)


def _b64(b: bytes) -> str:
    return base64.b64encode(b).decode("ascii")


# -- applied state --------------------------------------------------------------

class StorageEngine:
    """Local and global key-value maps driven by committed log entries."""

    def __init__(self, disk=None, snapshot_every: int = 1000, fsync: bool = False):
        self.disk = disk if disk is not None else MemoryDisk()
        self.snapshot_every = snapshot_every
        self.maps: dict[str, dict[bytes, bytes]] = {LOCAL: {}, GLOBAL: {}}
        self.applied_index = 0
        self.applied_term = 0
        self.snapshot_index = 0
        self.replayed = 0
        self.learners: dict[str, str] = {}
        self._seen: dict[str, OrderedDict] = {}
        self._failed = False
        self._wal = WriteAheadLog(self.disk, STATE_WAL, fsync=fsync)
        self.recover()

    # reads ---------------------------------------------------------------
    def read(self, scope: str, key: bytes) -> bytes | None:
        return self.maps[scope].get(key)

    def __len__(self) -> int:
        return len(self.maps[LOCAL]) + len(self.maps[GLOBAL])

    def usage(self) -> dict[str, int]:
        return {scope: sum(len(k) + len(v) for k, v in m.items()) for scope, m in self.maps.items()}

    def state_hash(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.applied_index).encode())
        for scope in (LOCAL, GLOBAL):
            h.update(scope.encode())
            for k in sorted(self.maps[scope]):
                v = self.maps[scope][k]
                h.update(_LEN.pack(len(k)) + k + _LEN.pack(len(v)) + v)
        return h.hexdigest()

    def content_hash(self) -> str:
        """Like ``state_hash`` but ignores the applied index."""
        h = hashlib.sha256()
        for scope in (LOCAL, GLOBAL):
            h.update(scope.encode())
            for k in sorted(self.maps[scope]):
                v = self.maps[scope][k]
                h.update(_LEN.pack(len(k)) + k + _LEN.pack(len(v)) + v)
        return h.hexdigest()

    # writes --------------------------------------------------------------
    def apply(self, entry: LogEntry) -> bool:
        """Apply the next committed entry. Returns False for a suppressed duplicate."""
        if self._failed:
            raise ConsistencyError("store is stopped after a consistency failure")
        if entry.index != self.applied_index + 1:
            self._failed = True
            raise ConsistencyError(
                f"apply of index {entry.index} after {self.applied_index}")
        self._wal.append(json.dumps(entry.to_json(), separators=(",", ":")).encode())
        fresh = self._mutate(entry)
        if self.applied_index - self.snapshot_index >= self.snapshot_every:
            self.snapshot()
        return fresh

    def _mutate(self, entry: LogEntry) -> bool:
        cmd = entry.command
        fresh = True
        if cmd.request_id and cmd.kind in (PUT, DELETE):
            client = client_of(cmd.request_id)
            seen = self._seen.setdefault(client, OrderedDict())
            if cmd.request_id in seen:
                fresh = False
            else:
                seen[cmd.request_id] = None
                if len(seen) > DEDUP_WINDOW:
                    seen.popitem(last=False)
        if fresh:
            if cmd.kind == PUT:
                self.maps[cmd.scope][cmd.key] = cmd.value
            elif cmd.kind == DELETE:
                self.maps[cmd.scope].pop(cmd.key, None)
            elif cmd.kind == ADD_LEARNER:
                self.learners[cmd.key.decode()] = (cmd.value or b"").decode()
            # NOOP only advances the index
        self.applied_index = entry.index
        self.applied_term = entry.term
        return fresh

    # durability ------------------------------------------------------------
    def _snapshot_payload(self) -> bytes:
        return json.dumps({
            "applied": self.applied_index,
            "term": self.applied_term,
            "local": {_b64(k): _b64(v) for k, v in sorted(self.maps[LOCAL].items())},
            "global": {_b64(k): _b64(v) for k, v in sorted(self.maps[GLOBAL].items())},
            "learners": dict(sorted(self.learners.items())),
            "seen": {c: list(ids) for c, ids in sorted(self._seen.items())},
        }, separators=(",", ":")).encode()

    def snapshot(self) -> None:
        self.disk.write_atomic(SNAP_FILE, frame_record(self._snapshot_payload()))
        self._wal.reset()
        self.snapshot_index = self.applied_index

    def recover(self) -> None:
        self.maps = {LOCAL: {}, GLOBAL: {}}
        self.applied_index = self.applied_term = self.snapshot_index = 0
        self.learners = {}
        self._seen = {}
        self._failed = False
        raw = self.disk.read(SNAP_FILE)
        if raw:
            records, end = scan_records(raw)
            if len(records) != 1 or end != len(raw):
                raise CorruptSnapshot("snapshot file failed its checksum")
            try:
                snap = json.loads(records[0])
                self.maps[LOCAL] = {base64.b64decode(k): base64.b64decode(v)
                                    for k, v in snap["local"].items()}
                self.maps[GLOBAL] = {base64.b64decode(k): base64.b64decode(v)
                                     for k, v in snap["global"].items()}
                self.learners = dict(snap.get("learners", {}))
                self._seen = {c: OrderedDict.fromkeys(ids) for c, ids in snap["seen"].items()}
                self.applied_index = self.snapshot_index = snap["applied"]
                self.applied_term = snap.get("term", 0)
            except (ValueError, KeyError, TypeError) as exc:
                raise CorruptSnapshot(f"unreadable snapshot: {exc}") from exc
        self.replayed = 0
        for rec in self._wal.read_all():
            entry = LogEntry.from_json(json.loads(rec))
            if entry.index <= self.applied_index:
                continue
            if entry.index != self.applied_index + 1:
                raise ConsistencyError(f"gap in state WAL at index {entry.index}")
            self._mutate(entry)
            self.replayed += 1

    def close(self) -> None:
        self.disk.close()


# -- consensus state -------------------------------------------------------------

class RaftStore:
    """Persistent (term, vote, log) kept as an append-only record stream."""

    def __init__(self, disk=None, fsync: bool = False):
        self.disk = disk if disk is not None else MemoryDisk()
        self._wal = WriteAheadLog(self.disk, RAFT_WAL, fsync=fsync)

    def save_state(self, term: int, voted_for: str | None) -> None:
        self._write({"t": "hs", "term": term, "vote": voted_for})

    def append(self, entries: list[LogEntry]) -> None:
        if entries:
            self._write({"t": "app", "e": [e.to_json() for e in entries]})

    def truncate_from(self, index: int) -> None:
        self._write({"t": "trunc", "from": index})

    def _write(self, rec: dict) -> None:
        self._wal.append(json.dumps(rec, separators=(",", ":")).encode())

    def load(self) -> tuple[int, str | None, list[LogEntry]]:
        term, vote, entries = 0, None, []
        for raw in self._wal.read_all():
            rec = json.loads(raw)
            if rec["t"] == "hs":
                term, vote = rec["term"], rec["vote"]
            elif rec["t"] == "app":
                for e in rec["e"]:
                    entry = LogEntry.from_json(e)
                    del entries[entry.index - 1:]
                    entries.append(entry)
            elif rec["t"] == "trunc":
                del entries[rec["from"] - 1:]
        return term, vote, entries
