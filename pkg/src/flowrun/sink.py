"""Per-node staging cache for function inputs.

Entries are indexed by (request, function, data name). Chunks are
deduplicated by (request, flow, seq), a function is reported ready only
when every declared input has arrived complete (END received and all
sequence numbers contiguous), and inputs are handed to at most one FLU.

Lifetime is managed two ways: the engine releases an entry as soon as its
consumer has taken it, and a periodic sweep spills entries older than the
TTL to the spill store, from which ``take`` reloads them transparently.
"""

from __future__ import annotations

import enum
import hashlib
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

from .wire import FlowChunk

_META = struct.Struct(">QI")


class SinkError(Exception):
    pass


class NotReady(SinkError):
    pass


class AlreadyTaken(SinkError):
    pass


class StillNeeded(SinkError):
    pass


class UnknownFlow(SinkError):
    pass


class SpillCorrupted(SinkError):
    pass


class SpillIOFailure(SinkError):
    def __init__(self, failed, spilled):
        super().__init__(f"{len(failed)} entries could not be spilled")
        self.failed = failed
        self.spilled = spilled


class MatchStatus(enum.Enum):
    PARTIAL = "partial"
    DATA_COMPLETE = "data_complete"
    FUNCTION_READY = "function_ready"


class Location(enum.Enum):
    MEMORY = "memory"
    SPILLED = "spilled"


@dataclass(frozen=True, order=True)
class WaitMatchKey:
    request_id: bytes
    function_name: str
    data_name: str

    def digest(self) -> str:
        raw = b"\x00".join((self.request_id, self.function_name.encode(), self.data_name.encode()))
        return hashlib.blake2b(raw, digest_size=16).hexdigest()


@dataclass
class WaitMatchEntry:
    key: WaitMatchKey
    flow_id: int
    arrived_at: float
    ttl: float
    buf: bytearray = field(default_factory=bytearray)
    pending: dict = field(default_factory=dict)  # out-of-order seq -> payload
    next_seq: int = 0
    end_seq: Optional[int] = None
    complete: bool = False
    location: Location = Location.MEMORY
    delivered_to: list = field(default_factory=list)
    length: int = 0  # contiguous bytes assembled (memory or spill)
    crc: int = 0

    @property
    def acked_seq(self) -> Optional[int]:
        return self.next_seq - 1 if self.next_seq else None

    @property
    def resident(self) -> int:
        mem = len(self.buf) if self.location is Location.MEMORY else 0
        return mem + sum(len(p) for p in self.pending.values())

    def has_seq(self, seq: int) -> bool:
        return seq < self.next_seq or seq in self.pending


@dataclass
class SinkStats:
    resident_bytes: int = 0
    byte_seconds: float = 0.0
    hits: int = 0
    misses: int = 0
    spills: int = 0
    spilled_bytes: int = 0
    spill_reloads: int = 0
    spill_failures: int = 0
    releases: int = 0
    released_bytes: int = 0
    duplicates: int = 0
    duplicate_handoffs: int = 0
    rejected_takes: int = 0
    peak_resident: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class SpillStore:
    """Function-exclusive spill storage.

    With a ``root`` directory each entry becomes ``<root>/<function>/<hash>.bin``
    plus a ``.meta`` sidecar holding (length, crc32). Without one the same
    records live in a dict, which the simulator uses to avoid disk churn.
    """

    def __init__(self, root: Union[str, Path, None] = None):
        self.root = Path(root) if root is not None else None
        self._mem: dict[str, tuple[bytearray, int, int]] = {}
        self._ckpt: dict[tuple[bytes, int], tuple] = {}

    def _paths(self, key: WaitMatchKey) -> tuple[Path, Path]:
        d = self.root / key.function_name
        h = key.digest()
        return d / f"{h}.bin", d / f"{h}.meta"

    def write(self, key: WaitMatchKey, data: bytes, crc: int) -> None:
        if self.root is None:
            self._mem[key.digest()] = (bytearray(data), len(data), crc)
            return
        bin_path, meta_path = self._paths(key)
        bin_path.parent.mkdir(parents=True, exist_ok=True)
        bin_path.write_bytes(data)
        meta_path.write_bytes(_META.pack(len(data), crc))

    def append(self, key: WaitMatchKey, data: bytes, length: int, crc: int) -> None:
        if self.root is None:
            buf, _, _ = self._mem[key.digest()]
            buf += data
            self._mem[key.digest()] = (buf, length, crc)
            return
        bin_path, meta_path = self._paths(key)
        with open(bin_path, "ab") as fh:
            fh.write(data)
        meta_path.write_bytes(_META.pack(length, crc))

    def read(self, key: WaitMatchKey) -> bytes:
        if self.root is None:
            buf, length, crc = self._mem[key.digest()]
            data = bytes(buf)
        else:
            bin_path, meta_path = self._paths(key)
            data = bin_path.read_bytes()
            length, crc = _META.unpack(meta_path.read_bytes())
        if len(data) != length or zlib.crc32(data) != crc:
            raise SpillCorrupted(f"spill record for {key} fails its length/crc check")
        return data

    def delete(self, key: WaitMatchKey) -> None:
        if self.root is None:
            self._mem.pop(key.digest(), None)
            return
        for p in self._paths(key):
            try:
                p.unlink()
            except FileNotFoundError:
                pass

    def contains(self, key: WaitMatchKey) -> bool:
        if self.root is None:
            return key.digest() in self._mem
        return self._paths(key)[0].exists()

    def write_checkpoint(self, request_id: bytes, flow_id: int, acked_seq: Optional[int], ts: float) -> None:
        self._ckpt[(request_id, flow_id)] = (acked_seq, ts)
        if self.root is not None:
            d = self.root / "_checkpoints"
            d.mkdir(parents=True, exist_ok=True)
            seq = -1 if acked_seq is None else acked_seq
            tmp = d / f"{request_id.hex()}-{flow_id:016x}.tmp"
            tmp.write_bytes(struct.pack(">qd", seq, ts))
            os.replace(tmp, d / f"{request_id.hex()}-{flow_id:016x}.ckpt")

    def read_checkpoint(self, request_id: bytes, flow_id: int) -> Optional[tuple]:
        if (request_id, flow_id) in self._ckpt:
            return self._ckpt[(request_id, flow_id)]
        if self.root is not None:
            p = self.root / "_checkpoints" / f"{request_id.hex()}-{flow_id:016x}.ckpt"
            if p.exists():
                seq, ts = struct.unpack(">qd", p.read_bytes())
                return (None if seq < 0 else seq, ts)
        return None


class DataSink:
    def __init__(
        self,
        node_id: str,
        clock: Optional[Callable[[], float]] = None,
        ttl: float = 30.0,
        spill: Optional[SpillStore] = None,
        on_ready: Optional[Callable[[bytes, str], None]] = None,
        tombstone_ttl: float = 60.0,
        record_trace: bool = False,
    ):
        self.node_id = node_id
        self.clock = clock or (lambda: 0.0)
        self.ttl = ttl
        self.spill = spill if spill is not None else SpillStore()
        self.on_ready = on_ready
        self.on_complete: Optional[Callable[[bytes, str, str], None]] = None
        self.tombstone_ttl = tombstone_ttl
        self.stats = SinkStats()
        self.trace: Optional[list[tuple[float, int]]] = [] if record_trace else None

        self.inputs: dict[str, tuple[str, ...]] = {}
        self.flows: dict[int, tuple[str, str]] = {}
        self.entries: dict[WaitMatchKey, WaitMatchEntry] = {}
        self._by_flow: dict[tuple[bytes, int], WaitMatchKey] = {}
        self._remaining: dict[tuple[bytes, str], set] = {}
        self._ready: set[tuple[bytes, str]] = set()
        self._taken: dict[tuple[bytes, str], str] = {}
        self._handed: set[tuple[bytes, str, str]] = set()
        self._tombstones: dict[tuple[bytes, int], tuple[Optional[int], float]] = {}
        self._last_t: Optional[float] = None

    # -- registration ------------------------------------------------------

    def register_function(self, name: str, declared_inputs: Iterable[str]) -> None:
        self.inputs[name] = tuple(declared_inputs)

    def register_flow(self, flow_id: int, function: str, data_name: str) -> None:
        self.flows[flow_id] = (function, data_name)

    # -- accounting --------------------------------------------------------

    def _now(self, now: Optional[float]) -> float:
        return self.clock() if now is None else now

    def _account(self, now: float, delta: int = 0) -> None:
        if self._last_t is not None and now > self._last_t:
            self.stats.byte_seconds += self.stats.resident_bytes * (now - self._last_t)
        if self._last_t is None or now > self._last_t:
            self._last_t = now
        if delta:
            self.stats.resident_bytes += delta
            self.stats.peak_resident = max(self.stats.peak_resident, self.stats.resident_bytes)
        if self.trace is not None:
            self.trace.append((now, self.stats.resident_bytes))

    def settle(self, now: Optional[float] = None) -> SinkStats:
        """Bring ``byte_seconds`` up to ``now`` and return the stats."""
        self._account(self._now(now))
        return self.stats

    # -- status ------------------------------------------------------------

    def _status(self, request_id: bytes, function: str, complete: bool) -> MatchStatus:
        if (request_id, function) in self._ready:
            return MatchStatus.FUNCTION_READY
        return MatchStatus.DATA_COMPLETE if complete else MatchStatus.PARTIAL

    def is_ready(self, request_id: bytes, function: str) -> bool:
        return (request_id, function) in self._ready

    def acked_seq(self, request_id: bytes, flow_id: int) -> Optional[int]:
        key = self._by_flow.get((request_id, flow_id))
        if key is not None and key in self.entries:
            return self.entries[key].acked_seq
        tomb = self._tombstones.get((request_id, flow_id))
        return tomb[0] if tomb else None

    def flow_complete(self, request_id: bytes, flow_id: int) -> bool:
        if (request_id, flow_id) in self._tombstones:
            return True
        key = self._by_flow.get((request_id, flow_id))
        return key is not None and key in self.entries and self.entries[key].complete

    # -- operations --------------------------------------------------------

    def put(self, chunk: FlowChunk, dest_function: str, data_name: Optional[str] = None,
            now: Optional[float] = None) -> MatchStatus:
        """Stage one chunk; returns the resulting match status."""
        now = self._now(now)
        rid, fid = chunk.request_id, chunk.flow_id
        if data_name is None:
            try:
                fn, data_name = self.flows[fid]
            except KeyError:
                raise UnknownFlow(f"flow {fid:#x} was never registered at {self.node_id}") from None
            if fn != dest_function:
                raise UnknownFlow(f"flow {fid:#x} belongs to {fn}, not {dest_function}")

        if (rid, fid) in self._tombstones:
            self.stats.duplicates += 1
            return self._status(rid, dest_function, True)

        declared = self.inputs.get(dest_function)
        if declared is None or data_name not in declared:
            raise UnknownFlow(f"{dest_function} does not declare input {data_name!r}")
        key = WaitMatchKey(rid, dest_function, data_name)
        entry = self.entries.get(key)
        if entry is None:
            entry = WaitMatchEntry(key, fid, arrived_at=now, ttl=self.ttl)
            self.entries[key] = entry
            self._by_flow[(rid, fid)] = key
            self._remaining.setdefault((rid, dest_function), set(declared))
        elif entry.flow_id != fid:
            raise UnknownFlow(f"{key} is already fed by another flow")

        if entry.has_seq(chunk.seq) or (entry.end_seq is not None and chunk.seq > entry.end_seq):
            self.stats.duplicates += 1
            return self._status(rid, dest_function, entry.complete)

        if chunk.is_end:
            entry.end_seq = chunk.seq
        self._account(now, len(chunk.payload))
        entry.pending[chunk.seq] = chunk.payload
        spilled_growth = self._drain(entry)
        if spilled_growth:
            self._account(now, -spilled_growth)

        if entry.end_seq is not None and entry.next_seq == entry.end_seq + 1 and not entry.complete:
            entry.complete = True
            if self.on_complete is not None:
                self.on_complete(rid, dest_function, data_name)
            rem = self._remaining[(rid, dest_function)]
            rem.discard(data_name)
            if not rem:
                self._ready.add((rid, dest_function))
                if self.on_ready is not None:
                    self.on_ready(rid, dest_function)
                return MatchStatus.FUNCTION_READY
            return MatchStatus.DATA_COMPLETE
        return self._status(rid, dest_function, entry.complete)

    def _drain(self, entry: WaitMatchEntry) -> int:
        """Move contiguous pending chunks into the assembled buffer.

        Returns the bytes that went straight to the spill store (no longer
        memory-resident).
        """
        to_spill = bytearray()
        while entry.next_seq in entry.pending:
            payload = entry.pending.pop(entry.next_seq)
            entry.next_seq += 1
            entry.length += len(payload)
            if entry.location is Location.MEMORY:
                entry.buf += payload
            else:
                to_spill += payload
        if to_spill:
            entry.crc = zlib.crc32(to_spill, entry.crc)
            self.spill.append(entry.key, bytes(to_spill), entry.length, entry.crc)
            self.stats.spilled_bytes += len(to_spill)
        return len(to_spill)

    def take(self, request_id: bytes, function_name: str, flu_id: str,
             now: Optional[float] = None) -> dict[str, bytes]:
        """Hand every declared input of (request, function) to one FLU."""
        now = self._now(now)
        rf = (request_id, function_name)
        names = self.inputs.get(function_name)
        if rf not in self._ready or names is None:
            self.stats.misses += 1
            raise NotReady(f"{function_name} for {request_id.hex()} is not ready")
        keys = [WaitMatchKey(request_id, function_name, d) for d in names]
        if any(k not in self.entries for k in keys):
            self.stats.misses += 1
            raise NotReady(f"inputs of {function_name} for {request_id.hex()} were released")
        if rf in self._taken:
            self.stats.rejected_takes += 1
            raise AlreadyTaken(f"{function_name} for {request_id.hex()} already went to {self._taken[rf]}")
        bundle: dict[str, bytes] = {}
        for k in keys:
            entry = self.entries[k]
            if entry.location is Location.SPILLED:
                bundle[k.data_name] = self.spill.read(k)
                self.stats.spill_reloads += 1
            else:
                bundle[k.data_name] = bytes(entry.buf)
            entry.delivered_to.append(flu_id)
            triple = (request_id, function_name, k.data_name)
            if triple in self._handed:
                self.stats.duplicate_handoffs += 1
            self._handed.add(triple)
        self._taken[rf] = flu_id
        self.stats.hits += 1
        self._account(now)
        return bundle

    def _remove(self, key: WaitMatchKey, now: float) -> int:
        entry = self.entries.pop(key)
        self._by_flow.pop((key.request_id, entry.flow_id), None)
        self._tombstones[(key.request_id, entry.flow_id)] = (entry.acked_seq if entry.complete else None, now)
        if entry.location is Location.SPILLED:
            self.spill.delete(key)
        self._account(now, -entry.resident)
        self.stats.releases += 1
        size = entry.length + sum(len(p) for p in entry.pending.values())
        self.stats.released_bytes += size
        return size

    def proactive_release(self, request_id: bytes, function_name: str, data_name: str,
                          now: Optional[float] = None) -> int:
        """Drop an entry whose consumer has taken it; returns its size in bytes."""
        now = self._now(now)
        key = WaitMatchKey(request_id, function_name, data_name)
        entry = self.entries.get(key)
        if entry is None:
            return 0
        if not entry.delivered_to:
            raise StillNeeded(f"{function_name} has not taken {data_name} for {request_id.hex()}")
        return self._remove(key, now)

    def release_request(self, request_id: bytes, now: Optional[float] = None) -> int:
        """Drop everything held for a request (release-at-completion policy)."""
        now = self._now(now)
        keys = sorted(k for k in self.entries if k.request_id == request_id)
        return sum(self._remove(k, now) for k in keys)

    def expire_sweep(self, now: Optional[float] = None) -> list[WaitMatchKey]:
        """Spill every memory entry older than its TTL; returns spilled keys."""
        now = self._now(now)
        spilled: list[WaitMatchKey] = []
        failed: list[WaitMatchKey] = []
        for key in sorted(self.entries):
            entry = self.entries[key]
            if entry.location is not Location.MEMORY or now - entry.arrived_at <= entry.ttl:
                continue
            entry.crc = zlib.crc32(entry.buf)
            try:
                self.spill.write(key, bytes(entry.buf), entry.crc)
            except OSError:
                self.stats.spill_failures += 1
                failed.append(key)
                continue
            freed = len(entry.buf)
            entry.location = Location.SPILLED
            entry.buf = bytearray()
            self.stats.spills += 1
            self.stats.spilled_bytes += freed
            self._account(now, -freed)
            spilled.append(key)
        for tk in [k for k, (_, t) in self._tombstones.items() if now - t > self.tombstone_ttl]:
            del self._tombstones[tk]
        self._account(now)
        if failed:
            raise SpillIOFailure(failed, spilled)
        return spilled

    def reset_for_redo(self, request_id: bytes, function_name: str) -> None:
        """Forget that (request, function) was taken so a ReDo may take it again."""
        self._taken.pop((request_id, function_name), None)
        for d in self.inputs.get(function_name, ()):
            self._handed.discard((request_id, function_name, d))

    # -- checkpoints -------------------------------------------------------

    def store_checkpoint(self, request_id: bytes, flow_id: int, acked_seq: Optional[int], ts: float) -> None:
        self.spill.write_checkpoint(request_id, flow_id, acked_seq, ts)

    def load_checkpoint(self, request_id: bytes, flow_id: int) -> Optional[tuple]:
        return self.spill.read_checkpoint(request_id, flow_id)
