"""Connectors between DLUs and destination data sinks.

A connector carries one flow, identified by (request_id, flow_id). Its kind
is fixed when it is opened: SMALL when the whole transfer is under the
small-data threshold, LOCAL when both ends share a node, REMOTE otherwise.
REMOTE and SMALL frames travel through the real frame codec; LOCAL chunks
are handed to the sink by reference.

The sender keeps a reference to the payload until END is acknowledged, so
an interrupted flow can resume from its last checkpoint. The sink drops any
chunk it already holds, which keeps reassembly exactly-once across replays.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

from .sink import MatchStatus
from .wire import CHUNK_SIZE, SMALL_DATA_THRESHOLD, FlowChunk, chunk_count, decode_frame, encode_frame, make_chunk


class DataplaneError(Exception):
    pass


class SeqGap(DataplaneError):
    pass


class TransferInterrupted(DataplaneError):
    def __init__(self, handle: "ConnectorHandle", seq: int):
        super().__init__(f"flow {handle.flow_id:#x} interrupted at seq {seq}")
        self.handle = handle
        self.seq = seq


class RetentionLost(DataplaneError):
    pass


class NetworkUnreachable(DataplaneError):
    pass


class ConnectorKind(enum.Enum):
    LOCAL = "local"
    REMOTE = "remote"
    SMALL = "small"


@dataclass(frozen=True)
class Checkpoint:
    request_id: bytes
    flow_id: int
    acked_seq: Optional[int]  # None: nothing acknowledged yet
    timestamp: float

    @property
    def resume_seq(self) -> int:
        return 0 if self.acked_seq is None else self.acked_seq + 1


@dataclass(frozen=True)
class SendReceipt:
    seq: int
    acked_seq: Optional[int]
    delivered_at: float
    closed: bool
    status: MatchStatus


@dataclass(eq=False)
class ConnectorHandle:
    request_id: bytes
    flow_id: int
    kind: ConnectorKind
    src_node: str
    dst_node: str
    dest_function: str
    data_name: str
    total_size: int
    chunk_size: int = CHUNK_SIZE
    next_seq: int = 0
    acked_seq: Optional[int] = None
    closed: bool = False
    interrupted: bool = False
    retention_lost: bool = False
    payload: Optional[bytes] = None  # sender-side retention
    owner: Optional[str] = None      # container streaming this flow
    checkpoint: Optional[Checkpoint] = None
    acked_since_checkpoint: int = 0
    chunks_sent: int = 0

    @property
    def flow(self) -> tuple[bytes, int]:
        return (self.request_id, self.flow_id)

    @property
    def n_chunks(self) -> int:
        return chunk_count(self.total_size, self.chunk_size)

    @property
    def throttled(self) -> bool:
        """Whether payload bits count against the sender's bandwidth."""
        return self.src_node != self.dst_node and self.kind is not ConnectorKind.LOCAL

    @property
    def unacked(self) -> bool:
        return not self.closed

    def chunk(self, seq: int) -> FlowChunk:
        if self.payload is None:
            raise RetentionLost(f"flow {self.flow_id:#x} no longer retains its payload")
        return make_chunk(self.request_id, self.flow_id, self.payload, seq, self.chunk_size,
                          small=self.kind is ConnectorKind.SMALL)


@dataclass
class InterruptRule:
    """One-shot fault: cut the matching flow when ``seq`` is about to be sent."""

    match: Callable[[ConnectorHandle], bool]
    seq: int
    lose_retention: bool = False
    fired: bool = False


class ClientSink:
    """Receives terminal results on behalf of the load generator."""

    def __init__(self, node_id: str, on_result: Optional[Callable[[bytes, str, bytes], None]] = None,
                 keep: bool = True):
        self.node_id = node_id
        self.on_result = on_result
        self.keep = keep  # False: hand results to on_result only
        self._parts: dict[tuple[bytes, int], dict[int, bytes]] = {}
        self._end: dict[tuple[bytes, int], int] = {}
        self._done: dict[tuple[bytes, int], int] = {}
        self.results: dict[tuple[bytes, str], bytes] = {}
        self.duplicates = 0
        self._ckpt: dict[tuple[bytes, int], tuple] = {}

    def register_flow(self, flow_id: int, function: str, data_name: str) -> None:
        pass

    def put(self, chunk: FlowChunk, dest_function: str, data_name: Optional[str] = None,
            now: Optional[float] = None) -> MatchStatus:
        fk = (chunk.request_id, chunk.flow_id)
        if fk in self._done:
            self.duplicates += 1
            return MatchStatus.FUNCTION_READY
        parts = self._parts.setdefault(fk, {})
        if chunk.seq in parts:
            self.duplicates += 1
            return MatchStatus.PARTIAL
        parts[chunk.seq] = chunk.payload
        if chunk.is_end:
            self._end[fk] = chunk.seq
        end = self._end.get(fk)
        if end is not None and len(parts) == end + 1:
            data = b"".join(parts[i] for i in range(end + 1))
            del self._parts[fk]
            self._done[fk] = end
            if self.keep:
                self.results[(chunk.request_id, data_name)] = data
            if self.on_result is not None:
                self.on_result(chunk.request_id, data_name, data)
            return MatchStatus.FUNCTION_READY
        return MatchStatus.PARTIAL

    def acked_seq(self, request_id: bytes, flow_id: int) -> Optional[int]:
        fk = (request_id, flow_id)
        if fk in self._done:
            return self._done[fk]
        parts = self._parts.get(fk, {})
        n = 0
        while n in parts:
            n += 1
        return n - 1 if n else None

    def flow_complete(self, request_id: bytes, flow_id: int) -> bool:
        return (request_id, flow_id) in self._done

    def store_checkpoint(self, request_id: bytes, flow_id: int, acked_seq, ts: float) -> None:
        self._ckpt[(request_id, flow_id)] = (acked_seq, ts)

    def load_checkpoint(self, request_id: bytes, flow_id: int):
        return self._ckpt.get((request_id, flow_id))

    def forget(self, request_id: bytes) -> None:
        for k in [k for k in self.results if k[0] == request_id]:
            del self.results[k]


class Network:
    """Virtual network joining every node's sink.

    ``checkpoint_every`` and ``checkpoint_interval`` set the cadence of
    automatic checkpoints (whichever comes first). ``latency`` is a fixed
    per-frame delay that senders add after their throttle wait.
    """

    def __init__(self, clock: Callable[[], float] = lambda: 0.0, latency: float = 0.0,
                 checkpoint_every: int = 8, checkpoint_interval: float = 0.1,
                 small_threshold: int = SMALL_DATA_THRESHOLD, chunk_size: int = CHUNK_SIZE):
        self.clock = clock
        self.latency = latency
        self.checkpoint_every = checkpoint_every
        self.checkpoint_interval = checkpoint_interval
        self.small_threshold = small_threshold
        self.chunk_size = chunk_size
        self.sinks: dict[str, object] = {}
        self.down: set[str] = set()
        self.connectors: dict[tuple[bytes, int], ConnectorHandle] = {}
        self.kind_counts: Counter = Counter()
        self.frames = 0
        self.frame_bytes = 0
        self.rules: list[InterruptRule] = []
        self._last_cp_time: dict[tuple[bytes, int], float] = {}

    def add_node(self, node_id: str, sink) -> None:
        self.sinks[node_id] = sink

    def set_down(self, node_id: str, down: bool = True) -> None:
        if down:
            self.down.add(node_id)
        else:
            self.down.discard(node_id)

    def inject_interrupt(self, match: Callable[[ConnectorHandle], bool], seq: int,
                         lose_retention: bool = False) -> InterruptRule:
        rule = InterruptRule(match, seq, lose_retention)
        self.rules.append(rule)
        return rule

    @property
    def streaming_connectors(self) -> int:
        return self.kind_counts[ConnectorKind.LOCAL] + self.kind_counts[ConnectorKind.REMOTE]

    # -- connectors --------------------------------------------------------

    def open_connector(self, flow: tuple[bytes, int], src_node: str, dst_node: str, total_size_hint: int,
                       dest_function: str = "", data_name: str = "") -> ConnectorHandle:
        existing = self.connectors.get(flow)
        if existing is not None:
            return existing
        if dst_node in self.down or dst_node not in self.sinks:
            raise NetworkUnreachable(dst_node)
        if total_size_hint < self.small_threshold:
            kind = ConnectorKind.SMALL
        elif src_node == dst_node:
            kind = ConnectorKind.LOCAL
        else:
            kind = ConnectorKind.REMOTE
        h = ConnectorHandle(flow[0], flow[1], kind, src_node, dst_node, dest_function, data_name,
                            total_size_hint, chunk_size=self.chunk_size)
        self.connectors[flow] = h
        self.kind_counts[kind] += 1
        self.sinks[dst_node].register_flow(flow[1], dest_function, data_name)
        return h

    def close_request(self, request_id: bytes) -> None:
        """Forget closed connectors of a finished request."""
        for fk in [fk for fk, h in self.connectors.items() if fk[0] == request_id and h.closed]:
            del self.connectors[fk]
            self._last_cp_time.pop(fk, None)

    # -- sending -----------------------------------------------------------

    def send_chunk(self, h: ConnectorHandle, chunk: FlowChunk, now: Optional[float] = None) -> SendReceipt:
        now = self.clock() if now is None else now
        if chunk.seq != h.next_seq:
            raise SeqGap(f"flow {h.flow_id:#x}: got seq {chunk.seq}, expected {h.next_seq}")
        if (chunk.request_id, chunk.flow_id) != h.flow:
            raise SeqGap("chunk does not belong to this connector")
        if h.interrupted:
            raise TransferInterrupted(h, chunk.seq)
        if h.dst_node in self.down:
            h.interrupted = True
            raise TransferInterrupted(h, chunk.seq)
        for rule in self.rules:
            if not rule.fired and rule.seq == chunk.seq and rule.match(h):
                rule.fired = True
                h.interrupted = True
                if rule.lose_retention:
                    h.payload = None
                    h.retention_lost = True
                raise TransferInterrupted(h, chunk.seq)

        sink = self.sinks[h.dst_node]
        if h.kind is ConnectorKind.LOCAL:
            delivered = chunk
        else:
            frame = encode_frame(chunk)
            self.frames += 1
            self.frame_bytes += len(frame)
            delivered = decode_frame(frame, h.chunk_size)
        status = sink.put(delivered, h.dest_function, h.data_name, now=now)
        h.next_seq += 1
        h.chunks_sent += 1
        prev = h.acked_seq
        h.acked_seq = sink.acked_seq(h.request_id, h.flow_id)
        if h.acked_seq is not None and (prev is None or h.acked_seq > prev):
            h.acked_since_checkpoint += h.acked_seq - (-1 if prev is None else prev)
        if sink.flow_complete(h.request_id, h.flow_id):
            h.closed = True
            h.payload = None
            self.checkpoint_flow(h, now)
        elif (h.acked_since_checkpoint >= self.checkpoint_every
              or now - self._last_cp_time.get(h.flow, now) >= self.checkpoint_interval):
            self.checkpoint_flow(h, now)
        self._last_cp_time.setdefault(h.flow, now)
        return SendReceipt(chunk.seq, h.acked_seq, now, h.closed, status)

    def checkpoint_flow(self, h: ConnectorHandle, now: Optional[float] = None) -> Checkpoint:
        """Record the destination's acked seq durably; never moves backwards."""
        now = self.clock() if now is None else now
        sink = self.sinks[h.dst_node]
        acked = sink.acked_seq(h.request_id, h.flow_id)
        prev = h.checkpoint
        if prev is not None and prev.acked_seq is not None and (acked is None or acked < prev.acked_seq):
            acked = prev.acked_seq
        cp = Checkpoint(h.request_id, h.flow_id, acked, now)
        sink.store_checkpoint(h.request_id, h.flow_id, acked, now)
        h.checkpoint = cp
        h.acked_since_checkpoint = 0
        self._last_cp_time[h.flow] = now
        return cp

    def last_checkpoint(self, h: ConnectorHandle) -> Checkpoint:
        stored = self.sinks[h.dst_node].load_checkpoint(h.request_id, h.flow_id)
        if stored is None:
            return Checkpoint(h.request_id, h.flow_id, None, self.clock())
        return Checkpoint(h.request_id, h.flow_id, stored[0], stored[1])

    def replay_from(self, h: ConnectorHandle, cp: Checkpoint) -> ConnectorHandle:
        """Rewind the sender to resume right after ``cp``."""
        if h.closed:
            return h
        if h.payload is None:
            raise RetentionLost(f"flow {h.flow_id:#x} cannot be replayed without its payload")
        h.next_seq = cp.resume_seq
        h.interrupted = False
        return h

    def restore_retention(self, h: ConnectorHandle, payload: bytes) -> None:
        """Re-attach a regenerated payload after the sender lost it."""
        if len(payload) != h.total_size:
            raise ValueError("regenerated payload differs in size from the original")
        h.payload = payload
        h.retention_lost = False
