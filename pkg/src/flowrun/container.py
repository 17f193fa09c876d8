"""Simulated function containers.

A container pairs FLU slots, which run the synthetic function body, with a
DLU that owns an outbound FIFO and streams each emission to its
destinations through the dataplane. The two sides run independently, so a
FLU can start the next invocation while the DLU is still pushing the
previous one's output.

Each emission gets a transfer-pressure estimate: the expected transfer
time (inflated by ``alpha``) minus the function's smoothed execution time.
A positive value is reported to the node engine as a blocking signal.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Mapping, Optional, Union

from .dataplane import ConnectorHandle, Network, TransferInterrupted
from .throttle import TokenBucket
from .transforms import Result, apply_transform, route, scatter_fanout, select_label, terminal_result
from .wire import CHUNK_SIZE, flow_id_for
from .workflow import CLIENT, FlowEdge, FunctionSpec

DEFAULT_ALPHA = 1.1
DEFAULT_BETA = 0.3
DEFAULT_KEEPALIVE = 900.0


class ContainerError(Exception):
    pass


class NoIdleSlot(ContainerError):
    pass


class ComputeFault(ContainerError):
    pass


class UnknownData(ContainerError):
    pass


class AmbiguousSwitch(ContainerError):
    pass


class SlotState(enum.Enum):
    IDLE = "idle"
    RUNNING = "running"
    BLOCKED = "blocked"


class ContainerStatus(enum.Enum):
    STARTING = "starting"
    READY = "ready"
    RECYCLED = "recycled"


@dataclass
class FluSlot:
    index: int
    state: SlotState = SlotState.IDLE
    blocked_until: float = 0.0
    request_id: Optional[bytes] = None

    def refresh(self, now: float) -> SlotState:
        if self.state is SlotState.BLOCKED and now >= self.blocked_until:
            self.state = SlotState.IDLE
        return self.state

    def available(self, now: float) -> bool:
        return self.refresh(now) is SlotState.IDLE


@dataclass(frozen=True)
class FluStats:
    function: str
    ewma: float = 0.0
    count: int = 0
    beta: float = DEFAULT_BETA

    @property
    def t_flu(self) -> float:
        return self.ewma if self.count else 0.0


def update_flu_stats(s: FluStats, sample: float) -> FluStats:
    if sample < 0:
        raise ValueError("execution time sample must be non-negative")
    if s.count == 0:
        return replace(s, ewma=sample, count=1)
    return replace(s, ewma=s.beta * sample + (1 - s.beta) * s.ewma, count=s.count + 1)


@dataclass(frozen=True)
class PressureEstimate:
    size: int
    bandwidth: float
    t_flu: float
    alpha: float
    pressure: float

    @property
    def blocks(self) -> bool:
        return self.pressure > 0


def pressure_estimate(size: int, bandwidth: float, t_flu: float, alpha: float) -> PressureEstimate:
    if alpha <= 0 or bandwidth <= 0 or t_flu < 0:
        raise ValueError("alpha and bandwidth must be positive and t_flu non-negative")
    return PressureEstimate(size, bandwidth, t_flu, alpha, alpha * (8 * size / bandwidth) - t_flu)


@dataclass(frozen=True)
class BlockSignal:
    function: str
    container_id: str
    slot: int
    pressure: float
    issued_at: float
    request_id: Optional[bytes] = None


@dataclass
class OutboundEmission:
    request_id: bytes
    source: str
    data_name: str
    targets: list  # [(destination, bytes)] in edge order
    emitted_at: float
    label: Optional[str] = None
    chunks_sent: int = 0

    @property
    def size(self) -> int:
        return sum(len(p) for _, p in self.targets)

    @property
    def destinations(self) -> list[str]:
        return [d for d, _ in self.targets]


@dataclass
class FluRun:
    slot: FluSlot
    request_id: bytes
    inputs: Mapping[str, bytes]
    started_at: float
    duration: float
    emit_offset: float
    faulted: bool = False
    result: Optional[Result] = None

    @property
    def emit_at(self) -> float:
        return self.started_at + self.emit_offset

    @property
    def finish_at(self) -> float:
        return self.started_at + self.duration


@dataclass(frozen=True)
class FluCompletion:
    request_id: bytes
    started_at: float
    emitted_at: float
    finished_at: float
    result: bytes
    estimates: tuple


@dataclass
class PumpReport:
    chunks: int = 0
    emissions: int = 0
    started_at: float = 0.0
    finished_at: float = 0.0
    send_times: list = field(default_factory=list)  # (time, destination, seq)


FaultHandler = Callable[["Container", ConnectorHandle, TransferInterrupted], Optional[float]]


class Container:
    def __init__(
        self,
        cid: str,
        spec: FunctionSpec,
        node: str,
        edges: tuple[FlowEdge, ...] = (),
        node_of: Callable[[str], str] = lambda f: "",
        now: float = 0.0,
        cold_start: float = 0.0,
        alpha: float = DEFAULT_ALPHA,
        beta: float = DEFAULT_BETA,
        flu_slots: int = 1,
        keepalive: float = DEFAULT_KEEPALIVE,
        terminal: bool = False,
        bandwidth_bps: Optional[float] = None,
        cpu_cores: Optional[float] = None,
        fanout: Optional[int] = None,
        chunk_size: int = CHUNK_SIZE,
    ):
        if flu_slots < 1:
            raise ValueError("a container needs at least one FLU slot")
        self.cid = cid
        self.spec = spec
        self.node = node
        self.edges = tuple(edges)
        self.node_of = node_of
        self.alpha = alpha
        self.terminal = terminal
        self.keepalive = keepalive
        self.bandwidth_bps = bandwidth_bps if bandwidth_bps is not None else spec.bandwidth_bps
        self.cpu_cores = cpu_cores if cpu_cores is not None else spec.cpu_cores
        self.fanout = fanout if fanout is not None else scatter_fanout(self.edges, spec.name)
        self.bucket = TokenBucket(self.bandwidth_bps, 8 * chunk_size, level=0.0, now=now)
        self.slots = [FluSlot(i) for i in range(flu_slots)]
        self.dlu_queue: deque[OutboundEmission] = deque()
        self.open_flows: dict[tuple[bytes, int], ConnectorHandle] = {}
        self.flu_stats = FluStats(spec.name, beta=beta)
        self.created_at = now
        self.ready_at = now + cold_start
        self.status = ContainerStatus.STARTING if cold_start > 0 else ContainerStatus.READY
        self.recycled_at: Optional[float] = None
        self.last_active = self.ready_at
        self.invocations = 0
        self.chunks_sent = 0
        self.compute_faults: set[bytes] = set()
        self.on_signal: Optional[Callable[[BlockSignal], None]] = None
        self.on_event: Optional[Callable[[float, str, str, dict], None]] = None
        self._wake = None
        self._edge_by_data = {e.data_name: e for e in self.edges}

    # -- state -------------------------------------------------------------

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def memory_mb(self) -> int:
        return self.spec.memory_mb

    @property
    def keepalive_deadline(self) -> float:
        return self.last_active + self.keepalive

    def _log(self, now: float, event: str, **detail) -> None:
        if self.on_event is not None:
            self.on_event(now, self.cid, event, detail)

    def mark_ready(self, now: float) -> None:
        if self.status is ContainerStatus.STARTING:
            self.status = ContainerStatus.READY
            self.last_active = now

    def idle_slot(self, now: float) -> Optional[FluSlot]:
        if self.status is not ContainerStatus.READY:
            return None
        for s in self.slots:
            if s.available(now):
                return s
        return None

    def busy(self, now: float) -> bool:
        return any(s.refresh(now) is not SlotState.IDLE for s in self.slots)

    def unacked_flows(self) -> list[ConnectorHandle]:
        return [h for h in self.open_flows.values() if not h.closed]

    def lifetime(self, end: float) -> float:
        stop = self.recycled_at if self.recycled_at is not None else end
        return max(0.0, stop - self.created_at)

    # -- FLU ---------------------------------------------------------------

    def start_flu(self, request_id: bytes, inputs: Mapping[str, bytes], now: float) -> FluRun:
        slot = self.idle_slot(now)
        if slot is None:
            raise NoIdleSlot(f"{self.cid} has no idle FLU slot")
        slot.state = SlotState.RUNNING
        slot.request_id = request_id
        nbytes = sum(len(v) for v in inputs.values())
        duration = self.spec.compute.cpu_seconds(nbytes) / self.cpu_cores
        run = FluRun(slot, request_id, dict(inputs), now, duration, duration * self.spec.compute.emit_at)
        if request_id in self.compute_faults:
            self.compute_faults.discard(request_id)
            run.faulted = True
        else:
            run.result = apply_transform(self.spec, inputs, self.fanout)
        self.last_active = now
        self._log(now, "invoked", request=request_id.hex(), slot=slot.index)
        return run

    def finish_flu(self, run: FluRun, now: float) -> None:
        slot = run.slot
        slot.request_id = None
        slot.state = SlotState.BLOCKED if slot.blocked_until > now else SlotState.IDLE
        if not run.faulted:
            self.flu_stats = update_flu_stats(self.flu_stats, run.duration)
            self.invocations += 1
        self.last_active = now

    def block_slot(self, slot_index: int, until: float) -> None:
        slot = self.slots[slot_index]
        slot.blocked_until = max(slot.blocked_until, until)
        if slot.state is SlotState.IDLE:
            slot.state = SlotState.BLOCKED

    def emit_outputs(self, run: FluRun, now: float) -> list[PressureEstimate]:
        """Hand every output of a finished computation to the DLU."""
        if run.faulted:
            raise ComputeFault(f"{self.cid}: injected fault for {run.request_id.hex()}")
        out = []
        for edge in self.edges:
            out.append(self.dlu_send(run.request_id, edge.data_name, run.result, now=now, slot=run.slot.index))
        if self.terminal:
            out.append(self.emit_result(run.request_id, terminal_result(run.result), now, slot=run.slot.index))
        return out

    # -- DLU ---------------------------------------------------------------

    def _estimate(self, emission: OutboundEmission, now: float, slot: int) -> PressureEstimate:
        est = pressure_estimate(emission.size, self.bandwidth_bps, self.flu_stats.t_flu, self.alpha)
        self._log(now, "pressure", request=emission.request_id.hex(), data=emission.data_name,
                  size=est.size, t_flu=est.t_flu, pressure=est.pressure)
        if est.blocks and self.on_signal is not None:
            self.on_signal(BlockSignal(self.name, self.cid, slot, est.pressure, now, emission.request_id))
        return est

    def _enqueue(self, emission: OutboundEmission) -> None:
        self.dlu_queue.append(emission)
        if self._wake is not None:
            wake, self._wake = self._wake, None
            wake.fire()

    def dlu_send(self, request_id: bytes, data_name: str, payload: Union[bytes, list],
                 dest_label: Optional[str] = None, now: float = 0.0, slot: int = 0) -> PressureEstimate:
        edge = self._edge_by_data.get(data_name)
        if edge is None:
            raise UnknownData(f"{self.name} has no output named {data_name!r}")
        if edge.conditional:
            if not isinstance(payload, (bytes, bytearray)):
                raise AmbiguousSwitch("switch output must be a single payload")
            if dest_label is None:
                if self.spec.switch_selector is None:
                    raise AmbiguousSwitch(f"{self.name}.{data_name} has no selector")
                dest_label = select_label(self.spec.switch_selector, bytes(payload), edge.labels)
            matches = [d for lab, d in zip(edge.labels, edge.destinations) if lab == dest_label]
            if len(matches) != 1:
                raise AmbiguousSwitch(f"label {dest_label!r} resolves to {len(matches)} destinations")
            targets = [(matches[0], bytes(payload))]
        else:
            targets = [(d, p) for d, p, _ in route(edge, payload, None)]
        emission = OutboundEmission(request_id, self.name, data_name, targets, now, dest_label)
        est = self._estimate(emission, now, slot)
        self._enqueue(emission)
        return est

    def emit_result(self, request_id: bytes, payload: bytes, now: float, slot: int = 0) -> PressureEstimate:
        """Queue a terminal result for the client (data name = function name)."""
        emission = OutboundEmission(request_id, self.name, self.name, [(CLIENT, bytes(payload))], now)
        est = self._estimate(emission, now, slot)
        self._enqueue(emission)
        return est

    def stream(self, emission: OutboundEmission, network: Network, clock: Callable[[], float],
               on_fault: Optional[FaultHandler] = None,
               report: Optional[PumpReport] = None) -> Iterator[float]:
        """Generator streaming one emission; yields delays to wait."""
        for dest, data in emission.targets:
            fid = flow_id_for(self.name, emission.data_name, dest)
            h = network.open_connector((emission.request_id, fid), self.node, self.node_of(dest), len(data),
                                       dest, emission.data_name)
            if h.closed or h.owner not in (None, self.cid):
                continue
            if h.retention_lost:
                network.restore_retention(h, data)
                network.replay_from(h, network.last_checkpoint(h))
            elif h.payload is None:
                h.payload = data
            h.owner = self.cid
            self.open_flows[h.flow] = h
            while not h.closed and h.next_seq < h.n_chunks:
                chunk = h.chunk(h.next_seq)
                if h.throttled:
                    wait = self.bucket.acquire(8 * len(chunk.payload), clock())
                    if wait > 0:
                        yield wait
                if network.latency:
                    yield network.latency
                try:
                    network.send_chunk(h, chunk, clock())
                except TransferInterrupted as exc:
                    if on_fault is None:
                        h.owner = None
                        raise
                    delay = on_fault(self, h, exc)
                    if delay is None:
                        break
                    if delay > 0:
                        yield delay
                    continue
                emission.chunks_sent += 1
                self.chunks_sent += 1
                if report is not None:
                    report.chunks += 1
                    report.send_times.append((clock(), dest, chunk.seq))
            h.owner = None
            if h.closed or h.retention_lost:
                self.open_flows.pop(h.flow, None)

    def pump_process(self, sched, network: Network, on_fault: Optional[FaultHandler] = None):
        """DLU daemon for the discrete-event scheduler."""
        while self.status is not ContainerStatus.RECYCLED:
            if not self.dlu_queue:
                self._wake = sched.event()
                yield self._wake
                continue
            emission = self.dlu_queue[0]
            yield from self.stream(emission, network, sched.clock, on_fault)
            self.dlu_queue.popleft()
            self._log(sched.now, "drained", request=emission.request_id.hex(), data=emission.data_name)

    def is_recyclable(self, now: float) -> bool:
        return (
            self.status is ContainerStatus.READY
            and all(s.refresh(now) is SlotState.IDLE for s in self.slots)
            and not self.dlu_queue
            and not self.unacked_flows()
            and now > self.keepalive_deadline
        )


# ---------------------------------------------------------------- module API


def invoke_flu(c: Container, request_id: bytes, inputs: Mapping[str, bytes], now: float) -> FluCompletion:
    """Run one invocation to completion outside the scheduler."""
    run = c.start_flu(request_id, inputs, now)
    try:
        estimates = c.emit_outputs(run, run.emit_at)
    except ComputeFault:
        c.finish_flu(run, run.finish_at)
        raise
    c.finish_flu(run, run.finish_at)
    return FluCompletion(request_id, run.started_at, run.emit_at, run.finish_at,
                         terminal_result(run.result), tuple(estimates))


def dlu_send(c: Container, request_id: bytes, data_name: str, payload, dest_label: Optional[str] = None,
             now: float = 0.0) -> PressureEstimate:
    return c.dlu_send(request_id, data_name, payload, dest_label, now)


def dlu_pump(c: Container, network: Network, now: float = 0.0,
             on_fault: Optional[FaultHandler] = None) -> PumpReport:
    """Drain the DLU queue synchronously on a private clock starting at ``now``."""
    t = [now]
    report = PumpReport(started_at=now)
    network_clock = network.clock
    network.clock = lambda: t[0]
    try:
        while c.dlu_queue:
            emission = c.dlu_queue[0]
            for delay in c.stream(emission, network, lambda: t[0], on_fault, report):
                t[0] += delay
            c.dlu_queue.popleft()
            report.emissions += 1
    finally:
        network.clock = network_clock
    report.finished_at = t[0]
    return report


def is_recyclable(c: Container, now: float) -> bool:
    return c.is_recyclable(now)
