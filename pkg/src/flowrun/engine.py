"""Per-node scheduling engine for the data-flow mode.

Each engine sees only the part of the workflow placed on its node. It is
driven by three kinds of input: readiness events from the local sink,
blocking signals from local containers, and transfer faults raised by DLU
pumps. Everything it decides is written to the shared metrics channel, and
that log is what the tests inspect for ordering properties.
"""

from __future__ import annotations

import enum
import itertools
import json
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from .container import BlockSignal, ComputeFault, Container, ContainerStatus, FluRun
from .dataplane import ConnectorHandle, Network, TransferInterrupted
from .sim import Scheduler
from .sink import DataSink, SpillIOFailure
from .transforms import terminal_result
from .workflow import Placement, WorkflowDefinition, project_local_graph


class EngineError(Exception):
    pass


class Unrecoverable(EngineError):
    pass


class InvocationStatus(enum.Enum):
    WAITING = "waiting"
    READY = "ready"
    DISPATCHED = "dispatched"
    DONE = "done"
    FAILED = "failed"


class ScaleReason(enum.Enum):
    PRESSURE = "pressure"
    NO_IDLE_FLU = "no_idle_flu"


@dataclass(frozen=True)
class ScaleDecision:
    function: str
    reason: ScaleReason
    trigger: object  # BlockSignal for PRESSURE, queue depth for NO_IDLE_FLU
    container_id: str
    at: float


@dataclass(frozen=True)
class FaultReport:
    kind: str  # "transfer" or "compute"
    request_id: bytes
    function: str
    handle: Optional[ConnectorHandle] = None


@dataclass(frozen=True)
class RedoPlan:
    request_id: bytes
    failed_function: str
    frontier: tuple = ()      # ((flow_id, Checkpoint), ...)
    reexecute: tuple = ()     # function names in topological order

    @property
    def empty(self) -> bool:
        return not self.frontier and not self.reexecute


@dataclass
class PendingInvocation:
    request_id: bytes
    function: str
    enqueued_at: float
    bundle: Optional[dict] = None  # preset inputs for a re-execution


class MetricsChannel:
    """Append-only structured event log shared by every engine of a run."""

    def __init__(self):
        self.records: list[dict] = []

    def emit(self, t: float, node: str, event: str, **fields) -> None:
        rec = {"t": t, "node": node, "event": event}
        rec.update(fields)
        self.records.append(rec)

    def select(self, event: Optional[str] = None, **match) -> list[dict]:
        return [r for r in self.records
                if (event is None or r["event"] == event) and all(r.get(k) == v for k, v in match.items())]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, default=str) + "\n" for r in self.records)


@dataclass
class EngineConfig:
    cold_start: float = 0.5
    keepalive: float = 900.0
    pressure_aware: bool = True
    alpha: float = 1.1
    beta: float = 0.3
    flu_slots: int = 1
    max_containers: Optional[int] = None  # per function and node
    release: str = "proactive"            # or "completion"
    sweep_interval: float = 1.0
    replay_delay: float = 0.01
    gc_after: float = 60.0
    node_cores: float = 16.0
    node_memory_mb: int = 65536
    warm_choice: str = "lru"              # or "mru"
    log_pressure: bool = True


class NodeEngine:
    def __init__(self, node: str, sched: Scheduler, network: Network, sink: DataSink,
                 config: Optional[EngineConfig] = None, channel: Optional[MetricsChannel] = None,
                 defn: Optional[WorkflowDefinition] = None, placement: Optional[Placement] = None,
                 on_end: Optional[Callable[[bytes, str, bytes, float], None]] = None,
                 on_failure: Optional[Callable[[bytes, str, float], None]] = None):
        self.node = node
        self.sched = sched
        self.network = network
        self.sink = sink
        self.config = config or EngineConfig()
        self.channel = channel or MetricsChannel()
        self.on_end = on_end
        self.on_failure = on_failure
        self.defn: Optional[WorkflowDefinition] = None
        self.placement: Optional[Placement] = None
        self.local = None
        self.specs: dict = {}
        self.terminals: set[str] = set()
        self.containers: dict[str, list[Container]] = {}
        self.retired: list[Container] = []
        self.pending: dict[str, deque[PendingInvocation]] = {}
        self.request_table: dict[tuple[bytes, str], InvocationStatus] = {}
        self.redo_log: dict[tuple[bytes, str], dict] = {}
        self.starting: dict[str, int] = {}
        self.blocked_signals: dict[str, list[BlockSignal]] = {}
        self.scale_decisions: list[ScaleDecision] = []
        self.redo_plans: list[RedoPlan] = []
        self.cold_starts = 0
        self.compute_faults: set[tuple[bytes, str]] = set()
        self._finished: dict[bytes, float] = {}
        self._ids = itertools.count()
        self._sweeper = None
        sink.on_ready = self.on_data_ready
        sink.on_complete = self._on_data_complete
        if defn is not None:
            if placement is None:
                raise EngineError("deploying a workflow needs a placement")
            self.deploy(defn, placement)

    def deploy(self, defn: WorkflowDefinition, placement: Placement) -> None:
        """Install the local projection of ``defn`` on this node."""
        self.defn = defn
        self.placement = placement
        self.local = project_local_graph(defn, placement, self.node)
        self.terminals = set(defn.terminals)
        for f in self.local.functions:
            self.specs[f] = defn.function(f)
            self.containers.setdefault(f, [])
            self.pending.setdefault(f, deque())
            self.starting.setdefault(f, 0)
            self.blocked_signals.setdefault(f, [])
            self.sink.register_function(f, defn.required_inputs(f))

    # -- logging -----------------------------------------------------------

    def log(self, event: str, **fields) -> None:
        self.channel.emit(self.sched.now, self.node, event, **fields)

    def _container_event(self, t: float, cid: str, event: str, detail: dict) -> None:
        if event == "pressure" and not self.config.log_pressure:
            return
        self.channel.emit(t, self.node, event.upper(), container=cid, **detail)

    def _on_data_complete(self, request_id: bytes, function: str, data_name: str) -> None:
        self.log("DATA", request=request_id.hex(), function=function, data=data_name)

    # -- containers --------------------------------------------------------

    def live_containers(self) -> list[Container]:
        return [c for cs in self.containers.values() for c in cs]

    def all_containers(self) -> list[Container]:
        return self.retired + self.live_containers()

    def _has_room(self, spec) -> bool:
        live = self.live_containers()
        cores = sum(c.cpu_cores for c in live) + spec.cpu_cores
        mem = sum(c.memory_mb for c in live) + spec.memory_mb
        return cores <= self.config.node_cores + 1e-9 and mem <= self.config.node_memory_mb

    def _evict_for(self, spec, now: float) -> bool:
        """Recycle drained idle containers (oldest activity first) until ``spec`` fits."""
        victims = sorted((c for c in self.live_containers()
                          if c.status is ContainerStatus.READY and not c.busy(now)
                          and not c.dlu_queue and not c.unacked_flows()),
                         key=lambda c: c.last_active)
        for c in victims:
            if self._has_room(spec):
                break
            self._recycle(c, now, reason="evicted")
        return self._has_room(spec)

    def start_container(self, function: str, now: Optional[float] = None, cold: bool = True) -> Optional[Container]:
        now = self.sched.now if now is None else now
        spec = self.specs[function]
        cap = self.config.max_containers
        if cap is not None and len(self.containers[function]) >= cap:
            return None
        if not self._has_room(spec) and not self._evict_for(spec, now):
            self.log("SCALE_DENIED", function=function)
            return None
        cid = f"{self.node}/{function}/{next(self._ids)}"
        c = Container(cid, spec, self.node, self.defn.outgoing(function), self.placement.node_of,
                      now=now, cold_start=self.config.cold_start if cold else 0.0, alpha=self.config.alpha,
                      beta=self.config.beta, flu_slots=self.config.flu_slots, keepalive=self.config.keepalive,
                      terminal=function in self.terminals)
        c.on_signal = self.handle_block_signal
        c.on_event = self._container_event
        self.containers[function].append(c)
        self.sched.spawn(c.pump_process(self.sched, self.network, self._on_transfer_fault), name=f"dlu:{cid}")
        self.log("CREATED", function=function, container=cid, cold=cold)
        if cold:
            self.cold_starts += 1
            self.starting[function] += 1
            self.sched.call_at(c.ready_at, self._container_ready, c)
        return c

    def prewarm(self, function: str, count: int = 1) -> list[Container]:
        return [c for c in (self.start_container(function, cold=False) for _ in range(count)) if c]

    def _container_ready(self, c: Container) -> None:
        self.starting[c.name] -= 1
        if c.status is not ContainerStatus.STARTING:
            return
        c.mark_ready(self.sched.now)
        self.log("WARM", function=c.name, container=c.cid)
        self.dispatch_pending(self.sched.now, c.name)
        self._scale_for_backlog(c.name)

    def _recycle(self, c: Container, now: float, reason: str = "keepalive") -> None:
        c.status = ContainerStatus.RECYCLED
        c.recycled_at = now
        self.containers[c.name].remove(c)
        self.retired.append(c)
        if c._wake is not None:
            wake, c._wake = c._wake, None
            wake.fire()
        self.log("RECYCLE", function=c.name, container=c.cid, reason=reason)

    def keepalive_sweep(self, now: Optional[float] = None) -> list[str]:
        now = self.sched.now if now is None else now
        out = []
        for c in list(self.live_containers()):
            if c.is_recyclable(now):
                self._recycle(c, now)
                out.append(c.cid)
        return out

    # -- triggering --------------------------------------------------------

    def on_data_ready(self, request_id: bytes, function: str) -> str:
        key = (request_id, function)
        st = self.request_table.get(key)
        if st in (InvocationStatus.READY, InvocationStatus.DISPATCHED, InvocationStatus.DONE):
            self.log("DUPLICATE_READY", request=request_id.hex(), function=function)
            return "ignored"
        self.request_table[key] = InvocationStatus.READY
        self.log("READY", request=request_id.hex(), function=function)
        self.pending[function].append(PendingInvocation(request_id, function, self.sched.now))
        self.dispatch_pending(self.sched.now, function)
        if self.request_table[key] is InvocationStatus.DISPATCHED:
            return "dispatched"
        self._scale_for_backlog(function)
        return "queued"

    def _pick(self, function: str, now: float) -> Optional[tuple[Container, object]]:
        best = None
        for c in self.containers[function]:
            slot = c.idle_slot(now)
            if slot is None:
                continue
            if best is None:
                best = (c, slot)
            elif self.config.warm_choice == "mru" and c.last_active > best[0].last_active:
                best = (c, slot)
            elif self.config.warm_choice != "mru" and c.last_active < best[0].last_active:
                best = (c, slot)
        return best

    def dispatch_pending(self, now: Optional[float] = None, function: Optional[str] = None) -> int:
        now = self.sched.now if now is None else now
        n = 0
        for f in ([function] if function is not None else list(self.pending)):
            q = self.pending[f]
            while q:
                picked = self._pick(f, now)
                if picked is None:
                    break
                self._dispatch(picked[0], q.popleft(), now)
                n += 1
        return n

    def _dispatch(self, c: Container, inv: PendingInvocation, now: float) -> None:
        rid, f = inv.request_id, inv.function
        slot = c.idle_slot(now)
        if inv.bundle is None:
            bundle = self.sink.take(rid, f, f"{c.cid}#{slot.index}", now=now)
            self.redo_log[(rid, f)] = bundle
            if self.config.release == "proactive":
                for d in bundle:
                    self.sink.proactive_release(rid, f, d, now=now)
        else:
            bundle = inv.bundle
        self.request_table[(rid, f)] = InvocationStatus.DISPATCHED
        if (rid, f) in self.compute_faults:
            self.compute_faults.discard((rid, f))
            c.compute_faults.add(rid)
        run = c.start_flu(rid, bundle, now)
        self.log("DISPATCH", request=rid.hex(), function=f, container=c.cid, redo=inv.bundle is not None)
        self.sched.spawn(self._invocation(c, run), name=f"flu:{c.cid}")

    def _invocation(self, c: Container, run: FluRun):
        rid, f = run.request_id, c.name
        if run.emit_offset > 0:
            yield run.emit_offset
        try:
            c.emit_outputs(run, self.sched.now)
        except ComputeFault:
            c.finish_flu(run, self.sched.now)
            self.log("FAULT", request=rid.hex(), function=f, container=c.cid, kind="compute")
            self._execute_redo(self.plan_redo(rid, FaultReport("compute", rid, f)))
            self.dispatch_pending(self.sched.now, f)
            return
        self.log("EMIT", request=rid.hex(), function=f, container=c.cid)
        rest = run.duration - run.emit_offset
        if rest > 0:
            yield rest
        c.finish_flu(run, self.sched.now)
        self.request_table[(rid, f)] = InvocationStatus.DONE
        self.log("FINISH", request=rid.hex(), function=f, container=c.cid, duration=run.duration)
        if f in self.terminals:
            self.log("END", request=rid.hex(), function=f)
            if self.on_end is not None:
                self.on_end(rid, f, terminal_result(run.result), self.sched.now)
        self.dispatch_pending(self.sched.now, f)

    # -- scaling -----------------------------------------------------------

    def _in_blocking_window(self, function: str, now: float) -> bool:
        return any(s.blocked_until > now for c in self.containers[function] for s in c.slots)

    def _scale_for_backlog(self, function: str) -> None:
        now = self.sched.now
        backlog = len(self.pending[function])
        if not backlog:
            return
        if self.config.pressure_aware and self._in_blocking_window(function, now):
            if self.starting[function] == 0:
                sig = self.blocked_signals[function][-1] if self.blocked_signals[function] else backlog
                self._scale(function, ScaleReason.PRESSURE, sig)
            return
        for _ in range(backlog - self.starting[function]):
            if self._scale(function, ScaleReason.NO_IDLE_FLU, backlog) is None:
                break

    def _scale(self, function: str, reason: ScaleReason, trigger) -> Optional[ScaleDecision]:
        c = self.start_container(function)
        if c is None:
            return None
        d = ScaleDecision(function, reason, trigger, c.cid, self.sched.now)
        self.scale_decisions.append(d)
        self.log("SCALE", function=function, reason=reason.value, container=c.cid)
        return d

    def handle_block_signal(self, sig: BlockSignal) -> Optional[ScaleDecision]:
        if not self.config.pressure_aware or sig.pressure <= 0:
            return None
        now = self.sched.now
        c = next((x for x in self.containers.get(sig.function, ()) if x.cid == sig.container_id), None)
        if c is None:
            return None
        until = now + sig.pressure
        c.block_slot(sig.slot, until)
        sigs = self.blocked_signals[sig.function]
        sigs.append(sig)
        del sigs[:-16]
        self.log("BLOCK", function=sig.function, container=sig.container_id, pressure=sig.pressure,
                 until=until)
        self.sched.call_at(until, self._unblocked, sig.function)
        if self.pending[sig.function] and self.starting[sig.function] == 0:
            return self._scale(sig.function, ScaleReason.PRESSURE, sig)
        return None

    def _unblocked(self, function: str) -> None:
        if self.dispatch_pending(self.sched.now, function) == 0:
            self._scale_for_backlog(function)

    # -- recovery ----------------------------------------------------------

    def plan_redo(self, request_id: bytes, failure: FaultReport) -> RedoPlan:
        f = failure.function
        if failure.kind == "compute":
            if (request_id, f) not in self.redo_log:
                raise Unrecoverable(f"no logged inputs to re-run {f}")
            return RedoPlan(request_id, f, (), (f,))
        h = failure.handle
        if h is None or h.closed:
            return RedoPlan(request_id, f)
        cp = self.network.last_checkpoint(h)
        if h.payload is None:
            if (request_id, f) not in self.redo_log:
                raise Unrecoverable(f"{f} lost its output and its inputs are gone")
            return RedoPlan(request_id, f, ((h.flow_id, cp),), (f,))
        return RedoPlan(request_id, f, ((h.flow_id, cp),), ())

    def _execute_redo(self, plan: RedoPlan, handle: Optional[ConnectorHandle] = None) -> Optional[float]:
        self.redo_plans.append(plan)
        self.log("REDO", request=plan.request_id.hex(), function=plan.failed_function,
                 replay=[(hex(fid), cp.acked_seq) for fid, cp in plan.frontier], reexecute=list(plan.reexecute))
        if plan.reexecute:
            for f in plan.reexecute:
                key = (plan.request_id, f)
                self.request_table[key] = InvocationStatus.READY
                self.pending[f].append(PendingInvocation(plan.request_id, f, self.sched.now,
                                                         bundle=self.redo_log[key]))
                self.dispatch_pending(self.sched.now, f)
                self._scale_for_backlog(f)
            return None
        if handle is not None and plan.frontier:
            self.network.replay_from(handle, plan.frontier[0][1])
            return self.config.replay_delay
        return None

    def _on_transfer_fault(self, c: Container, h: ConnectorHandle, exc: TransferInterrupted) -> Optional[float]:
        self.log("FAULT", request=h.request_id.hex(), function=c.name, container=c.cid, kind="transfer",
                 flow=hex(h.flow_id), seq=exc.seq, retention_lost=h.payload is None)
        try:
            plan = self.plan_redo(h.request_id, FaultReport("transfer", h.request_id, c.name, h))
        except Unrecoverable as err:
            self.log("FAILED", request=h.request_id.hex(), function=c.name, error=str(err))
            self.request_table[(h.request_id, c.name)] = InvocationStatus.FAILED
            if self.on_failure is not None:
                self.on_failure(h.request_id, c.name, self.sched.now)
            return None
        return self._execute_redo(plan, h)

    # -- lifecycle ---------------------------------------------------------

    def finish_request(self, request_id: bytes, now: Optional[float] = None) -> None:
        now = self.sched.now if now is None else now
        if self.config.release == "completion":
            self.sink.release_request(request_id, now=now)
        for key in [k for k in self.redo_log if k[0] == request_id]:
            del self.redo_log[key]
        self._finished[request_id] = now

    def sweep(self, now: Optional[float] = None) -> None:
        now = self.sched.now if now is None else now
        try:
            self.sink.expire_sweep(now)
        except SpillIOFailure as err:
            self.log("SPILL_FAILED", entries=len(err.failed))
        self.keepalive_sweep(now)
        old = [r for r, t in self._finished.items() if now - t > self.config.gc_after]
        if old:
            gone = set(old)
            for key in [k for k in self.request_table if k[0] in gone]:
                del self.request_table[key]
            for r in old:
                del self._finished[r]

    def start_sweeper(self) -> None:
        def tick():
            self.sweep()
            self._sweeper = self.sched.call_later(self.config.sweep_interval, tick)
        self._sweeper = self.sched.call_later(self.config.sweep_interval, tick)

    def stop(self) -> None:
        if self._sweeper is not None:
            self._sweeper.cancel()
