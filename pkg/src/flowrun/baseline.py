"""Control-flow baseline: a central orchestrator plus a backend store.

The orchestrator triggers a function only after every predecessor has
finished, one successor at a time with a fixed trigger overhead. A
container runs each invocation strictly in sequence: load every input from
the store, compute, then store every output. Both transfers are charged to
the container's own token bucket, so intermediate data crosses the
container's link twice.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .engine import MetricsChannel
from .sim import Scheduler
from .throttle import TokenBucket
from .transforms import apply_transform, route, scatter_fanout, terminal_result
from .wire import CHUNK_SIZE
from .workflow import Placement, WorkflowDefinition


def transfer_delay(bucket: TokenBucket, nbytes: int, now: float, chunk_size: int = CHUNK_SIZE) -> float:
    """Time until ``nbytes`` have been pushed through ``bucket`` starting at ``now``."""
    wait = 0.0
    left = nbytes
    while left > 0:
        piece = min(chunk_size, left)
        wait = bucket.acquire(8 * piece, now)
        left -= piece
    return wait


@dataclass
class BaselineConfig:
    cold_start: float = 0.5
    keepalive: float = 900.0
    trigger_overhead: float = 0.063
    store_contention: float = 1.0
    max_containers: Optional[int] = None
    sweep_interval: float = 1.0
    node_cores: float = 16.0
    node_memory_mb: int = 65536


class BackendStore:
    """Object store for intermediate data; tracks resident bytes over time."""

    def __init__(self):
        self.objects: dict[tuple, bytes] = {}
        self.resident = 0
        self.byte_seconds = 0.0
        self.bytes_in = 0
        self.bytes_out = 0
        self._last_t = 0.0

    def _account(self, now: float) -> None:
        if now > self._last_t:
            self.byte_seconds += self.resident * (now - self._last_t)
            self._last_t = now

    def put(self, key: tuple, data: bytes, now: float) -> None:
        self._account(now)
        old = self.objects.get(key)
        if old is not None:
            self.resident -= len(old)
        self.objects[key] = data
        self.resident += len(data)
        self.bytes_in += len(data)

    def get(self, key: tuple, now: float) -> bytes:
        self._account(now)
        data = self.objects[key]
        self.bytes_out += len(data)
        return data

    def drop_request(self, request_id: bytes, now: float) -> None:
        self._account(now)
        for key in [k for k in self.objects if k[0] == request_id]:
            self.resident -= len(self.objects.pop(key))


class BaselineContainer:
    def __init__(self, cid: str, spec, node: str, now: float, cold_start: float, keepalive: float):
        self.cid = cid
        self.spec = spec
        self.node = node
        self.bucket = TokenBucket(spec.bandwidth_bps, 8 * CHUNK_SIZE, level=0.0, now=now)
        self.created_at = now
        self.ready_at = now + cold_start
        self.ready = cold_start <= 0
        self.busy = False
        self.last_active = self.ready_at
        self.keepalive = keepalive
        self.recycled_at: Optional[float] = None
        self.invocations = 0

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def memory_mb(self) -> int:
        return self.spec.memory_mb

    @property
    def cpu_cores(self) -> float:
        return self.spec.cpu_cores

    def lifetime(self, end: float) -> float:
        stop = self.recycled_at if self.recycled_at is not None else end
        return max(0.0, stop - self.created_at)


@dataclass
class _RequestState:
    payload: bytes
    inputs: dict = field(default_factory=dict)      # function -> {data_name: store key or bytes}
    triggered: set = field(default_factory=set)
    completed: set = field(default_factory=set)


class ControlFlowOrchestrator:
    def __init__(self, sched: Scheduler, defn: WorkflowDefinition, placement: Placement,
                 config: Optional[BaselineConfig] = None, channel: Optional[MetricsChannel] = None,
                 on_end: Optional[Callable[[bytes, str, bytes, float], None]] = None):
        self.sched = sched
        self.defn = defn
        self.placement = placement
        self.config = config or BaselineConfig()
        self.channel = channel or MetricsChannel()
        self.on_end = on_end
        self.store = BackendStore()
        self.specs = {f.name: f for f in defn.functions}
        self.order = defn.topological_order()
        self.fanout = {f: scatter_fanout(defn, f) for f in self.specs}
        self.required = {f: defn.required_inputs(f) for f in self.specs}
        self.external = set(defn.external_inputs())
        self.containers: dict[str, list[BaselineContainer]] = {f: [] for f in self.specs}
        self.retired: list[BaselineContainer] = []
        self.pending: dict[str, deque] = {f: deque() for f in self.specs}
        self.starting: dict[str, int] = {f: 0 for f in self.specs}
        self.requests: dict[bytes, _RequestState] = {}
        self.cold_starts = 0
        self.scale_decisions = 0
        self._ids = itertools.count()
        self._sweeper = None

    def log(self, event: str, node: str = "orchestrator", **fields) -> None:
        self.channel.emit(self.sched.now, node, event, **fields)

    def all_containers(self) -> list[BaselineContainer]:
        return self.retired + [c for cs in self.containers.values() for c in cs]

    # -- requests ----------------------------------------------------------

    def submit(self, request_id: bytes, payload: bytes) -> None:
        st = _RequestState(payload)
        st.inputs[self.defn.entry] = {name: payload for name in self.external}
        self.requests[request_id] = st
        self._trigger(request_id, self.defn.entry)

    def finish_request(self, request_id: bytes, now: Optional[float] = None) -> None:
        self.store.drop_request(request_id, self.sched.now if now is None else now)
        self.requests.pop(request_id, None)

    def _trigger(self, request_id: bytes, function: str) -> None:
        st = self.requests.get(request_id)
        if st is None:
            return
        st.triggered.add(function)
        self.log("TRIGGER", request=request_id.hex(), function=function)
        self.pending[function].append(request_id)
        self._dispatch(function)
        if self.pending[function]:
            for _ in range(len(self.pending[function]) - self.starting[function]):
                if self._start_container(function) is None:
                    break
                self.scale_decisions += 1

    def _completed(self, request_id: bytes, function: str) -> None:
        st = self.requests.get(request_id)
        if st is None:
            return
        st.completed.add(function)
        ready = [f for f in self.order
                 if f not in st.triggered and self.required[f]
                 and all(d in st.inputs.get(f, {}) for d in self.required[f])]
        overhead = self.config.trigger_overhead
        for k, f in enumerate(ready, start=1):
            st.triggered.add(f)
            self.sched.call_later(k * overhead, self._trigger, request_id, f)

    # -- containers --------------------------------------------------------

    def _room(self, spec, node: str) -> bool:
        live = [c for cs in self.containers.values() for c in cs if c.node == node]
        cores = sum(c.cpu_cores for c in live) + spec.cpu_cores
        mem = sum(c.memory_mb for c in live) + spec.memory_mb
        return cores <= self.config.node_cores + 1e-9 and mem <= self.config.node_memory_mb

    def _start_container(self, function: str, cold: bool = True) -> Optional[BaselineContainer]:
        spec = self.specs[function]
        node = self.placement.node_of(function)
        cap = self.config.max_containers
        if cap is not None and len(self.containers[function]) >= cap:
            return None
        if not self._room(spec, node):
            idle = sorted((c for cs in self.containers.values() for c in cs
                           if c.node == node and c.ready and not c.busy), key=lambda c: c.last_active)
            for c in idle:
                if self._room(spec, node):
                    break
                self._recycle(c, "evicted")
            if not self._room(spec, node):
                return None
        c = BaselineContainer(f"{node}/{function}/{next(self._ids)}", spec, node, self.sched.now,
                              self.config.cold_start if cold else 0.0, self.config.keepalive)
        self.containers[function].append(c)
        self.log("CREATED", node=node, function=function, container=c.cid, cold=cold)
        if cold:
            self.cold_starts += 1
            self.starting[function] += 1
            self.sched.call_at(c.ready_at, self._warm, c)
        return c

    def prewarm(self, function: str, count: int = 1) -> None:
        for _ in range(count):
            self._start_container(function, cold=False)

    def _warm(self, c: BaselineContainer) -> None:
        self.starting[c.name] -= 1
        if c.recycled_at is not None:
            return
        c.ready = True
        c.last_active = self.sched.now
        self._dispatch(c.name)

    def _recycle(self, c: BaselineContainer, reason: str = "keepalive") -> None:
        c.recycled_at = self.sched.now
        self.containers[c.name].remove(c)
        self.retired.append(c)
        self.log("RECYCLE", node=c.node, function=c.name, container=c.cid, reason=reason)

    def keepalive_sweep(self) -> list[str]:
        now = self.sched.now
        out = []
        for cs in list(self.containers.values()):
            for c in list(cs):
                if c.ready and not c.busy and now > c.last_active + c.keepalive:
                    self._recycle(c)
                    out.append(c.cid)
        return out

    def _dispatch(self, function: str) -> None:
        q = self.pending[function]
        while q:
            idle = [c for c in self.containers[function] if c.ready and not c.busy]
            if not idle:
                return
            c = min(idle, key=lambda x: x.last_active)
            rid = q.popleft()
            c.busy = True
            self.log("DISPATCH", node=c.node, request=rid.hex(), function=function, container=c.cid)
            self.sched.spawn(self._invoke(c, rid), name=f"cf:{c.cid}")

    def _invoke(self, c: BaselineContainer, request_id: bytes):
        f = c.name
        st = self.requests[request_id]
        spec = self.specs[f]
        mult = self.config.store_contention
        # Get
        inputs = {}
        load = 0
        for d in self.required[f]:
            ref = st.inputs[f][d]
            if isinstance(ref, tuple):
                inputs[d] = self.store.get(ref, self.sched.now)
                load += len(inputs[d])
            else:
                inputs[d] = ref
        if load:
            yield mult * transfer_delay(c.bucket, load, self.sched.now)
        # compute
        nbytes = sum(len(v) for v in inputs.values())
        yield spec.compute.cpu_seconds(nbytes) / c.cpu_cores
        result = apply_transform(spec, inputs, self.fanout[f])
        # Put
        stored = 0
        for edge in self.defn.outgoing(f):
            parts = route(edge, result, spec.switch_selector)
            shared = isinstance(result, (bytes, bytearray)) and not edge.conditional
            for i, (dest, part, _) in enumerate(parts):
                key = (request_id, f, edge.data_name, None if shared else dest)
                if not shared or i == 0:
                    self.store.put(key, part, self.sched.now)
                    stored += len(part)
                st.inputs.setdefault(dest, {})[edge.data_name] = key
        out = terminal_result(result) if f in self.defn.terminals else None
        if out is not None:
            self.store.put((request_id, f, "@result", None), out, self.sched.now)
            stored += len(out)
        if stored:
            yield mult * transfer_delay(c.bucket, stored, self.sched.now)
        c.busy = False
        c.last_active = self.sched.now
        c.invocations += 1
        self.log("FINISH", node=c.node, request=request_id.hex(), function=f, container=c.cid)
        if out is not None:
            self.log("END", node=c.node, request=request_id.hex(), function=f)
            if self.on_end is not None:
                self.on_end(request_id, f, out, self.sched.now)
        self._completed(request_id, f)
        self._dispatch(f)

    def start_sweeper(self) -> None:
        def tick():
            self.keepalive_sweep()
            self._sweeper = self.sched.call_later(self.config.sweep_interval, tick)
        self._sweeper = self.sched.call_later(self.config.sweep_interval, tick)

    def stop(self) -> None:
        if self._sweeper is not None:
            self._sweeper.cancel()
