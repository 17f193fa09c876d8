"""Deterministic synthetic function bodies.

Every transform maps the function's input bundle (taken in declared-input
order) to a result that is either ``bytes`` (broadcast to every destination
of an edge) or a list of ``bytes`` (one part per destination, in edge
order). Results are byte-exact and cheap to recompute, which is what lets
the harness compare every terminal output against :func:`evaluate`.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .workflow import FlowEdge, FunctionSpec, WorkflowDefinition

Result = Union[bytes, list]

HIST_BYTES = 256 * 4


class TransformError(ValueError):
    pass


def _concat(inputs: Sequence[bytes]) -> bytes:
    return b"".join(inputs)


def mix(data: bytes) -> bytes:
    """Size-preserving position-dependent byte map."""
    if not data:
        return b""
    arr = np.frombuffer(data, dtype=np.uint8).astype(np.uint32)
    idx = np.arange(arr.size, dtype=np.uint32) & 0xFF
    return ((arr * 167 + 13 + idx) & 0xFF).astype(np.uint8).tobytes()


def split(data: bytes, parts: int) -> list[bytes]:
    """Contiguous parts whose sizes differ by at most one byte."""
    if parts < 1:
        raise TransformError("split needs at least one part")
    n = len(data)
    bounds = [(n * i) // parts for i in range(parts + 1)]
    return [data[bounds[i]:bounds[i + 1]] for i in range(parts)]


def histogram(data: bytes) -> bytes:
    # Counting byte pairs halves the bincount length; fold the 256x256 grid back.
    pairs = np.frombuffer(data, dtype=np.uint16, count=len(data) // 2)
    grid = np.bincount(pairs, minlength=65536).reshape(256, 256)
    counts = grid.sum(axis=0) + grid.sum(axis=1)
    if len(data) % 2:
        counts[data[-1]] += 1
    return counts.astype(">u4").tobytes()


def merge_histograms(blobs: Sequence[bytes]) -> bytes:
    total = np.zeros(256, dtype=np.uint64)
    for b in blobs:
        if len(b) != HIST_BYTES:
            raise TransformError(f"merge expects {HIST_BYTES}-byte histograms, got {len(b)}")
        total += np.frombuffer(b, dtype=">u4").astype(np.uint64)
    return (total & 0xFFFFFFFF).astype(">u4").tobytes()


def fill(data: bytes, size: int) -> bytes:
    """``size`` pseudo-random bytes seeded by the input's CRC."""
    rng = np.random.Generator(np.random.PCG64(zlib.crc32(data)))
    return rng.bytes(size)


def checksum(data: bytes) -> bytes:
    return zlib.crc32(data).to_bytes(4, "big")


def apply_transform(spec: FunctionSpec, inputs: Mapping[str, bytes], fanout: int = 1) -> Result:
    """Run ``spec``'s transform on ``inputs``.

    ``fanout`` is the destination count of the function's scatter edge and
    is used by ``split`` when no explicit part count is given.
    """
    order = list(spec.declared_inputs) or list(inputs)
    try:
        blobs = [inputs[name] for name in order]
    except KeyError as exc:
        raise TransformError(f"{spec.name}: missing input {exc.args[0]!r}") from None
    data = _concat(blobs)
    c = spec.compute
    t = c.transform
    if t in ("passthrough", "concat", "identity"):
        return data
    if t == "mix":
        return mix(data)
    if t == "split":
        return split(data, c.arg if c.arg is not None else fanout)
    if t == "count":
        return histogram(data)
    if t == "merge":
        return merge_histograms(blobs)
    if t == "fill":
        if c.arg is None:
            raise TransformError("fill needs a size argument")
        return fill(data, c.arg)
    if t == "checksum":
        return checksum(data)
    raise TransformError(f"unknown transform {t!r}")


def select_label(selector: str, payload: bytes, labels: Sequence[str]) -> str:
    """Resolve a switch label from emitted data.

    ``mod`` picks ``labels[crc32(payload) % len(labels)]``; ``label:<x>``
    always yields ``x``.
    """
    if selector == "mod":
        return labels[zlib.crc32(payload) % len(labels)]
    if selector.startswith("label:"):
        return selector.split(":", 1)[1]
    raise TransformError(f"unknown selector {selector!r}")


def result_size(result: Result) -> int:
    if isinstance(result, (bytes, bytearray)):
        return len(result)
    return sum(len(p) for p in result)


def scatter_fanout(defn_or_edges, function: str) -> int:
    edges = defn_or_edges.outgoing(function) if hasattr(defn_or_edges, "outgoing") else defn_or_edges
    for e in edges:
        if not e.conditional:
            return len(e.destinations)
    return 1


def route(edge: FlowEdge, result: Result, selector: Optional[str]) -> list[tuple[str, bytes, Optional[str]]]:
    """Per-destination payloads for one edge: [(destination, bytes, label)].

    Broadcast results go to every destination, list results are scattered
    part-by-destination, and a conditional edge keeps only the selected arm.
    """
    if edge.conditional:
        if not isinstance(result, (bytes, bytearray)):
            raise TransformError("switch edges need a single payload")
        if selector is None:
            raise TransformError(f"{edge.source}: switch edge without selector")
        label = select_label(selector, bytes(result), edge.labels)
        return [(edge.destination_for(label), bytes(result), label)]
    if isinstance(result, (bytes, bytearray)):
        return [(d, bytes(result), None) for d in edge.destinations]
    if len(result) != len(edge.destinations):
        raise TransformError(
            f"{edge.source}.{edge.data_name}: {len(result)} parts for {len(edge.destinations)} destinations")
    return [(d, bytes(p), None) for d, p in zip(edge.destinations, result)]


@dataclass
class GoldenRun:
    """Reference evaluation of one request, computed without the runtime."""

    inputs: dict[str, dict[str, bytes]] = field(default_factory=dict)
    results: dict[str, bytes] = field(default_factory=dict)
    executed: list[str] = field(default_factory=list)

    def terminal_results(self, defn: WorkflowDefinition) -> dict[str, bytes]:
        return {t: self.results[t] for t in defn.terminals if t in self.results}


def terminal_result(result: Result) -> bytes:
    if isinstance(result, (bytes, bytearray)):
        return bytes(result)
    return b"".join(result)


def evaluate(defn: WorkflowDefinition, payload: bytes) -> GoldenRun:
    """Evaluate ``defn`` on ``payload`` sequentially in topological order.

    Functions whose inputs never all arrive (unchosen switch arms) are
    skipped, so ``executed`` lists exactly the functions a correct runtime
    triggers.
    """
    run = GoldenRun()
    pending: dict[str, dict[str, bytes]] = {f.name: {} for f in defn.functions}
    for name in defn.external_inputs():
        pending[defn.entry][name] = payload
    for fname in defn.topological_order():
        spec = defn.function(fname)
        needed = defn.required_inputs(fname)
        got = pending[fname]
        if any(n not in got for n in needed):
            continue
        run.inputs[fname] = {n: got[n] for n in needed}
        result = apply_transform(spec, run.inputs[fname], scatter_fanout(defn, fname))
        run.executed.append(fname)
        if fname in defn.terminals:
            run.results[fname] = terminal_result(result)
        for edge in defn.outgoing(fname):
            for dest, data, _ in route(edge, result, spec.switch_selector):
                pending[dest][edge.data_name] = data
    return run
