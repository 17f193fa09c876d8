"""Workflow data-flow graphs: definition types, text format, validation,
placement and per-node projection.

A workflow is a set of functions plus explicit data-transfer edges. Each
edge names the data it carries and an ordered list of destinations; a
conditional (switch) edge delivers to exactly one of them, chosen at run
time from a label produced by the source function's selector.

Text format::

    workflow: wordcount
    function split:
      memory_mb: 128
      compute: split cost=5ms/MiB base=2ms
      inputs: [input]
      outputs: [part -> count0, count1]
    function count0:
      compute: count cost=50ms/MiB
      inputs: [part]
      outputs: [c0 -> merge]
    ...
    entry: split
    terminals: [merge]

Several outputs go in one bracket separated by ``;`` or on repeated
``outputs:`` lines. A switch is written
``switch: <data> -> {<label>: <dest>, ...}`` and needs ``select=<tag>`` on
the compute line.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Union

MIB = 1024 * 1024

# Reserved destination used for a terminal function's result.
CLIENT = "@client"
CLIENT_NODE = "client"
# Data name under which the client delivers a request's input.
DEFAULT_INPUT = "input"


class WorkflowError(ValueError):
    pass


class WorkflowSyntaxError(WorkflowError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class WorkflowSemanticError(WorkflowError):
    def __init__(self, findings: Sequence["Finding"]):
        self.findings = tuple(findings)
        super().__init__("; ".join(str(f) for f in self.findings))


class PlacementError(WorkflowError):
    pass


class UnknownNode(WorkflowError):
    pass


@dataclass(frozen=True)
class ComputeModel:
    """Synthetic work: a deterministic transform plus a CPU cost.

    Costs are CPU-milliseconds; wall time divides by the container's cores.
    ``emit_at`` is the fraction of the execution at which outputs are handed
    to the DLU (1.0 = at completion).
    """

    transform: str = "passthrough"
    arg: Optional[int] = None
    cost_ms_per_mib: float = 0.0
    base_ms: float = 0.0
    emit_at: float = 1.0

    def cpu_seconds(self, input_bytes: int) -> float:
        return (self.base_ms + self.cost_ms_per_mib * input_bytes / MIB) / 1000.0


@dataclass(frozen=True)
class FunctionSpec:
    name: str
    compute: ComputeModel = ComputeModel()
    declared_inputs: tuple[str, ...] = ()
    memory_mb: int = 128
    switch_selector: Optional[str] = None

    @property
    def cpu_cores(self) -> float:
        return 0.1 * (self.memory_mb / 128)

    @property
    def bandwidth_mbps(self) -> float:
        return 40.0 * (self.memory_mb / 128)

    @property
    def bandwidth_bps(self) -> float:
        return self.bandwidth_mbps * 1e6

    def exec_seconds(self, input_bytes: int) -> float:
        return self.compute.cpu_seconds(input_bytes) / self.cpu_cores


@dataclass(frozen=True)
class FlowEdge:
    source: str
    data_name: str
    destinations: tuple[str, ...]
    conditional: bool = False
    # Parallel to destinations; only used by conditional edges.
    labels: tuple[str, ...] = ()

    def destination_for(self, label: str) -> str:
        matches = [d for lab, d in zip(self.labels, self.destinations) if lab == label]
        if len(matches) != 1:
            raise KeyError(label)
        return matches[0]

    def links(self) -> list["Link"]:
        labels = self.labels if self.conditional else (None,) * len(self.destinations)
        return [
            Link(self.source, self.data_name, dest, self.conditional, lab)
            for dest, lab in zip(self.destinations, labels)
        ]


@dataclass(frozen=True, order=True)
class Link:
    """One (source, data, destination) transfer; a FlowEdge fans out into links."""

    source: str
    data_name: str
    destination: str
    conditional: bool = False
    label: Optional[str] = None


@dataclass(frozen=True)
class WorkflowDefinition:
    name: str
    functions: tuple[FunctionSpec, ...]
    flows: tuple[FlowEdge, ...]
    entry: str
    terminals: tuple[str, ...]

    def function(self, name: str) -> FunctionSpec:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def function_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.functions)

    def outgoing(self, name: str) -> tuple[FlowEdge, ...]:
        return tuple(e for e in self.flows if e.source == name)

    def incoming(self, name: str) -> tuple[Link, ...]:
        return tuple(l for l in self.links() if l.destination == name)

    def links(self) -> list[Link]:
        return [l for e in self.flows for l in e.links()]

    def external_inputs(self) -> tuple[str, ...]:
        """Inputs of the entry function supplied by the client."""
        delivered = {l.data_name for l in self.incoming(self.entry)}
        entry = self.function(self.entry)
        ext = tuple(d for d in entry.declared_inputs if d not in delivered)
        return ext or (DEFAULT_INPUT,)

    def required_inputs(self, name: str) -> tuple[str, ...]:
        f = self.function(name)
        if name == self.entry and not f.declared_inputs:
            return (DEFAULT_INPUT,)
        return f.declared_inputs

    def successors(self, name: str) -> list[str]:
        out: list[str] = []
        for e in self.outgoing(name):
            for d in e.destinations:
                if d not in out:
                    out.append(d)
        return out

    def predecessors(self, name: str) -> list[str]:
        out: list[str] = []
        for l in self.incoming(name):
            if l.source not in out:
                out.append(l.source)
        return out

    def topological_order(self) -> list[str]:
        """Kahn's algorithm, ties broken by declaration order."""
        names = self.function_names
        indeg = {n: 0 for n in names}
        for l in self.links():
            if l.destination in indeg and l.source in indeg:
                indeg[l.destination] += 1
        order: list[str] = []
        ready = [n for n in names if indeg[n] == 0]
        while ready:
            n = ready.pop(0)
            order.append(n)
            for l in self.links():
                if l.source != n or l.destination not in indeg:
                    continue
                indeg[l.destination] -= 1
                if indeg[l.destination] == 0:
                    ready.append(l.destination)
            ready.sort(key=names.index)
        if len(order) != len(names):
            raise WorkflowSemanticError(find_cycles(self))
        return order

    def downstream(self, name: str) -> list[str]:
        """Functions reachable from ``name`` (excluding itself), in topo order."""
        seen: set[str] = set()
        stack = [name]
        while stack:
            for s in self.successors(stack.pop()):
                if s not in seen:
                    seen.add(s)
                    stack.append(s)
        return [n for n in self.topological_order() if n in seen]


# ---------------------------------------------------------------- validation


@dataclass(frozen=True)
class Finding:
    code: str
    element: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.element}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.findings

    def codes(self) -> list[str]:
        return [f.code for f in self.findings]

    def __len__(self) -> int:
        return len(self.findings)


def find_cycles(defn: WorkflowDefinition) -> list[Finding]:
    """Report one back edge per cycle found by depth-first search."""
    names = defn.function_names
    known = set(names)
    color = {n: 0 for n in names}
    findings: list[Finding] = []

    def visit(u: str) -> None:
        color[u] = 1
        for v in defn.successors(u):
            if v not in known:
                continue
            if color[v] == 1:
                findings.append(Finding("cycle", f"{u}->{v}", f"back edge {u} -> {v} closes a cycle"))
            elif color[v] == 0:
                visit(v)
        color[u] = 2

    for n in names:
        if color[n] == 0:
            visit(n)
    return findings


def validate(defn: WorkflowDefinition) -> ValidationReport:
    """Check every structural invariant; findings are data, never raised."""
    out: list[Finding] = []
    names = defn.function_names
    known = set(names)

    seen: set[str] = set()
    for n in names:
        if n in seen:
            out.append(Finding("duplicate function", n, "declared more than once"))
        seen.add(n)
        if n == CLIENT:
            out.append(Finding("reserved name", n, "function name is reserved"))

    for ref, what in [(defn.entry, "entry")] + [(t, "terminal") for t in defn.terminals]:
        if ref not in known:
            out.append(Finding("dangling reference", ref, f"{what} names an unknown function"))
    if not defn.terminals:
        out.append(Finding("no terminal", defn.name, "at least one terminal function is required"))

    edge_keys: dict[tuple[str, str], FlowEdge] = {}
    for e in defn.flows:
        label = f"{e.source}.{e.data_name}"
        if e.source not in known:
            out.append(Finding("dangling reference", label, f"unknown source function {e.source!r}"))
        if not e.destinations:
            out.append(Finding("empty destinations", label, "edge has no destination"))
        if len(set(e.destinations)) != len(e.destinations):
            out.append(Finding("duplicate destination", label, "a destination appears twice"))
        for d in e.destinations:
            if d not in known:
                out.append(Finding("dangling reference", label, f"unknown destination {d!r}"))
        prior = edge_keys.get((e.source, e.data_name))
        if prior is not None:
            if prior.conditional or e.conditional:
                out.append(Finding("switch and fan-out", label,
                                   "data is both switched and sent unconditionally"))
            else:
                out.append(Finding("duplicate output", label, "data declared by two outputs"))
        edge_keys[(e.source, e.data_name)] = e
        if e.conditional:
            if len(e.labels) != len(e.destinations) or len(set(e.labels)) != len(e.labels):
                out.append(Finding("bad switch", label, "labels must be unique, one per destination"))
            if e.source in known and defn.function(e.source).switch_selector is None:
                out.append(Finding("missing selector", label, "switch edge needs a selector on its source"))

    for t in defn.terminals:
        if t in known and defn.outgoing(t):
            out.append(Finding("terminal with outgoing edge", t, "terminal functions must not emit edges"))

    touched = {e.source for e in defn.flows} | {d for e in defn.flows for d in e.destinations}
    for f in defn.functions:
        if f.name not in touched and f.name != defn.entry:
            out.append(Finding("orphan function", f.name, "not referenced by any flow and not the entry"))
        if f.memory_mb <= 0:
            out.append(Finding("bad memory", f.name, "memory_mb must be positive"))
        if f.name != defn.entry and not f.declared_inputs:
            out.append(Finding("empty inputs", f.name, "non-entry function declares no inputs"))
        if f.name not in defn.terminals and not defn.outgoing(f.name):
            out.append(Finding("no outputs", f.name, "non-terminal function never sends data"))
        if not 0.0 <= f.compute.emit_at <= 1.0:
            out.append(Finding("bad emit point", f.name, "emit_at must lie in [0, 1]"))

    links = [l for l in defn.links() if l.destination in known]
    for f in defn.functions:
        incoming = [l for l in links if l.destination == f.name]
        delivered = [l.data_name for l in incoming]
        for d in f.declared_inputs:
            if f.name == defn.entry and d not in delivered:
                continue  # supplied by the client
            if d not in delivered:
                out.append(Finding("unsatisfiable input", f"{f.name}.{d}",
                                   "no edge delivers this declared input"))
            elif delivered.count(d) > 1:
                out.append(Finding("ambiguous input", f"{f.name}.{d}",
                                   "more than one edge delivers this input"))
        for l in incoming:
            if l.data_name not in f.declared_inputs:
                out.append(Finding("undeclared input", f"{f.name}.{l.data_name}",
                                   f"edge from {l.source} delivers data the function does not declare"))

    out.extend(find_cycles(defn))
    return ValidationReport(tuple(out))


# ------------------------------------------------------------------ parsing

_IDENT = r"[A-Za-z_][A-Za-z0-9_\-]*"


def _parse_list(text: str, line_no: int) -> list[str]:
    text = text.strip()
    if not (text.startswith("[") and text.endswith("]")):
        raise WorkflowSyntaxError(line_no, f"expected [..] list, got {text!r}")
    body = text[1:-1].strip()
    if not body:
        return []
    items = [x.strip() for x in body.split(",")]
    for it in items:
        if not re.fullmatch(_IDENT, it):
            raise WorkflowSyntaxError(line_no, f"bad identifier {it!r}")
    return items


def _parse_compute(text: str, line_no: int) -> tuple[ComputeModel, Optional[str]]:
    tokens = text.split()
    if not tokens:
        raise WorkflowSyntaxError(line_no, "empty compute descriptor")
    m = re.fullmatch(rf"({_IDENT})(?:\((\d+)\))?", tokens[0])
    if not m:
        raise WorkflowSyntaxError(line_no, f"bad transform {tokens[0]!r}")
    kw: dict = {"transform": m.group(1), "arg": int(m.group(2)) if m.group(2) else None}
    selector = None
    for tok in tokens[1:]:
        if "=" not in tok:
            raise WorkflowSyntaxError(line_no, f"expected key=value, got {tok!r}")
        key, val = tok.split("=", 1)
        try:
            if key == "cost":
                num = re.fullmatch(r"([0-9]*\.?[0-9]+)ms/MiB", val)
                if not num:
                    raise ValueError(val)
                kw["cost_ms_per_mib"] = float(num.group(1))
            elif key == "base":
                num = re.fullmatch(r"([0-9]*\.?[0-9]+)ms", val)
                if not num:
                    raise ValueError(val)
                kw["base_ms"] = float(num.group(1))
            elif key == "emit":
                kw["emit_at"] = float(val)
            elif key == "select":
                selector = val
            else:
                raise WorkflowSyntaxError(line_no, f"unknown compute key {key!r}")
        except ValueError:
            raise WorkflowSyntaxError(line_no, f"bad value for {key}: {val!r}") from None
    return ComputeModel(**kw), selector


def _parse_outputs(text: str, line_no: int) -> list[tuple[str, list[str]]]:
    text = text.strip()
    if not (text.startswith("[") and text.endswith("]")):
        raise WorkflowSyntaxError(line_no, f"expected [..] list, got {text!r}")
    body = text[1:-1].strip()
    out = []
    for item in filter(None, (x.strip() for x in body.split(";"))):
        if "->" not in item:
            raise WorkflowSyntaxError(line_no, f"output {item!r} lacks '->'")
        name, dests = (x.strip() for x in item.split("->", 1))
        dest_list = [d.strip() for d in dests.split(",")]
        for ident in [name, *dest_list]:
            if not re.fullmatch(_IDENT, ident):
                raise WorkflowSyntaxError(line_no, f"bad identifier {ident!r}")
        out.append((name, dest_list))
    return out


def _parse_switch(text: str, line_no: int) -> tuple[str, list[tuple[str, str]]]:
    m = re.fullmatch(rf"\s*({_IDENT})\s*->\s*\{{(.*)\}}\s*", text)
    if not m:
        raise WorkflowSyntaxError(line_no, f"bad switch {text!r}")
    pairs = []
    for item in filter(None, (x.strip() for x in m.group(2).split(","))):
        pm = re.fullmatch(rf"({_IDENT})\s*:\s*({_IDENT})", item)
        if not pm:
            raise WorkflowSyntaxError(line_no, f"bad switch arm {item!r}")
        pairs.append((pm.group(1), pm.group(2)))
    if not pairs:
        raise WorkflowSyntaxError(line_no, "switch has no arms")
    return m.group(1), pairs


def parse_workflow(text: str, strict: bool = True) -> WorkflowDefinition:
    """Parse the line-oriented definition format.

    With ``strict`` (the default) any validation finding raises
    :class:`WorkflowSemanticError`; otherwise the definition is returned
    as-is for :func:`validate` to report on.
    """
    name: Optional[str] = None
    entry: Optional[str] = None
    terminals: Optional[list[str]] = None
    order: list[str] = []
    fn: dict[str, dict] = {}
    flows: list[FlowEdge] = []
    current: Optional[str] = None

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.fullmatch(rf"function\s+({_IDENT})\s*:", line)
        if m:
            current = m.group(1)
            if current in fn:
                raise WorkflowSyntaxError(line_no, f"function {current!r} declared twice")
            order.append(current)
            fn[current] = {"memory_mb": 128, "compute": ComputeModel(), "inputs": (), "selector": None,
                           "line": line_no}
            continue
        if ":" not in line:
            raise WorkflowSyntaxError(line_no, f"expected 'key: value', got {line!r}")
        key, value = (x.strip() for x in line.split(":", 1))
        if key == "workflow":
            if not re.fullmatch(_IDENT, value):
                raise WorkflowSyntaxError(line_no, f"bad workflow name {value!r}")
            name = value
            current = None
        elif key == "entry":
            entry = value
            current = None
        elif key == "terminals":
            terminals = _parse_list(value, line_no)
            current = None
        elif current is None:
            raise WorkflowSyntaxError(line_no, f"{key!r} outside a function block")
        elif key == "memory_mb":
            try:
                fn[current]["memory_mb"] = int(value)
            except ValueError:
                raise WorkflowSyntaxError(line_no, f"memory_mb must be an integer, got {value!r}") from None
        elif key == "compute":
            fn[current]["compute"], sel = _parse_compute(value, line_no)
            if sel is not None:
                fn[current]["selector"] = sel
        elif key == "inputs":
            fn[current]["inputs"] = tuple(_parse_list(value, line_no))
        elif key == "outputs":
            for data_name, dests in _parse_outputs(value, line_no):
                flows.append(FlowEdge(current, data_name, tuple(dests)))
        elif key == "switch":
            data_name, arms = _parse_switch(value, line_no)
            flows.append(FlowEdge(current, data_name, tuple(d for _, d in arms), True,
                                  tuple(lab for lab, _ in arms)))
        else:
            raise WorkflowSyntaxError(line_no, f"unknown key {key!r}")

    if name is None:
        raise WorkflowSyntaxError(1, "missing 'workflow:' header")
    if entry is None:
        raise WorkflowSyntaxError(len(text.splitlines()), "missing 'entry:'")
    if terminals is None:
        raise WorkflowSyntaxError(len(text.splitlines()), "missing 'terminals:'")

    functions = tuple(
        FunctionSpec(n, fn[n]["compute"], fn[n]["inputs"], fn[n]["memory_mb"], fn[n]["selector"])
        for n in order
    )
    defn = WorkflowDefinition(name, functions, tuple(flows), entry, tuple(terminals))
    if strict:
        report = validate(defn)
        if report.findings:
            raise WorkflowSemanticError(report.findings)
    return defn


def format_workflow(defn: WorkflowDefinition) -> str:
    """Render a definition back to the text format (parse round-trips it)."""

    def num(x: float) -> str:
        return f"{x:g}"

    lines = [f"workflow: {defn.name}"]
    for f in defn.functions:
        c = f.compute
        head = c.transform + (f"({c.arg})" if c.arg is not None else "")
        parts = [head]
        if c.cost_ms_per_mib:
            parts.append(f"cost={num(c.cost_ms_per_mib)}ms/MiB")
        if c.base_ms:
            parts.append(f"base={num(c.base_ms)}ms")
        if c.emit_at != 1.0:
            parts.append(f"emit={num(c.emit_at)}")
        if f.switch_selector:
            parts.append(f"select={f.switch_selector}")
        lines.append(f"function {f.name}:")
        lines.append(f"  memory_mb: {f.memory_mb}")
        lines.append(f"  compute: {' '.join(parts)}")
        lines.append(f"  inputs: [{', '.join(f.declared_inputs)}]")
        plain = [e for e in defn.outgoing(f.name) if not e.conditional]
        if plain:
            body = "; ".join(f"{e.data_name} -> {', '.join(e.destinations)}" for e in plain)
            lines.append(f"  outputs: [{body}]")
        for e in defn.outgoing(f.name):
            if e.conditional:
                arms = ", ".join(f"{lab}: {d}" for lab, d in zip(e.labels, e.destinations))
                lines.append(f"  switch: {e.data_name} -> {{{arms}}}")
    lines.append(f"entry: {defn.entry}")
    lines.append(f"terminals: [{', '.join(defn.terminals)}]")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- placement


@dataclass(frozen=True)
class Placement:
    assignment: Mapping[str, str]
    nodes: tuple[str, ...]

    def node_of(self, function: str) -> str:
        if function == CLIENT:
            return CLIENT_NODE
        return self.assignment[function]

    def functions_on(self, node: str) -> list[str]:
        return [f for f, n in self.assignment.items() if n == node]


PlacementPolicy = Callable[[WorkflowDefinition, Sequence[str]], Mapping[str, str]]


def _round_robin(defn: WorkflowDefinition, nodes: Sequence[str]) -> dict[str, str]:
    return {f.name: nodes[i % len(nodes)] for i, f in enumerate(defn.functions)}


def _single_node(defn: WorkflowDefinition, nodes: Sequence[str]) -> dict[str, str]:
    return {f.name: nodes[0] for f in defn.functions}


PLACEMENT_POLICIES: dict[str, PlacementPolicy] = {
    "roundrobin": _round_robin,
    "single": _single_node,
}


def _node_ids(cluster) -> tuple[str, ...]:
    if hasattr(cluster, "node_ids"):
        ids = cluster.node_ids
        return tuple(ids() if callable(ids) else ids)
    return tuple(cluster)


def plan_placement(
    defn: WorkflowDefinition,
    cluster,
    policy: Union[str, PlacementPolicy] = "roundrobin",
    mapping: Optional[Mapping[str, str]] = None,
) -> Placement:
    """Assign every function to a node.

    ``cluster`` is a ClusterConfig (or anything exposing ``node_ids``) or a
    plain sequence of node ids. ``policy`` is ``"roundrobin"``, ``"single"``,
    ``"explicit"`` (uses ``mapping``) or any callable returning a mapping.
    """
    nodes = _node_ids(cluster)
    if not nodes:
        raise PlacementError("cluster has no nodes")
    if policy == "explicit":
        if mapping is None:
            raise PlacementError("explicit placement needs a mapping")
        assignment = dict(mapping)
    elif callable(policy):
        assignment = dict(policy(defn, nodes))
    elif policy in PLACEMENT_POLICIES:
        assignment = PLACEMENT_POLICIES[policy](defn, nodes)
    else:
        raise PlacementError(f"unknown placement policy {policy!r}")

    missing = [f for f in defn.function_names if f not in assignment]
    if missing:
        raise PlacementError(f"no node for {', '.join(missing)}")
    unknown = sorted({n for n in assignment.values() if n not in nodes})
    if unknown:
        raise PlacementError(f"unknown nodes {', '.join(unknown)}")
    extra = [f for f in assignment if f not in defn.function_names]
    if extra:
        raise PlacementError(f"placement names unknown functions {', '.join(extra)}")
    return Placement({f: assignment[f] for f in defn.function_names}, nodes)


@dataclass(frozen=True)
class LocalLink:
    link: Link
    src_node: str
    dst_node: str

    @property
    def is_local(self) -> bool:
        return self.src_node == self.dst_node


@dataclass(frozen=True)
class LocalDataFlowGraph:
    node: str
    functions: tuple[str, ...]
    inbound: tuple[LocalLink, ...]   # remote source -> local destination
    local: tuple[LocalLink, ...]     # both ends on this node
    outbound: tuple[LocalLink, ...]  # local source -> remote destination

    def edges(self) -> tuple[LocalLink, ...]:
        return self.inbound + self.local + self.outbound

    def owned(self) -> tuple[LocalLink, ...]:
        """Links whose source is local; each link is owned by exactly one node."""
        return self.local + self.outbound

    @property
    def empty(self) -> bool:
        return not (self.functions or self.inbound or self.local or self.outbound)


def project_local_graph(defn: WorkflowDefinition, placement: Placement, node: str) -> LocalDataFlowGraph:
    if node not in placement.nodes:
        raise UnknownNode(node)
    inbound, local, outbound = [], [], []
    for link in defn.links():
        src = placement.node_of(link.source)
        dst = placement.node_of(link.destination)
        ll = LocalLink(link, src, dst)
        if src == node and dst == node:
            local.append(ll)
        elif dst == node:
            inbound.append(ll)
        elif src == node:
            outbound.append(ll)
    return LocalDataFlowGraph(
        node,
        tuple(placement.functions_on(node)),
        tuple(inbound),
        tuple(local),
        tuple(outbound),
    )
