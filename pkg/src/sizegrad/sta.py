"""Golden static timing analysis.

Delay model: a gate drives its output net with ``p + r * load`` where load is
the net's wire cap plus the input caps of its sinks at their current sizes;
a net adds ``m * R * (C/2 + sink caps)`` on top (Elmore with the layout
penalty ``m``). Arrivals start at 0 on input ports; every output port is an
endpoint required at the clock period.

The arithmetic is written once over "values" that may be floats, numpy
arrays (batch of assignments) or tape variables, so the golden numbers, the
batched oracle and the differentiable surrogate share one evaluation order.
"""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import ad
from .layout import PenaltyModel, PhysicalConfig
from .model import CellLibrary, CellVariant, CircuitGraph, TimingPath


def gate_delay(variant: CellVariant, load: float) -> float:
    """Intrinsic delay plus drive resistance times load (ps)."""
    if load < 0:
        raise ValueError(f"negative load capacitance {load}")
    return variant.intrinsic_delay + variant.drive_resistance * load


def wire_delay(r, c, sink_caps, multiplier=1.0):
    """Elmore delay of a lumped net scaled by the layout multiplier (ps)."""
    return multiplier * r * (c * 0.5 + sink_caps)


@dataclass
class _NetInfo:
    id: str
    r: float
    c: float
    driver_gate: int | None
    gate_sinks: list[int]
    port_sinks: list[str]


class TimingGraph:
    """Circuit compiled into index form for repeated timing evaluation."""

    def __init__(self, graph: CircuitGraph, library: CellLibrary, physical: PhysicalConfig | None = None):
        self.graph = graph
        self.library = library
        self.clock = float(graph.clock)
        order = graph.topological_order()
        self.gate_ids = [u for u in order if u in graph.gates]
        self.index = {g: i for i, g in enumerate(self.gate_ids)}
        self.cells = [graph.gates[g].cell for g in self.gate_ids]
        self.n_sizes = np.array([library.n_sizes(c) for c in self.cells])
        width = int(self.n_sizes.max()) if len(self.cells) else 1
        self.tables = {}
        for key, attr in (("p", "intrinsic_delay"), ("r", "drive_resistance"),
                          ("q", "input_pin_cap"), ("a", "area")):
            tab = np.full((len(self.cells), width), np.nan)
            for i, cell in enumerate(self.cells):
                col = library.column(cell, attr)
                tab[i, :len(col)] = col
            self.tables[key] = tab

        self.nets: list[_NetInfo] = []
        self.net_index = {}
        for net in graph.nets.values():
            drv = self.index.get(net.driver.owner)
            info = _NetInfo(net.id, float(net.r), float(net.c), drv,
                            [self.index[s.owner] for s in net.sinks if s.owner in self.index],
                            [s.owner for s in net.sinks if s.owner not in self.index])
            self.net_index[net.id] = len(self.nets)
            self.nets.append(info)
        n = len(self.gate_ids)
        self.in_nets: list[list[int]] = [[] for _ in range(n)]
        self.out_net: list[int | None] = [None] * n
        for k, info in enumerate(self.nets):
            for s in info.gate_sinks:
                self.in_nets[s].append(k)
            if info.driver_gate is not None:
                self.out_net[info.driver_gate] = k
        self.port_nets = [k for k, info in enumerate(self.nets) if info.driver_gate is None]
        self.endpoints = sorted(graph.endpoints)
        self.endpoint_net = {}
        for k, info in enumerate(self.nets):
            for p in info.port_sinks:
                self.endpoint_net[p] = k
        self.physical = physical if physical is not None else PhysicalConfig(enabled=False)
        self.penalty = PenaltyModel(graph, library, self.physical, self.gate_ids) if self.physical.enabled else None

    # -- size handling -----------------------------------------------------
    @property
    def n_gates(self) -> int:
        return len(self.gate_ids)

    def size_vector(self, assignment: Mapping[str, int] | Sequence[int] | None = None) -> np.ndarray:
        if assignment is None:
            assignment = self.graph.assignment()
        if isinstance(assignment, Mapping):
            return np.array([int(assignment[g]) for g in self.gate_ids], dtype=int)
        return np.asarray(assignment, dtype=int)

    def assignment(self, sizes: Sequence[int]) -> dict[str, int]:
        return {g: int(s) for g, s in zip(self.gate_ids, sizes)}

    def params(self, sizes) -> tuple[list, list, list, list]:
        """Per-gate (p, r, q, a) at integer sizes; ``sizes`` is (n,) or (B, n)."""
        sizes = np.asarray(sizes, dtype=int)
        rows = np.arange(self.n_gates)
        out = []
        for key in ("p", "r", "q", "a"):
            tab = self.tables[key]
            if sizes.ndim == 1:
                vals = tab[rows, sizes]
                out.append([float(v) for v in vals])
            else:
                vals = tab[rows[None, :], sizes]
                out.append([vals[:, i] for i in range(self.n_gates)])
        return tuple(out)

    # -- generic evaluation ------------------------------------------------
    def element_delays(self, p, r, q, a):
        """Wire delay per net and gate delay per gate, generic over value types."""
        if self.penalty is not None:
            mults = self.penalty.net_multipliers(a)
        else:
            mults = [1.0] * len(self.nets)
        caps = []
        wire = []
        for k, net in enumerate(self.nets):
            sink_caps = 0.0
            for s in net.gate_sinks:
                sink_caps = sink_caps + q[s]
            caps.append(sink_caps)
            wire.append(wire_delay(net.r, net.c, sink_caps, mults[k]))
        gate = []
        for i in range(self.n_gates):
            k = self.out_net[i]
            load = 0.0 if k is None else self.nets[k].c + caps[k]
            gate.append(p[i] + r[i] * load)
        return wire, gate, mults

    def forward(self, wire, gate):
        """Arrival at every net's sink pins and at every gate output."""
        net_arr = [None] * len(self.nets)
        gate_arr = [None] * self.n_gates
        for k in self.port_nets:
            net_arr[k] = 0.0 + wire[k]
        for i in range(self.n_gates):
            acc = None
            for k in self.in_nets[i]:
                acc = net_arr[k] if acc is None else ad.vmax(acc, net_arr[k])
            gate_arr[i] = acc + gate[i]
            k = self.out_net[i]
            if k is not None:
                net_arr[k] = gate_arr[i] + wire[k]
        return net_arr, gate_arr

    def endpoint_slacks(self, sizes) -> np.ndarray:
        """Endpoint slacks for one (n,) or a batch (B, n) of assignments."""
        sizes = np.asarray(sizes, dtype=int)
        p, r, q, a = self.params(sizes)
        wire, gate, _ = self.element_delays(p, r, q, a)
        net_arr, _ = self.forward(wire, gate)
        cols = [self.clock - np.asarray(net_arr[self.endpoint_net[e]], dtype=float) for e in self.endpoints]
        if sizes.ndim == 1:
            return np.array([float(c) for c in cols])
        if not cols:
            return np.zeros((len(sizes), 0))
        return np.stack([np.broadcast_to(c, (len(sizes),)) for c in cols], axis=1)


@dataclass
class GatewiseMetrics:
    """Per-gate path groups and gate-wise WNS/TNS over an extracted path set."""
    group: dict[str, list[int]]
    critical: dict[str, int | None]
    wst: dict[str, float]
    tot: dict[str, float]


@dataclass
class TimingAnnotation:
    clock: float
    sizes: dict[str, int]
    arrival: dict[str, float]  # gate outputs, net sink pins and endpoints
    required: dict[str, float]
    slack: dict[str, float]
    gate_delay: dict[str, float]
    wire_delay: dict[str, float]
    multiplier: dict[str, float]
    endpoint_slack: dict[str, float]
    wns: float
    tns: float
    nve: int
    paths: list[TimingPath] = field(default_factory=list)
    gatewise: GatewiseMetrics | None = None

    def summary(self) -> dict:
        return {"wns": self.wns, "tns": self.tns, "nve": self.nve}

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in ("clock", "sizes", "arrival", "required", "slack", "gate_delay",
                                             "wire_delay", "multiplier", "endpoint_slack", "wns", "tns", "nve")}
        out["paths"] = [{"id": p.id, "endpoint": p.endpoint, "elements": list(p.elements), "slack": p.slack}
                        for p in self.paths]
        if self.gatewise is not None:
            out["gatewise"] = {"group": self.gatewise.group, "critical": self.gatewise.critical,
                               "wst": self.gatewise.wst, "tot": self.gatewise.tot}
        return out


def circuit_metrics(endpoint_slacks) -> tuple:
    """(WNS, TNS, NVE) along the last axis of an endpoint-slack array."""
    s = np.asarray(endpoint_slacks, dtype=float)
    if s.shape[-1] == 0:
        zero = np.zeros(s.shape[:-1])
        return (zero, zero, zero.astype(int)) if s.ndim > 1 else (math.inf, 0.0, 0)
    wns = s.min(axis=-1)
    tns = np.where(s < 0, s, 0.0).sum(axis=-1)
    nve = (s < 0).sum(axis=-1)
    if s.ndim == 1:
        return float(wns), float(tns), int(nve)
    return wns, tns, nve


def propagate(tg: TimingGraph, sizes=None) -> TimingAnnotation:
    """Full forward/backward timing pass at one integer assignment."""
    sizes = tg.size_vector(sizes) if not isinstance(sizes, np.ndarray) else sizes
    p, r, q, a = tg.params(sizes)
    wire, gate, mults = tg.element_delays(p, r, q, a)
    net_arr, gate_arr = tg.forward(wire, gate)

    clock = tg.clock
    # required times, reverse topological
    req_net = [math.inf] * len(tg.nets)  # at the sink pins of each net
    req_out = [math.inf] * tg.n_gates
    for k, net in enumerate(tg.nets):
        if net.port_sinks:
            req_net[k] = clock
    for i in reversed(range(tg.n_gates)):
        k = tg.out_net[i]
        if k is not None:
            req_out[i] = req_net[k] - wire[k]
        for kin in tg.in_nets[i]:
            req_net[kin] = min(req_net[kin], req_out[i] - gate[i])
    # nets feeding several gates got their min above; port-driven nets are done too

    arrival, required, slack = {}, {}, {}
    for k, net in enumerate(tg.nets):
        arrival[net.id] = float(net_arr[k])
        required[net.id] = float(req_net[k])
        slack[net.id] = float(req_net[k] - net_arr[k])
    for i, gid in enumerate(tg.gate_ids):
        arrival[gid] = float(gate_arr[i])
        required[gid] = float(req_out[i])
        slack[gid] = float(req_out[i] - gate_arr[i])
    ep = {}
    for e in tg.endpoints:
        k = tg.endpoint_net[e]
        arrival[e] = float(net_arr[k])
        required[e] = clock
        ep[e] = clock - float(net_arr[k])
        slack[e] = ep[e]
    wns, tns, nve = circuit_metrics([ep[e] for e in tg.endpoints])
    return TimingAnnotation(
        clock=clock, sizes=tg.assignment(sizes), arrival=arrival, required=required, slack=slack,
        gate_delay={g: float(d) for g, d in zip(tg.gate_ids, gate)},
        wire_delay={n.id: float(w) for n, w in zip(tg.nets, wire)},
        multiplier={n.id: float(m) for n, m in zip(tg.nets, mults)},
        endpoint_slack=ep, wns=wns, tns=tns, nve=nve)


def path_delay(tg: TimingGraph, elements: Sequence[str], wire, gate):
    """Launch-to-capture sum of element delays, in the forward pass's order."""
    total = 0.0
    for e in elements:
        if e in tg.net_index:
            total = total + wire[tg.net_index[e]]
        elif e in tg.index:
            total = total + gate[tg.index[e]]
    return total


def extract_critical_paths(tg: TimingGraph, ann: TimingAnnotation, slack_threshold: float = 0.0,
                           k_max: int | None = 8) -> list[TimingPath]:
    """Up to ``k_max`` worst paths per endpoint with slack below the threshold.

    Best-first search backwards from each endpoint, keyed by the exact
    worst-case completion (arrival at the frontier node plus the suffix
    delay), so complete paths pop in order of decreasing delay.
    """
    wire = [ann.wire_delay[n.id] for n in tg.nets]
    gate = [ann.gate_delay[g] for g in tg.gate_ids]
    gate_arr = [ann.arrival[g] for g in tg.gate_ids]
    clock = tg.clock
    found = []
    tie = itertools.count()
    for e in tg.endpoints:
        k0 = tg.endpoint_net[e]
        heap = []

        def push(k, suffix, trail):
            drv = tg.nets[k].driver_gate
            arr = 0.0 if drv is None else gate_arr[drv]
            heapq.heappush(heap, (-(arr + suffix), next(tie), k, suffix, trail))

        push(k0, wire[k0], (tg.nets[k0].id, e))
        count = 0
        while heap and (k_max is None or count < k_max):
            neg_bound, _, k, suffix, trail = heapq.heappop(heap)
            if clock + neg_bound >= slack_threshold + 1e-9 * max(1.0, abs(clock)):
                break
            drv = tg.nets[k].driver_gate
            if drv is None:
                start = _net_driver_port(tg, k)
                elements = (start,) + trail
                slack = clock - path_delay(tg, elements, wire, gate)
                if slack < slack_threshold:
                    found.append((e, elements, slack))
                    count += 1
                continue
            gid = tg.gate_ids[drv]
            for kin in dict.fromkeys(tg.in_nets[drv]):
                push(kin, suffix + gate[drv] + wire[kin], (tg.nets[kin].id, gid) + trail)
    found.sort(key=lambda t: (t[2], t[0], t[1]))
    paths = []
    for pid, (e, elements, slack) in enumerate(found):
        gates = tuple(x for x in elements if x in tg.index)
        nets = tuple(x for x in elements if x in tg.net_index)
        paths.append(TimingPath(pid, e, elements, gates, nets, slack))
    return paths


def _net_driver_port(tg: TimingGraph, k: int) -> str:
    return tg.graph.nets[tg.nets[k].id].driver.owner


def enumerate_all_paths(tg: TimingGraph, ann: TimingAnnotation) -> list[tuple[str, tuple, float]]:
    """Every startpoint-to-endpoint route by plain DFS (test oracle)."""
    wire = [ann.wire_delay[n.id] for n in tg.nets]
    gate = [ann.gate_delay[g] for g in tg.gate_ids]
    out = []

    def walk(k, trail, e):
        drv = tg.nets[k].driver_gate
        if drv is None:
            elements = (_net_driver_port(tg, k),) + trail
            out.append((e, elements, tg.clock - path_delay(tg, elements, wire, gate)))
            return
        gid = tg.gate_ids[drv]
        for kin in dict.fromkeys(tg.in_nets[drv]):
            walk(kin, (tg.nets[kin].id, gid) + trail, e)

    for e in tg.endpoints:
        k = tg.endpoint_net[e]
        walk(k, (tg.nets[k].id, e), e)
    return out


def gatewise_metrics(gate_ids: Sequence[str], paths: Sequence[TimingPath]) -> GatewiseMetrics:
    """Gate-wise critical path, path group, worst and total negative slack.

    Paths must be ordered by id; ids already encode the (slack, endpoint)
    tie-break so the first path of a group is its critical path.
    """
    group: dict[str, list[int]] = {g: [] for g in gate_ids}
    by_id = {}
    for p in paths:
        by_id[p.id] = p
        for g in dict.fromkeys(p.gates):
            group.setdefault(g, []).append(p.id)
    critical, wst, tot = {}, {}, {}
    for g, ids in group.items():
        ids.sort()
        if not ids:
            critical[g], wst[g], tot[g] = None, 0.0, 0.0
            continue
        best = ids[0]
        t = 0.0
        for pid in ids:
            s = by_id[pid].slack
            if s < by_id[best].slack:
                best = pid
            if s < 0:
                t += s
        critical[g] = best
        wst[g] = by_id[best].slack
        tot[g] = t
    return GatewiseMetrics(group, critical, wst, tot)


def analyze(tg: TimingGraph, sizes=None, slack_threshold: float = 0.0, k_max: int | None = 8) -> TimingAnnotation:
    """propagate + critical path extraction + gate-wise metrics."""
    ann = propagate(tg, sizes)
    ann.paths = extract_critical_paths(tg, ann, slack_threshold, k_max)
    ann.gatewise = gatewise_metrics(tg.gate_ids, ann.paths)
    return ann


def report(tg: TimingGraph, ann: TimingAnnotation, max_paths: int = 5) -> str:
    lines = [f"clock  {ann.clock:.3f} ps",
             f"WNS    {ann.wns:.3f} ps",
             f"TNS    {ann.tns:.3f} ps",
             f"NVE    {ann.nve}"]
    for p in ann.paths[:max_paths]:
        lines.append(f"path {p.id} -> {p.endpoint}  slack {p.slack:.3f} ps")
        lines.append("    " + " ".join(p.elements))
    if not ann.paths:
        lines.append("no violating paths")
    return "\n".join(lines) + "\n"
