"""Circuit data model, cell library, text formats and validation.

Units are fixed by convention: ps, kOhm, fF, um, um^2 (kOhm * fF = ps).

File formats
------------
``.ckt``::

    clock 100
    die 0 0 40 40              # optional: xmin ymin xmax ymax
    port_in in1 [x y]
    port_out out1 [x y]
    gate U1 INV 0 10.0 12.5    # id cell size_index x y
    net n1 in1 U1/A            # id driver_pin sink_pin...

``.lib.json``: ``{cell: [{"p":..,"r":..,"q":..,"a":..}, ...]}`` ordered by size.

``.spf``: ``net <id> R=<kOhm> C=<fF>``; nets not listed get R=0, C=0.

``.pl`` (optional placement override): ``<gate> <x> <y>``.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping


class CircuitError(ValueError):
    """Base class for malformed circuit inputs."""


class ParseError(CircuitError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None, source: str = ""):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"{source}:{line}" if source else f"line {line}"
            if column is not None:
                where += f":{column}"
            where += ": "
        super().__init__(where + message)


class UnresolvedReferenceError(CircuitError):
    def __init__(self, kind: str, name: str, line: int | None = None):
        self.kind = kind
        self.name = name
        msg = f"unresolved {kind} reference {name!r}"
        if line is not None:
            msg = f"line {line}: " + msg
        super().__init__(msg)


class DuplicateIdError(CircuitError):
    pass


class CycleError(CircuitError):
    pass


class ValidationError(CircuitError):
    def __init__(self, diagnostics: list[str]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(diagnostics))


# ---------------------------------------------------------------------------
# library


@dataclass(frozen=True)
class CellVariant:
    size_index: int
    intrinsic_delay: float  # ps
    drive_resistance: float  # kOhm
    input_pin_cap: float  # fF
    area: float  # um^2


class CellLibrary:
    """Ordered size tables per cell name."""

    def __init__(self, cells: Mapping[str, Iterable[CellVariant]]):
        self.cells: dict[str, tuple[CellVariant, ...]] = {k: tuple(v) for k, v in cells.items()}

    def __contains__(self, cell: str) -> bool:
        return cell in self.cells

    def __eq__(self, other):
        return isinstance(other, CellLibrary) and self.cells == other.cells

    def __getitem__(self, cell: str) -> tuple[CellVariant, ...]:
        return self.cells[cell]

    @property
    def cell_names(self) -> list[str]:
        return sorted(self.cells)

    def n_sizes(self, cell: str) -> int:
        return len(self.cells[cell])

    def variant(self, cell: str, size_index: int) -> CellVariant:
        return self.cells[cell][size_index]

    def column(self, cell: str, name: str) -> list[float]:
        return [getattr(v, name) for v in self.cells[cell]]

    @classmethod
    def from_json(cls, text: str, source: str = "") -> "CellLibrary":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, exc.lineno, exc.colno, source) from None
        if not isinstance(raw, dict):
            raise ParseError("library must be a JSON object", 1, 1, source)
        cells = {}
        for name, sizes in raw.items():
            if not isinstance(sizes, list) or not sizes:
                raise ParseError(f"cell {name!r}: expected a non-empty list of sizes", source=source)
            variants = []
            for k, entry in enumerate(sizes):
                try:
                    variants.append(CellVariant(k, float(entry["p"]), float(entry["r"]),
                                                float(entry["q"]), float(entry["a"])))
                except (KeyError, TypeError, ValueError):
                    raise ParseError(f"cell {name!r} size {k}: need numeric p, r, q, a", source=source) from None
            cells[name] = variants
        return cls(cells)

    def to_json(self) -> str:
        raw = {name: [{"p": v.intrinsic_delay, "r": v.drive_resistance, "q": v.input_pin_cap, "a": v.area}
                      for v in variants]
               for name, variants in self.cells.items()}
        return json.dumps(raw, indent=1) + "\n"


def check_library(library: CellLibrary) -> list[str]:
    diags = []
    for name, variants in library.cells.items():
        for v in variants:
            if min(v.intrinsic_delay, v.input_pin_cap, v.area) < 0 or v.drive_resistance <= 0:
                diags.append(f"cell {name} size {v.size_index}: negative field or non-positive drive resistance")
        for a, b in zip(variants, variants[1:]):
            if not (b.drive_resistance < a.drive_resistance and b.input_pin_cap > a.input_pin_cap):
                diags.append(f"cell {name}: non-monotone size table at sizes {a.size_index}->{b.size_index}")
                break
    return diags


# ---------------------------------------------------------------------------
# circuit


@dataclass(frozen=True)
class Pin:
    owner: str
    name: str | None = None  # None for ports

    def __str__(self):
        return self.owner if self.name is None else f"{self.owner}/{self.name}"

    @classmethod
    def parse(cls, token: str) -> "Pin":
        if "/" in token:
            owner, name = token.split("/", 1)
            return cls(owner, name)
        return cls(token)


@dataclass(frozen=True)
class Gate:
    id: str
    cell: str
    size_index: int
    x: float
    y: float


@dataclass(frozen=True)
class Port:
    id: str
    direction: str  # "in" | "out"
    x: float | None = None
    y: float | None = None


@dataclass(frozen=True)
class Net:
    id: str
    driver: Pin
    sinks: tuple[Pin, ...]
    r: float = 0.0  # kOhm
    c: float = 0.0  # fF


@dataclass
class CircuitGraph:
    gates: dict[str, Gate]
    nets: dict[str, Net]
    ports: dict[str, Port]
    clock: float
    die: tuple[float, float, float, float] | None = None

    @property
    def inputs(self) -> list[str]:
        return [p.id for p in self.ports.values() if p.direction == "in"]

    @property
    def endpoints(self) -> list[str]:
        return [p.id for p in self.ports.values() if p.direction == "out"]

    def assignment(self) -> dict[str, int]:
        return {g.id: g.size_index for g in self.gates.values()}

    def with_assignment(self, sizes: Mapping[str, int]) -> "CircuitGraph":
        gates = {gid: replace(g, size_index=int(sizes.get(gid, g.size_index))) for gid, g in self.gates.items()}
        return replace(self, gates=gates)

    def fanout_net(self, gate_id: str) -> Net | None:
        for net in self.nets.values():
            if net.driver.owner == gate_id:
                return net
        return None

    def adjacency(self) -> dict[str, list[str]]:
        """Driver -> sink relation over gate and port ids."""
        adj: dict[str, list[str]] = {k: [] for k in list(self.ports) + list(self.gates)}
        for net in self.nets.values():
            adj.setdefault(net.driver.owner, []).extend(s.owner for s in net.sinks)
        return adj

    def topological_order(self) -> list[str]:
        adj = self.adjacency()
        indeg = {k: 0 for k in adj}
        for u, vs in adj.items():
            for v in vs:
                indeg[v] = indeg.get(v, 0) + 1
        ready = [k for k in adj if indeg[k] == 0]
        order = []
        while ready:
            u = ready.pop()
            order.append(u)
            for v in adj.get(u, ()):
                indeg[v] -= 1
                if indeg[v] == 0:
                    ready.append(v)
        if len(order) != len(indeg):
            stuck = sorted(k for k, d in indeg.items() if d > 0)
            raise CycleError(f"combinational cycle through {', '.join(stuck[:5])}")
        return order

    def depth(self) -> int:
        """Number of gates on the longest startpoint-to-endpoint route."""
        adj = self.adjacency()
        level: dict[str, int] = {}
        for u in self.topological_order():
            base = level.get(u, 0)
            here = base + (1 if u in self.gates else 0)
            for v in adj.get(u, ()):
                level[v] = max(level.get(v, 0), here)
            level[u] = here
        return max(level.values(), default=0)

    def die_box(self, library: CellLibrary | None = None) -> tuple[float, float, float, float]:
        if self.die is not None:
            return self.die
        xs, ys, half = [], [], 0.5
        for g in self.gates.values():
            xs.append(g.x)
            ys.append(g.y)
            if library is not None and g.cell in library:
                half = max(half, 0.5 * math.sqrt(max(v.area for v in library[g.cell])))
        for p in self.ports.values():
            if p.x is not None:
                xs.append(p.x)
                ys.append(p.y)
        if not xs:
            return (0.0, 0.0, 1.0, 1.0)
        return (min(xs) - half, min(ys) - half, max(xs) + half, max(ys) + half)


def validate_graph(graph: CircuitGraph, library: CellLibrary) -> list[str]:
    """One diagnostic string per violated invariant; [] when the design is clean."""
    diags = []
    for g in graph.gates.values():
        if g.cell not in library:
            diags.append(f"gate {g.id}: unknown cell {g.cell}")
        elif not 0 <= g.size_index < library.n_sizes(g.cell):
            diags.append(f"gate {g.id}: size_index {g.size_index} out of range for {g.cell}")
    diags.extend(check_library(library))

    output_pins = {}
    for net in graph.nets.values():
        if net.driver in output_pins:
            diags.append(f"pin {net.driver}: drives multiple nets ({output_pins[net.driver]}, {net.id})")
        output_pins.setdefault(net.driver, net.id)
        owner = net.driver.owner
        if owner in graph.ports and graph.ports[owner].direction != "in":
            diags.append(f"net {net.id}: driven by output port {owner}")
        if net.r < 0 or net.c < 0:
            diags.append(f"net {net.id}: negative parasitics")
    driven_by: dict[Pin, list[str]] = {}
    for net in graph.nets.values():
        for s in net.sinks:
            driven_by.setdefault(s, []).append(net.id)
    for net in graph.nets.values():
        extra = [s for s in net.sinks if s in output_pins or (s.owner in graph.ports and graph.ports[s.owner].direction == "in")]
        if extra:
            diags.append(f"net {net.id}: multiple drivers (sink {extra[0]} is itself a driver)")
    for pin, nets in driven_by.items():
        if len(nets) > 1:
            diags.append(f"pin {pin}: multiple drivers ({', '.join(nets)})")
    gates_with_inputs = {s.owner for s in driven_by if s.owner in graph.gates}
    for gid in graph.gates:
        if gid not in gates_with_inputs:
            diags.append(f"gate {gid}: no driven inputs")
    for pid in graph.endpoints:
        if Pin(pid) not in driven_by:
            diags.append(f"port {pid}: output port is not driven")
    for gid in graph.gates:
        if sum(1 for net in graph.nets.values() if net.driver.owner == gid) > 1:
            diags.append(f"gate {gid}: drives more than one net")
    try:
        graph.topological_order()
    except CycleError as exc:
        diags.append(str(exc))
    if graph.clock <= 0:
        diags.append("clock period must be positive")
    return diags


# ---------------------------------------------------------------------------
# parsing


_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"


def _tokens(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip() or line.lstrip().startswith("*"):
            continue
        cols = []
        for m in re.finditer(r"\S+", line):
            cols.append((m.group(0), m.start() + 1))
        yield lineno, cols


def _float(tok: str, lineno: int, col: int, source: str) -> float:
    try:
        val = float(tok)
    except ValueError:
        raise ParseError(f"expected a number, got {tok!r}", lineno, col, source) from None
    if not math.isfinite(val):
        raise ParseError(f"non-finite number {tok!r}", lineno, col, source)
    return val


def parse_netlist(text: str, source: str = "") -> CircuitGraph:
    gates: dict[str, Gate] = {}
    nets: dict[str, Net] = {}
    ports: dict[str, Port] = {}
    clock = None
    die = None
    ids: dict[str, int] = {}

    def claim(name: str, lineno: int):
        if name in ids:
            raise DuplicateIdError(f"line {lineno}: duplicate id {name!r} (first defined on line {ids[name]})")
        ids[name] = lineno

    for lineno, cols in _tokens(text):
        kw, kcol = cols[0]
        args = cols[1:]
        if kw == "clock":
            if len(args) != 1:
                raise ParseError("clock takes one value", lineno, kcol, source)
            clock = _float(args[0][0], lineno, args[0][1], source)
        elif kw == "die":
            if len(args) != 4:
                raise ParseError("die takes xmin ymin xmax ymax", lineno, kcol, source)
            die = tuple(_float(t, lineno, c, source) for t, c in args)
        elif kw in ("port_in", "port_out"):
            if len(args) not in (1, 3):
                raise ParseError(f"{kw} takes <id> [x y]", lineno, kcol, source)
            pid = args[0][0]
            claim(pid, lineno)
            x = y = None
            if len(args) == 3:
                x = _float(args[1][0], lineno, args[1][1], source)
                y = _float(args[2][0], lineno, args[2][1], source)
            ports[pid] = Port(pid, "in" if kw == "port_in" else "out", x, y)
        elif kw == "gate":
            if len(args) != 5:
                raise ParseError("gate takes <id> <cell> <size_index> <x> <y>", lineno, kcol, source)
            gid = args[0][0]
            claim(gid, lineno)
            tok, col = args[2]
            if not re.fullmatch(r"\d+", tok):
                raise ParseError(f"size_index must be a non-negative integer, got {tok!r}", lineno, col, source)
            gates[gid] = Gate(gid, args[1][0], int(tok), _float(args[3][0], lineno, args[3][1], source),
                              _float(args[4][0], lineno, args[4][1], source))
        elif kw == "net":
            if len(args) < 2:
                raise ParseError("net takes <id> <driver_pin> <sink_pin>...", lineno, kcol, source)
            nid = args[0][0]
            claim(nid, lineno)
            nets[nid] = Net(nid, Pin.parse(args[1][0]), tuple(Pin.parse(t) for t, _ in args[2:]))
        else:
            raise ParseError(f"unknown keyword {kw!r}", lineno, kcol, source)

    if clock is None:
        raise ParseError("missing clock statement", source=source)
    graph = CircuitGraph(gates, nets, ports, clock, die)
    for net in nets.values():
        for pin in (net.driver,) + net.sinks:
            if pin.name is None and pin.owner not in ports:
                raise UnresolvedReferenceError("port", pin.owner, ids[net.id])
            if pin.name is not None and pin.owner not in gates:
                raise UnresolvedReferenceError("gate", pin.owner, ids[net.id])
    return graph


def parse_parasitics(text: str, graph: CircuitGraph, source: str = "") -> CircuitGraph:
    nets = dict(graph.nets)
    seen = set()
    for lineno, cols in _tokens(text):
        if cols[0][0] != "net" or len(cols) != 4:
            raise ParseError("expected 'net <id> R=<kOhm> C=<fF>'", lineno, cols[0][1], source)
        nid = cols[1][0]
        if nid not in nets:
            raise UnresolvedReferenceError("net", nid, lineno)
        if nid in seen:
            raise DuplicateIdError(f"line {lineno}: parasitics for net {nid!r} given twice")
        seen.add(nid)
        vals = {}
        for tok, col in cols[2:]:
            m = re.fullmatch(r"([RC])=(" + _NUM + ")", tok)
            if not m:
                raise ParseError(f"bad field {tok!r}", lineno, col, source)
            vals[m.group(1)] = _float(m.group(2), lineno, col + 2, source)
        if set(vals) != {"R", "C"}:
            raise ParseError("need both R= and C=", lineno, cols[2][1], source)
        nets[nid] = replace(nets[nid], r=vals["R"], c=vals["C"])
    return replace(graph, nets=nets)


def parse_placement(text: str, graph: CircuitGraph, source: str = "") -> CircuitGraph:
    gates = dict(graph.gates)
    for lineno, cols in _tokens(text):
        if len(cols) != 3:
            raise ParseError("expected '<gate> <x> <y>'", lineno, cols[0][1], source)
        gid = cols[0][0]
        if gid not in gates:
            raise UnresolvedReferenceError("gate", gid, lineno)
        gates[gid] = replace(gates[gid], x=_float(cols[1][0], lineno, cols[1][1], source),
                             y=_float(cols[2][0], lineno, cols[2][1], source))
    return replace(graph, gates=gates)


def parse_circuit(netlist_text: str, library_text: str, parasitics_text: str = "",
                  placement_text: str | None = None) -> tuple[CircuitGraph, CellLibrary]:
    """Parse and validate a design; raises a :class:`CircuitError` subclass on bad input."""
    library = CellLibrary.from_json(library_text, "library")
    graph = parse_netlist(netlist_text, "netlist")
    for g in graph.gates.values():
        if g.cell not in library:
            raise UnresolvedReferenceError("cell", g.cell)
    graph = parse_parasitics(parasitics_text, graph, "parasitics")
    if placement_text:
        graph = parse_placement(placement_text, graph, "placement")
    graph.topological_order()
    diags = validate_graph(graph, library)
    if diags:
        raise ValidationError(diags)
    return graph, library


def load_design(ckt_path, lib_path=None, spf_path=None, pl_path=None) -> tuple[CircuitGraph, CellLibrary]:
    """Read a design from disk; sibling ``.lib.json``/``.spf`` files are used by default."""
    from pathlib import Path

    ckt_path = Path(ckt_path)
    stem = ckt_path.with_suffix("")
    lib_path = Path(lib_path) if lib_path else stem.with_suffix(".lib.json")
    spf_path = Path(spf_path) if spf_path else stem.with_suffix(".spf")
    netlist = ckt_path.read_text()
    library = lib_path.read_text()
    parasitics = spf_path.read_text() if spf_path.exists() else ""
    placement = Path(pl_path).read_text() if pl_path else None
    return parse_circuit(netlist, library, parasitics, placement)


# ---------------------------------------------------------------------------
# emitting


def emit_netlist(graph: CircuitGraph) -> str:
    lines = [f"clock {graph.clock!r}"]
    if graph.die is not None:
        lines.append("die " + " ".join(repr(float(v)) for v in graph.die))
    for p in graph.ports.values():
        kw = "port_in" if p.direction == "in" else "port_out"
        lines.append(f"{kw} {p.id}" + ("" if p.x is None else f" {p.x!r} {p.y!r}"))
    for g in graph.gates.values():
        lines.append(f"gate {g.id} {g.cell} {g.size_index} {g.x!r} {g.y!r}")
    for n in graph.nets.values():
        lines.append(f"net {n.id} {n.driver} " + " ".join(str(s) for s in n.sinks))
    return "\n".join(lines) + "\n"


def emit_parasitics(graph: CircuitGraph) -> str:
    return "".join(f"net {n.id} R={n.r!r} C={n.c!r}\n" for n in graph.nets.values())


def emit_sizing_changelist(before: Mapping[str, int], after: Mapping[str, int], graph: CircuitGraph) -> str:
    """ECO-style list of resized gates, sorted by gate id."""
    if set(before) != set(after):
        missing = sorted(set(before) ^ set(after))
        raise ValueError(f"assignments cover different gates: {', '.join(missing[:5])}")
    lines = [f"{gid} {graph.gates[gid].cell} {before[gid]} -> {after[gid]}"
             for gid in sorted(before) if before[gid] != after[gid]]
    return "".join(line + "\n" for line in lines)


@dataclass(frozen=True)
class TimingPath:
    """Startpoint-to-endpoint route; ``elements`` alternates nets and gates."""
    id: int
    endpoint: str
    elements: tuple[str, ...]
    gates: tuple[str, ...]
    nets: tuple[str, ...]
    slack: float
    meta: dict = field(default_factory=dict, compare=False, hash=False)
