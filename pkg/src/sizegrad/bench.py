"""Synthetic circuits, reference sizers and the benchmark harness."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import sta
from .layout import PhysicalConfig
from .model import (CellLibrary, CellVariant, CircuitGraph, Gate, Net, Pin, Port, emit_netlist,
                    emit_parasitics, parse_circuit)
from .optimizer import SizerConfig, TargetWeights, size_loop, violation_score

log = logging.getLogger(__name__)

CELL_PINS = {"INV": ("A",), "NAND2": ("A", "B"), "NOR2": ("A", "B")}
# base (p ps, r kOhm, q fF, a um^2) of the smallest variant
CELL_BASE = {"INV": (6.0, 2.0, 1.5, 1.0), "NAND2": (9.0, 2.4, 2.0, 1.5), "NOR2": (11.0, 3.0, 2.2, 1.5)}


@dataclass(frozen=True)
class BenchSpec:
    seed: int = 0
    n_gates: tuple[int, int] = (8, 8)  # inclusive range
    n_inputs: int = 3
    n_outputs: int = 2
    cells: tuple[str, ...] = ("INV", "NAND2", "NOR2")
    sizes_per_cell: int = 4
    tightness: float = 0.8
    utilization: float = 0.1  # total initial gate area / die area
    wire_r: float = 0.15  # kOhm per um of net half-perimeter
    wire_c: float = 0.8  # fF per um
    suite_size: int = 20
    initial: str = "min"  # or "random"

    def __post_init__(self):
        lo, hi = self.n_gates
        if lo < 1 or hi < lo:
            raise ValueError(f"infeasible gate count range {self.n_gates}")
        if self.n_inputs < 1 or self.n_outputs < 1:
            raise ValueError("need at least one input and one output port")
        if self.sizes_per_cell < 1:
            raise ValueError("sizes_per_cell must be >= 1")
        if self.initial not in ("min", "random"):
            raise ValueError(f"initial must be 'min' or 'random', got {self.initial!r}")
        if self.tightness <= 0 or not 0 < self.utilization <= 1:
            raise ValueError("tightness must be positive and utilization in (0, 1]")
        unknown = set(self.cells) - set(CELL_PINS)
        if unknown:
            raise ValueError(f"unknown cells {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchSpec":
        d = dict(d)
        for key in ("n_gates", "cells"):
            if key in d:
                d[key] = tuple(d[key]) if isinstance(d[key], (list, tuple)) else (d[key], d[key])
        return cls(**d)


@dataclass
class GeneratedCircuit:
    name: str
    netlist: str
    library: str
    parasitics: str

    def parse(self) -> tuple[CircuitGraph, CellLibrary]:
        return parse_circuit(self.netlist, self.library, self.parasitics)

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ckt = directory / f"{self.name}.ckt"
        ckt.write_text(self.netlist)
        (directory / f"{self.name}.lib.json").write_text(self.library)
        (directory / f"{self.name}.spf").write_text(self.parasitics)
        return ckt


def make_library(cells: Sequence[str], n_sizes: int) -> CellLibrary:
    """Drive-strength ladder x1, x2, x4, ... per cell; intrinsic delay shrinks slightly."""
    table = {}
    for cell in cells:
        p, r, q, a = CELL_BASE[cell]
        table[cell] = [CellVariant(k, p * (1.0 - 0.04 * k), r / 2 ** k, q * 2 ** k, a * 2 ** k)
                       for k in range(n_sizes)]
    return CellLibrary(table)


def generate_circuit(spec: BenchSpec, index: int = 0, physical: PhysicalConfig = PhysicalConfig()) -> GeneratedCircuit:
    """Random layered DAG with a clock at ``tightness`` times its initial critical delay."""
    rng = np.random.default_rng([spec.seed, index])
    lo, hi = spec.n_gates
    n = int(rng.integers(lo, hi + 1))
    library = make_library(spec.cells, spec.sizes_per_cell)
    n_layers = max(1, int(round(math.sqrt(n) * 1.2)))
    layer_of = np.sort(np.concatenate([np.arange(min(n, n_layers)), rng.integers(0, n_layers, max(0, n - n_layers))]))
    ins = [f"in{k}" for k in range(spec.n_inputs)]
    gate_ids = [f"U{k + 1}" for k in range(n)]
    cells = [spec.cells[int(rng.integers(len(spec.cells)))] for _ in range(n)]
    drawn = [int(rng.integers(spec.sizes_per_cell)) for _ in range(n)]
    sizes = drawn if spec.initial == "random" else [0] * n

    # sources available to each layer: inputs plus outputs of earlier layers
    sinks_of: dict[str, list[str]] = {s: [] for s in ins + gate_ids}
    for i, gid in enumerate(gate_ids):
        earlier = [gate_ids[j] for j in range(n) if layer_of[j] < layer_of[i]]
        prev = [gate_ids[j] for j in range(n) if layer_of[j] == layer_of[i] - 1]
        pool = ins + earlier
        for k, pin in enumerate(CELL_PINS[cells[i]]):
            # first pin prefers the previous layer so depth grows
            if k == 0 and prev:
                src = prev[int(rng.integers(len(prev)))]
            else:
                unused = [s for s in pool if not sinks_of[s]]
                cand = unused if unused and rng.random() < 0.7 else pool
                src = cand[int(rng.integers(len(cand)))]
            sinks_of[src].append(f"{gid}/{pin}")
    # every gate must reach an endpoint: each dangling gate gets its own output port
    dangling = [g for g in gate_ids if not sinks_of[g]]
    outs = [f"out{k}" for k in range(max(spec.n_outputs, len(dangling)))]
    others = [g for g in reversed(gate_ids) if g not in dangling]
    for k, port in enumerate(outs):
        if k < len(dangling):
            sinks_of[dangling[k]].append(port)
        else:
            sinks_of[others[(k - len(dangling)) % len(others)]].append(port)

    # placement: columns by layer, rows by order within the layer
    total_area = sum(library.variant(c, s).area for c, s in zip(cells, sizes))
    side = math.sqrt(total_area / spec.utilization)
    cols = n_layers + 2
    xs, ys = {}, {}
    for i, gid in enumerate(gate_ids):
        members = [j for j in range(n) if layer_of[j] == layer_of[i]]
        row = members.index(i)
        jitter = rng.uniform(-0.15, 0.15, 2)
        xs[gid] = float(side * (layer_of[i] + 1.5 + jitter[0]) / cols)
        ys[gid] = float(side * (row + 0.5 + jitter[1]) / max(len(members), 1))
    for k, p in enumerate(ins):
        xs[p], ys[p] = 0.0, side * (k + 0.5) / len(ins)
    for k, p in enumerate(outs):
        xs[p], ys[p] = side, side * (k + 0.5) / len(outs)
    die = (0.0, 0.0, side, side)

    ports = {p: Port(p, "in", round(xs[p], 4), round(ys[p], 4)) for p in ins}
    ports.update({p: Port(p, "out", round(xs[p], 4), round(ys[p], 4)) for p in outs})
    gates = {g: Gate(g, c, s, round(xs[g], 4), round(ys[g], 4)) for g, c, s in zip(gate_ids, cells, sizes)}
    nets = {}
    for src in ins + gate_ids:
        if not sinks_of[src]:
            continue
        nid = f"n_{src}"
        driver = Pin(src) if src in ins else Pin(src, "Y")
        pins = [driver] + [Pin.parse(s) for s in sinks_of[src]]
        px = [xs[p.owner] for p in pins]
        py = [ys[p.owner] for p in pins]
        hpwl = (max(px) - min(px)) + (max(py) - min(py))
        nets[nid] = Net(nid, driver, tuple(pins[1:]), float(round(spec.wire_r * hpwl, 4)), float(round(spec.wire_c * hpwl, 4)))
    graph = CircuitGraph(gates, nets, ports, 1.0, die)
    tg = sta.TimingGraph(graph, library, physical)
    delay = 1.0 - float(np.min(tg.endpoint_slacks(tg.size_vector())))
    graph = replace(graph, clock=round(spec.tightness * delay, 3))
    return GeneratedCircuit(f"c{spec.seed}_{index:03d}", emit_netlist(graph), library.to_json(), emit_parasitics(graph))


def generate_suite(spec: BenchSpec, physical: PhysicalConfig = PhysicalConfig()) -> list[GeneratedCircuit]:
    return [generate_circuit(spec, i, physical) for i in range(spec.suite_size)]


# ---------------------------------------------------------------------------
# reference sizers


@dataclass
class SizerOutcome:
    sizes: dict[str, int]
    wns: float
    tns: float
    nve: int
    score: float
    evaluated: int = 0
    runtime: float = 0.0


def _oracle_weights(mode: str, weights: TargetWeights) -> tuple[float, float]:
    if mode == "weighted":
        return weights.mu_tau, weights.mu_wns
    if mode == "tns":
        return 1.0, 0.0
    if mode == "wns":
        return 0.0, 1.0
    raise ValueError(f"unknown oracle mode {mode!r}")


def batch_metrics(tg: sta.TimingGraph, sizes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(wns, tns, nve) for a (B, n) batch of assignments in timing-graph order."""
    slacks = tg.endpoint_slacks(sizes)
    if slacks.shape[1] == 0:
        z = np.zeros(len(sizes))
        return z, z, z.astype(int)
    neg = np.minimum(slacks, 0.0)
    return slacks.min(axis=1), neg.sum(axis=1), (slacks < 0).sum(axis=1)


def exhaustive_size(graph: CircuitGraph, library: CellLibrary, weights: TargetWeights = TargetWeights(),
                    physical: PhysicalConfig = PhysicalConfig(), mode: str = "weighted",
                    budget: int = 2 ** 20, chunk: int = 1 << 16) -> SizerOutcome:
    """Score every assignment; ties go to the lexicographically smallest (by gate id) assignment."""
    started = time.perf_counter()
    tg = sta.TimingGraph(graph, library, physical)
    mt, mw = _oracle_weights(mode, weights)
    names = sorted(tg.gate_ids)
    perm = np.array([names.index(g) for g in tg.gate_ids], dtype=int)
    dims = tuple(int(tg.n_sizes[tg.index[g]]) for g in names)
    total = math.prod(dims)
    if total > budget:
        raise ValueError(f"{total} assignments exceed the exhaustive budget of {budget}")
    best = None
    for start in range(0, total, chunk):
        flat = np.arange(start, min(total, start + chunk))
        lex = np.stack(np.unravel_index(flat, dims), axis=1) if dims else np.zeros((len(flat), 0), int)
        batch = lex[:, perm]
        wns, tns, nve = batch_metrics(tg, batch)
        score = mt * np.maximum(0.0, -tns) + mw * np.maximum(0.0, -wns)
        k = int(np.argmin(score))
        if best is None or score[k] < best[0]:
            best = (float(score[k]), batch[k].copy(), float(wns[k]), float(tns[k]), int(nve[k]))
    score, sizes, wns, tns, nve = best
    return SizerOutcome(tg.assignment(sizes), wns, tns, nve, score, total, time.perf_counter() - started)


def greedy_sensitivity_size(graph: CircuitGraph, library: CellLibrary, weights: TargetWeights = TargetWeights(),
                            physical: PhysicalConfig = PhysicalConfig(), max_moves: int = 10_000) -> SizerOutcome:
    """Apply the single-gate resize with the best TNS gain per unit area until none improves TNS."""
    started = time.perf_counter()
    tg = sta.TimingGraph(graph, library, physical)
    sizes = tg.size_vector()
    area = tg.tables["a"]
    order = sorted(range(tg.n_gates), key=lambda i: tg.gate_ids[i])
    moves = [(i, s) for i in order for s in range(int(tg.n_sizes[i]))]
    _, tns0, _ = batch_metrics(tg, sizes[None, :])
    cur = float(tns0[0])
    evaluated = 1
    for _ in range(max_moves):
        if cur >= 0.0:
            break
        cand = [(i, s) for i, s in moves if s != sizes[i]]
        if not cand:
            break
        batch = np.repeat(sizes[None, :], len(cand), axis=0)
        idx = np.arange(len(cand))
        gi = np.array([i for i, _ in cand])
        si = np.array([s for _, s in cand])
        batch[idx, gi] = si
        _, tns, _ = batch_metrics(tg, batch)
        evaluated += len(cand)
        gain = tns - cur
        d_area = area[gi, si] - area[gi, sizes[gi]]
        merit = np.where(gain > 1e-9, gain / np.maximum(d_area, 1e-3), -np.inf)
        k = int(np.argmax(merit))
        if not np.isfinite(merit[k]):
            break
        sizes = batch[k]
        cur = float(tns[k])
    ann = sta.propagate(tg, sizes)
    return SizerOutcome(tg.assignment(sizes), ann.wns, ann.tns, ann.nve,
                        violation_score(ann.tns, ann.wns, weights), evaluated, time.perf_counter() - started)


def gradient_size(graph: CircuitGraph, library: CellLibrary, config: SizerConfig = SizerConfig(), surrogate=None) -> SizerOutcome:
    started = time.perf_counter()
    res = size_loop(graph, library, config, surrogate)
    m = res.final_metrics
    out = SizerOutcome(res.final, m["wns"], m["tns"], m["nve"], violation_score(m["tns"], m["wns"], config.weights),
                       res.iterations, time.perf_counter() - started)
    out.result = res
    return out


# ---------------------------------------------------------------------------
# suite


METHODS = ("initial", "greedy", "grad", "exhaustive")
RESULT_COLUMNS = ["circuit", "method", "mu_tau", "mu_wns", "wns", "tns", "nve", "score", "norm_tns_initial",
                  "norm_wns_initial", "norm_score_oracle", "iterations", "runtime_s", "error"]


@dataclass
class SuiteConfig:
    spec: BenchSpec = BenchSpec()
    methods: tuple[str, ...] = METHODS
    sizer: SizerConfig = SizerConfig()
    sweep_mu: bool = False
    sweep_values: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)
    exhaustive_budget: int = 2 ** 20
    threads: int = 1


def _norm(value: float, ref: float) -> float:
    """Ratio of violations; 0/0 counts as 1 (nothing to fix, nothing fixed)."""
    if ref == 0.0:
        return 1.0 if value == 0.0 else float("inf")
    return value / ref


def _run_circuit(circ: GeneratedCircuit, cfg: SuiteConfig) -> list[dict]:
    graph, library = circ.parse()
    phys = cfg.sizer.physical
    rows = []
    weight_sets = [(cfg.sizer.weights.mu_tau, cfg.sizer.weights.mu_wns)]
    if cfg.sweep_mu:
        weight_sets = [(mt, round(1.0 - mt, 10)) for mt in cfg.sweep_values]
    tg = sta.TimingGraph(graph, library, phys)
    init = sta.propagate(tg)
    for mt, mw in weight_sets:
        w = replace(cfg.sizer.weights, mu_tau=mt, mu_wns=mw)
        sizer = replace(cfg.sizer, weights=w)
        oracle = None
        batch_rows = []
        for method in cfg.methods:
            row = {"circuit": circ.name, "method": method, "mu_tau": mt, "mu_wns": mw, "error": ""}
            try:
                if method == "initial":
                    out = SizerOutcome(graph.assignment(), init.wns, init.tns, init.nve,
                                       violation_score(init.tns, init.wns, w))
                elif method == "greedy":
                    out = greedy_sensitivity_size(graph, library, w, phys)
                elif method == "grad":
                    out = gradient_size(graph, library, sizer)
                elif method == "exhaustive":
                    out = exhaustive_size(graph, library, w, phys, budget=cfg.exhaustive_budget)
                    oracle = out
                else:
                    raise ValueError(f"unknown method {method!r}")
                row.update(wns=out.wns, tns=out.tns, nve=out.nve, score=out.score,
                           iterations=out.evaluated, runtime_s=round(out.runtime, 4))
            except Exception as exc:  # recorded per row; the suite keeps going
                log.warning("%s/%s failed: %s", circ.name, method, exc)
                row.update(wns=float("nan"), tns=float("nan"), nve=-1, score=float("nan"), iterations=0,
                           runtime_s=0.0, error=str(exc))
            batch_rows.append(row)
        for row in batch_rows:
            row["norm_tns_initial"] = _norm(row["tns"], init.tns)
            row["norm_wns_initial"] = _norm(min(row["wns"], 0.0), min(init.wns, 0.0))
            row["norm_score_oracle"] = _norm(oracle.score, row["score"]) if oracle is not None else float("nan")
        rows.extend(batch_rows)
    return rows


def run_suite(cfg: SuiteConfig, circuits: Sequence[GeneratedCircuit] | None = None) -> list[dict]:
    """Rows for every circuit x method (x mu setting), in circuit order."""
    circuits = list(circuits) if circuits is not None else generate_suite(cfg.spec, cfg.sizer.physical)
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            chunks = list(pool.map(lambda c: _run_circuit(c, cfg), circuits))
    else:
        chunks = [_run_circuit(c, cfg) for c in circuits]
    return [row for chunk in chunks for row in chunk]


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _cell(row.get(k, "")) for k in RESULT_COLUMNS})
    return buf.getvalue()


def _cell(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def summarize(rows: Sequence[dict]) -> list[dict]:
    """Mean metrics per (method, mu) over circuits without errors."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if not r["error"]:
            groups.setdefault((r["method"], r["mu_tau"], r["mu_wns"]), []).append(r)
    out = []
    for (method, mt, mw), rs in groups.items():
        out.append({"method": method, "mu_tau": mt, "mu_wns": mw, "n": len(rs),
                    "wns": float(np.mean([r["wns"] for r in rs])), "tns": float(np.mean([r["tns"] for r in rs])),
                    "nve": float(np.mean([r["nve"] for r in rs])),
                    "norm_tns_initial": float(np.mean([r["norm_tns_initial"] for r in rs])),
                    "norm_wns_initial": float(np.mean([r["norm_wns_initial"] for r in rs])),
                    "norm_score_oracle": float(np.mean([r["norm_score_oracle"] for r in rs]))})
    return out


def rows_to_markdown(rows: Sequence[dict]) -> str:
    summary = summarize(rows)
    cols = ["method", "mu_tau", "mu_wns", "n", "wns", "tns", "nve", "norm_tns_initial", "norm_wns_initial",
            "norm_score_oracle"]
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in summary:
        lines.append("| " + " | ".join(str(_cell(r[c])) for c in cols) + " |")
    return "\n".join(lines) + "\n"


def write_suite(rows: Sequence[dict], directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [directory / "results.csv", directory / "summary.md"]
    paths[0].write_text(rows_to_csv(rows))
    paths[1].write_text(rows_to_markdown(rows))
    return paths


def spec_to_json(spec: BenchSpec) -> str:
    return json.dumps(asdict(spec), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# hand-built congested fixture: U1 shares a crowded grid cell with two fillers,
# so upsizing it (area 1 -> 4) pushes the cell over the density threshold and
# slows every net touching the cell. Without the penalty the upsize pays off.

CONGESTED_LIB = '{"INV": [{"p": 10, "r": 2.0, "q": 2, "a": 1.0}, {"p": 8, "r": 1.0, "q": 4, "a": 4.0}]}'
CONGESTED_CKT = """\
clock 40.0
die 0.0 0.0 8.0 8.0
port_in in 0.0 1.0
port_in in2 0.0 0.4
port_out out 8.0 1.0
port_out out2 0.0 1.8
port_out out3 2.0 0.0
gate U1 INV 0 1.0 1.0
gate U2 INV 0 7.0 1.0
gate F1 INV 0 0.5 1.5
gate F2 INV 0 1.5 0.5
net n1 in U1/A
net n2 U1/Y U2/A
net n3 U2/Y out
net f0 in2 F1/A F2/A
net f1 F1/Y out2
net f2 F2/Y out3
"""
CONGESTED_SPF = """\
net n1 R=3.0 C=4.0
net n2 R=2.0 C=10.0
net f0 R=0.1 C=0.5
net f1 R=0.1 C=0.5
net f2 R=0.1 C=0.5
"""


def congested_fixture() -> tuple[CircuitGraph, CellLibrary]:
    return parse_circuit(CONGESTED_CKT, CONGESTED_LIB, CONGESTED_SPF)
