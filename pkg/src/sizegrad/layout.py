"""Multi-scale physical feature grids and the resize-induced wire penalty.

Grids are indexed ``[row, col]`` with row 0 at the bottom of the die. Every
scale of one :class:`LayoutGrids` covers the same die box.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import ad
from .model import CellLibrary, CircuitGraph

DEFAULT_SCALES = (1, 2, 4, 8, 16, 32, 64)
CHANNELS = ("gate_density", "h_congestion", "v_congestion")


@dataclass(frozen=True)
class PhysicalConfig:
    enabled: bool = True
    alpha: float = 0.5  # congestion weight
    beta: float = 1.0  # overfill weight
    d0: float = 0.8  # density threshold
    scale: int = 4  # grid resolution used for the penalty
    pitch: float = 1.0  # um of routing track spacing; sets congestion capacity


@dataclass
class FeatureGrid:
    scale: int
    density: np.ndarray
    h_congestion: np.ndarray
    v_congestion: np.ndarray
    cell_w: float
    cell_h: float

    def channels(self) -> np.ndarray:
        """(M, M, 3) stack in CHANNELS order."""
        return np.stack([self.density, self.h_congestion, self.v_congestion], axis=-1)


@dataclass
class LayoutGrids:
    die: tuple[float, float, float, float]
    grids: dict[int, FeatureGrid] = field(default_factory=dict)

    @property
    def scales(self) -> list[int]:
        return sorted(self.grids)

    @property
    def main_scale(self) -> int:
        return max(self.grids)


def _is_pow2(m: int) -> bool:
    return m >= 1 and (m & (m - 1)) == 0


def footprint(x: float, y: float, area: float) -> tuple[float, float, float, float]:
    """Square footprint of the given area centred on the placement point."""
    half = 0.5 * math.sqrt(area)
    return (x - half, y - half, x + half, y + half)


def _axis_overlap(lo: float, hi: float, edges: np.ndarray) -> np.ndarray:
    return np.clip(np.minimum(hi, edges[1:]) - np.maximum(lo, edges[:-1]), 0.0, None)


def _edges(die, m):
    x0, y0, x1, y1 = die
    return np.linspace(x0, x1, m + 1), np.linspace(y0, y1, m + 1)


def overlap_weights(box, die, m: int) -> np.ndarray:
    """(m, m) overlap area of ``box`` with every grid cell."""
    xe, ye = _edges(die, m)
    ox = _axis_overlap(box[0], box[2], xe)
    oy = _axis_overlap(box[1], box[3], ye)
    return np.outer(oy, ox)


def _check_inside(graph: CircuitGraph, die):
    x0, y0, x1, y1 = die
    for g in graph.gates.values():
        if not (x0 <= g.x <= x1 and y0 <= g.y <= y1):
            raise ValueError(f"gate {g.id} at ({g.x}, {g.y}) lies outside the die box {die}")


def net_boxes(graph: CircuitGraph) -> dict[str, tuple[float, float, float, float]]:
    """Bounding box of the located pins of each net."""
    boxes = {}
    for net in graph.nets.values():
        pts = []
        for pin in (net.driver,) + net.sinks:
            if pin.owner in graph.gates:
                g = graph.gates[pin.owner]
                pts.append((g.x, g.y))
            else:
                p = graph.ports[pin.owner]
                if p.x is not None:
                    pts.append((p.x, p.y))
        if len(pts) >= 2:
            xs, ys = zip(*pts)
            boxes[net.id] = (min(xs), min(ys), max(xs), max(ys))
    return boxes


def _congestion(graph: CircuitGraph, die, m: int, pitch: float):
    """RUDY-style horizontal/vertical demand normalised by track capacity."""
    x0, y0, x1, y1 = die
    cell_w, cell_h = (x1 - x0) / m, (y1 - y0) / m
    # degenerate boxes are thickened to a sliver of the finest useful width
    sliver = 1e-3 * min(cell_w, cell_h)
    h = np.zeros((m, m))
    v = np.zeros((m, m))
    for bx0, by0, bx1, by1 in net_boxes(graph).values():
        w, hgt = bx1 - bx0, by1 - by0
        if w == 0 and hgt == 0:
            continue
        if w == 0:
            bx0, bx1 = bx0 - sliver / 2, bx1 + sliver / 2
        if hgt == 0:
            by0, by1 = by0 - sliver / 2, by1 + sliver / 2
        box_area = (bx1 - bx0) * (by1 - by0)
        ov = overlap_weights((bx0, by0, bx1, by1), die, m) / box_area
        h += w * ov
        v += hgt * ov
    capacity = cell_w * cell_h / pitch
    return h / capacity, v / capacity


def build_grids(graph: CircuitGraph, library: CellLibrary, sizes: Mapping[str, int] | None = None,
                scales: Sequence[int] = DEFAULT_SCALES, pitch: float = 1.0) -> LayoutGrids:
    scales = sorted(scales)
    if not scales or not all(_is_pow2(s) for s in scales):
        raise ValueError(f"scales must be powers of two, got {scales}")
    die = graph.die_box(library)
    _check_inside(graph, die)
    sizes = sizes or graph.assignment()
    die_area = (die[2] - die[0]) * (die[3] - die[1])
    out = LayoutGrids(die)
    for m in scales:
        cell_area = die_area / (m * m)
        dens = np.zeros((m, m))
        for g in graph.gates.values():
            area = library.variant(g.cell, sizes[g.id]).area
            dens += overlap_weights(footprint(g.x, g.y, area), die, m)
        dens /= cell_area
        hc, vc = _congestion(graph, die, m, pitch)
        out.grids[m] = FeatureGrid(m, dens, hc, vc, (die[2] - die[0]) / m, (die[3] - die[1]) / m)
    return out


# ---------------------------------------------------------------------------
# interpolation and fusion


def upsample_matrix(source: int, target: int) -> np.ndarray:
    """(target, source) corner-aligned bilinear interpolation weights along one axis."""
    if target < source:
        raise ValueError(f"cannot upsample {source} to smaller {target}")
    u = np.zeros((target, source))
    if source == 1:
        u[:, 0] = 1.0
        return u
    pos = np.arange(target) * (source - 1) / (target - 1) if target > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), source - 2)
    frac = pos - lo
    u[np.arange(target), lo] = 1.0 - frac
    u[np.arange(target), lo + 1] += frac
    return u


def upsample_bilinear(grid, target: int):
    """Upsample an (M, M) or (M, M, C) grid to (target, target[, C])."""
    m = np.shape(ad.value(grid))[0]
    if not (_is_pow2(m) and _is_pow2(target)):
        raise ValueError("grid sizes must be powers of two")
    u = upsample_matrix(m, target)
    if m == target:
        return grid
    if np.ndim(ad.value(grid)) == 2:
        return ad.matmul(ad.matmul(u, grid), u.T)
    c = np.shape(ad.value(grid))[2]
    # (M, M, C): interpolate rows, then columns
    rows = ad.reshape(ad.matmul(u, ad.reshape(grid, (m, -1))), (target, m, c))
    cols = ad.matmul(u, ad.reshape(ad.swapaxes(rows, 0, 1), (m, -1)))
    return ad.swapaxes(ad.reshape(cols, (target, target, c)), 0, 1)


def _im2col_index(m: int, k: int) -> np.ndarray:
    """(m*m, k*k) indices into a flattened grid; out-of-range taps point at row m*m (zeros)."""
    pad = k // 2
    rows, cols = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    taps = []
    for dy in range(-pad, k - pad):
        for dx in range(-pad, k - pad):
            r, c = rows + dy, cols + dx
            ok = (r >= 0) & (r < m) & (c >= 0) & (c < m)
            taps.append(np.where(ok, r * m + c, m * m))
    return np.stack(taps, axis=-1).reshape(m * m, k * k)


def conv2d(x, weight, bias):
    """'Same' zero-padded convolution of an (M, M, Cin) grid with (k, k, Cin, Cout) weights."""
    m, _, cin = np.shape(ad.value(x))
    k = np.shape(ad.value(weight))[0]
    flat = ad.concat([ad.reshape(x, (m * m, cin)), np.zeros((1, cin))], axis=0)
    patches = ad.take(flat, _im2col_index(m, k), axis=0)  # (m*m, k*k, cin)
    cols = ad.reshape(patches, (m * m, k * k * cin))
    out = ad.matmul(cols, ad.reshape(weight, (k * k * cin, -1))) + bias
    return ad.reshape(out, (m, m, np.shape(ad.value(out))[-1]))


def init_psi(n_scales: int, channels: int, hidden: int = 8, seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded parameters of the two-layer convolution stack producing scale logits."""
    rng = np.random.default_rng(seed)
    cin = n_scales * channels
    return {
        "psi_w1": rng.normal(0.0, 1.0 / math.sqrt(9 * cin), (3, 3, cin, hidden)),
        "psi_b1": np.zeros(hidden),
        "psi_w2": rng.normal(0.0, 1.0 / math.sqrt(hidden), (1, 1, hidden, n_scales)),
        "psi_b2": np.zeros(n_scales),
    }


def attention_from_logits(logits):
    """Softmax over the trailing scale axis."""
    return ad.softmax(logits, axis=-1)


def scale_attention(upsampled: Sequence, psi: Mapping):
    """Per-cell attention over scales from main-scale encoded grids.

    ``upsampled`` holds one (M, M, C) array per scale, already at the main scale.
    Returns an (M, M, S) array whose last axis sums to one.
    """
    if len(upsampled) < 1:
        raise ValueError("need at least one scale")
    stacked = ad.concat(list(upsampled), axis=-1)
    hidden = ad.relu(conv2d(stacked, psi["psi_w1"], psi["psi_b1"]))
    logits = conv2d(hidden, psi["psi_w2"], psi["psi_b2"])
    return attention_from_logits(logits)


def aggregate_scales(upsampled: Sequence, attention):
    """Attention-weighted sum of the per-scale (M, M, C) grids."""
    total = None
    for s, grid in enumerate(upsampled):
        a = attention[:, :, s:s + 1]
        term = grid * a if isinstance(grid, ad.Var) else a * grid
        total = term if total is None else total + term
    return total


def gate_mask(box, die, m: int) -> np.ndarray:
    """Normalised overlap weights of a gate footprint on the main grid."""
    w = overlap_weights(box, die, m)
    s = w.sum()
    if s <= 0:
        raise ValueError("gate footprint does not overlap the grid")
    return w / s


def gate_feature(mask: np.ndarray, feature_map):
    """h_v: mask-weighted mean of an (M, M, C) map."""
    m = mask.shape[0]
    return ad.matmul(mask.reshape(m * m), ad.reshape(feature_map, (m * m, -1)))


# ---------------------------------------------------------------------------
# penalty


def penalty_multiplier(congestion, density, cfg: PhysicalConfig = PhysicalConfig()):
    """Wire-delay multiplier of one grid cell."""
    return 1.0 + cfg.alpha * congestion + cfg.beta * ad.relu(density - cfg.d0)


class PenaltyModel:
    """Per-net wire-delay multipliers driven by local density and congestion.

    Gates are binned by placement point into cells at ``cfg.scale``; a net's
    multiplier is one plus the mean cell penalty over the cells of the gates
    it touches. Congestion depends on placement only; density follows the
    current gate areas, so it is the part that reacts to resizing.
    """

    def __init__(self, graph: CircuitGraph, library: CellLibrary, cfg: PhysicalConfig = PhysicalConfig(),
                 gate_order: Sequence[str] | None = None):
        self.cfg = cfg
        self.gate_order = list(gate_order or graph.gates)
        die = graph.die_box(library)
        self.die = die
        m = cfg.scale
        x0, y0, x1, y1 = die
        self.cell_area = (x1 - x0) * (y1 - y0) / (m * m)
        index = {g: i for i, g in enumerate(self.gate_order)}
        cells = []
        for gid in self.gate_order:
            g = graph.gates[gid]
            cx = min(int((g.x - x0) / (x1 - x0) * m), m - 1)
            cy = min(int((g.y - y0) / (y1 - y0) * m), m - 1)
            cells.append(cy * m + cx)
        self.gate_cell = cells
        self.cell_members: dict[int, list[int]] = {}
        for i, c in enumerate(cells):
            self.cell_members.setdefault(c, []).append(i)
        if cfg.enabled:
            hc, vc = _congestion(graph, die, m, cfg.pitch)
            self.cell_cong = (0.5 * (hc + vc)).ravel()
        else:
            self.cell_cong = np.zeros(m * m)
        self.net_ids = list(graph.nets)
        self.net_gates: list[list[int]] = []
        for net in graph.nets.values():
            touched = [index[p.owner] for p in (net.driver,) + net.sinks if p.owner in index]
            self.net_gates.append(touched)

    def cell_penalties(self, areas: Sequence) -> dict:
        """Penalty term per occupied cell, generic over floats/arrays/Vars."""
        out = {}
        for c, members in self.cell_members.items():
            total = 0.0
            for i in members:
                total = total + areas[i]
            dens = total / self.cell_area
            out[c] = self.cfg.alpha * self.cell_cong[c] + self.cfg.beta * ad.relu(dens - self.cfg.d0)
        return out

    def net_multipliers(self, areas: Sequence) -> list:
        if not self.cfg.enabled:
            return [1.0] * len(self.net_ids)
        pens = self.cell_penalties(areas)
        mults = []
        for touched in self.net_gates:
            if not touched:
                mults.append(1.0)
                continue
            acc = 0.0
            for i in touched:
                acc = acc + pens[self.gate_cell[i]]
            mults.append(1.0 + acc * (1.0 / len(touched)))
        return mults

    def cell_density(self, areas: Sequence) -> np.ndarray:
        m = self.cfg.scale
        dens = np.zeros(m * m)
        for i, a in enumerate(areas):
            dens[self.gate_cell[i]] += ad.value(a)
        return (dens / self.cell_area).reshape(m, m)


def resize_penalty(graph: CircuitGraph, library: CellLibrary, gate: str, new_size: int,
                   cfg: PhysicalConfig = PhysicalConfig(), sizes: Mapping[str, int] | None = None) -> dict[str, float]:
    """Multipliers of the nets incident to ``gate`` after resizing it to ``new_size``."""
    cell = graph.gates[gate].cell
    if not 0 <= new_size < library.n_sizes(cell):
        raise ValueError(f"size {new_size} out of range for {cell}")
    sizes = dict(sizes or graph.assignment())
    sizes[gate] = new_size
    pm = PenaltyModel(graph, library, cfg)
    areas = [library.variant(graph.gates[g].cell, sizes[g]).area for g in pm.gate_order]
    mults = pm.net_multipliers(areas)
    incident = {n.id for n in graph.nets.values()
                if n.driver.owner == gate or any(s.owner == gate for s in n.sinks)}
    return {nid: float(m) for nid, m in zip(pm.net_ids, mults) if nid in incident}


def dump_grids_csv(grids: LayoutGrids, directory) -> list[str]:
    """Write one CSV per channel per scale; returns the file names."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for m, grid in sorted(grids.grids.items()):
        for ch, arr in zip(CHANNELS, (grid.density, grid.h_congestion, grid.v_congestion)):
            name = f"{ch}_{m}x{m}.csv"
            np.savetxt(directory / name, arr, delimiter=",", fmt="%.6g")
            names.append(name)
    return names
