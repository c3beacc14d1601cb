"""Analytical surrogate: the golden delay model evaluated on the tape.

Sizes enter as continuous coordinates; every library quantity is the
piecewise-linear interpolant of its size table, so at integer coordinates the
numbers are the golden STA's numbers exactly and in between they are smooth.
Gate-wise TNS/WNS are then taken over each gate's extracted path group.
"""
from __future__ import annotations

from typing import Sequence

from .. import ad
from ..model import TimingPath
from ..sta import TimingGraph, path_delay


class AnalyticSurrogate:
    mode = "analytical"

    def __init__(self, tg: TimingGraph):
        self.tg = tg
        self._tables = [
            {key: tg.tables[key][i, :tg.n_sizes[i]] for key in ("p", "r", "q", "a")}
            for i in range(tg.n_gates)
        ]

    def element_delays(self, sizes: Sequence):
        """Wire and gate delays with every library value interpolated at ``sizes``."""
        p, r, q, a = [], [], [], []
        for i, g in enumerate(sizes):
            t = self._tables[i]
            p.append(ad.interp(t["p"], g))
            r.append(ad.interp(t["r"], g))
            q.append(ad.interp(t["q"], g))
            a.append(ad.interp(t["a"], g))
        wire, gate, _ = self.tg.element_delays(p, r, q, a)
        return wire, gate

    def path_slacks(self, sizes: Sequence, paths: Sequence[TimingPath]) -> dict[int, object]:
        wire, gate = self.element_delays(sizes)
        return {p.id: self.tg.clock - path_delay(self.tg, p.elements, wire, gate) for p in paths}

    def predict(self, sizes: Sequence, paths: Sequence[TimingPath], group: dict[str, list[int]]):
        """Gate-wise (tau, omega) for every gate with a non-empty path group.

        ``sizes`` holds one scalar per gate in timing-graph order (floats or
        tape variables); the summation order matches :func:`sta.gatewise_metrics`
        so integer sizes reproduce the golden values bit-for-bit.
        """
        slack = self.path_slacks(sizes, paths)
        tau, omega = {}, {}
        for gid, ids in group.items():
            if not ids:
                continue
            tot = 0.0
            for pid in ids:
                tot = tot + ad.min0(slack[pid])
            tau[gid] = tot
            omega[gid] = ad.minimum([slack[pid] for pid in ids])
        return tau, omega
