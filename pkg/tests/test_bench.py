import itertools

import numpy as np
import pytest

from sizegrad import bench, sta
from sizegrad.layout import PhysicalConfig
from sizegrad.model import parse_circuit

from test_optimizer import SINGLE, SINGLE_SPF

LIB3 = ('{"INV": [{"p": 10, "r": 2.0, "q": 2, "a": 1}, {"p": 9, "r": 1.0, "q": 4, "a": 2},'
        ' {"p": 8, "r": 0.5, "q": 8, "a": 4}]}')


def test_generation_deterministic(tmp_path):
    spec = bench.BenchSpec(seed=12, n_gates=(5, 15), suite_size=4)
    a = bench.generate_suite(spec)
    b = bench.generate_suite(spec)
    assert a == b
    for c in a:
        c.write(tmp_path / "a")
    for c in b:
        c.write(tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    assert bench.generate_suite(bench.BenchSpec(seed=13, n_gates=(5, 15), suite_size=4)) != a


@pytest.mark.parametrize("seed", range(5))
def test_tightness(seed):
    for tight, violated in ((0.8, True), (1.5, False)):
        spec = bench.BenchSpec(seed=seed, tightness=tight)
        graph, lib = bench.generate_circuit(spec, 0).parse()
        ann = sta.propagate(sta.TimingGraph(graph, lib, PhysicalConfig()))
        if violated:
            assert ann.wns < 0
        else:
            assert ann.nve == 0


def test_library_ladder():
    lib = bench.make_library(("INV", "NAND2"), 4)
    assert lib.n_sizes("INV") == 4
    r = lib.column("NAND2", "drive_resistance")
    assert all(b < a for a, b in zip(r, r[1:]))


def test_spec_validation():
    with pytest.raises(ValueError):
        bench.BenchSpec(n_gates=(5, 3))
    with pytest.raises(ValueError):
        bench.BenchSpec(cells=("XOR9",))
    spec = bench.BenchSpec.from_dict({"n_gates": 6, "cells": ["INV"]})
    assert spec.n_gates == (6, 6) and spec.cells == ("INV",)


def test_exhaustive_one_gate_three_sizes():
    ckt = SINGLE.replace("clock 40", "clock 30")
    graph, lib = parse_circuit(ckt, LIB3, SINGLE_SPF)
    out = bench.exhaustive_size(graph, lib, physical=PhysicalConfig(enabled=False), mode="tns")
    assert out.evaluated == 3
    # delays 50, 29, 18 ps against a 30 ps clock
    assert out.sizes == {"U": 1}
    assert out.tns == 0.0


def test_exhaustive_closed_picks_smallest(chain):
    graph, lib = chain(500.0)
    out = bench.exhaustive_size(graph, lib, physical=PhysicalConfig(enabled=False))
    assert out.score == 0.0
    assert out.sizes == {"U1": 0, "U2": 0}


def test_exhaustive_is_minimum():
    spec = bench.BenchSpec(seed=1, n_gates=(8, 8))
    graph, lib = bench.generate_circuit(spec, 0).parse()
    out = bench.exhaustive_size(graph, lib, mode="tns")
    assert out.evaluated == 4 ** 8
    tg = sta.TimingGraph(graph, lib, PhysicalConfig())
    rng = np.random.default_rng(0)
    sample = rng.integers(0, 4, (2000, tg.n_gates))
    _, tns, _ = bench.batch_metrics(tg, sample)
    assert out.tns >= tns.max() - 1e-9
    assert sta.propagate(tg, out.sizes).tns == pytest.approx(out.tns)


def test_exhaustive_budget():
    spec = bench.BenchSpec(seed=1, n_gates=(8, 8))
    graph, lib = bench.generate_circuit(spec, 0).parse()
    with pytest.raises(ValueError, match="budget"):
        bench.exhaustive_size(graph, lib, budget=1000)


def test_exhaustive_matches_bruteforce_small():
    spec = bench.BenchSpec(seed=2, n_gates=(4, 4), sizes_per_cell=3)
    graph, lib = bench.generate_circuit(spec, 0).parse()
    tg = sta.TimingGraph(graph, lib, PhysicalConfig())
    names = sorted(tg.gate_ids)
    best = None
    for combo in itertools.product(range(3), repeat=4):
        a = dict(zip(names, combo))
        ann = sta.propagate(tg, a)
        s = 0.5 * max(0.0, -ann.tns) + 0.5 * max(0.0, -ann.wns)
        if best is None or s < best[0] - 1e-12:
            best = (s, a)
    out = bench.exhaustive_size(graph, lib)
    assert out.score == pytest.approx(best[0])
    assert out.sizes == best[1]


def test_greedy_single_gate():
    graph, lib = parse_circuit(SINGLE, LIB3, SINGLE_SPF)
    out = bench.greedy_sensitivity_size(graph, lib, physical=PhysicalConfig(enabled=False))
    assert out.tns == 0.0
    assert out.sizes["U"] in (1, 2)


def test_greedy_fixed_point(chain):
    graph, lib = chain(500.0)
    out = bench.greedy_sensitivity_size(graph, lib)
    assert out.sizes == graph.assignment()


@pytest.mark.parametrize("seed", range(3))
def test_greedy_not_better_than_oracle(seed):
    spec = bench.BenchSpec(seed=seed, n_gates=(6, 6))
    graph, lib = bench.generate_circuit(spec, 0).parse()
    greedy = bench.greedy_sensitivity_size(graph, lib)
    oracle = bench.exhaustive_size(graph, lib, mode="tns")
    assert greedy.tns <= oracle.tns + 1e-9


def test_congested_fixture_parses():
    graph, lib = bench.congested_fixture()
    assert "U1" in graph.gates and graph.die is not None


def test_suite_rows(tmp_path):
    cfg = bench.SuiteConfig(spec=bench.BenchSpec(seed=0, n_gates=(5, 5), suite_size=2),
                            sizer=bench.SizerConfig(max_iters=30))
    rows = bench.run_suite(cfg)
    assert len(rows) == 2 * len(bench.METHODS)
    assert all(r["error"] == "" for r in rows)
    for r in rows:
        if r["method"] == "exhaustive":
            assert r["norm_score_oracle"] == 1.0
    paths = bench.write_suite(rows, tmp_path)
    header = paths[0].read_text().splitlines()[0]
    assert header.split(",") == bench.RESULT_COLUMNS
    assert "| method |" in paths[1].read_text()
