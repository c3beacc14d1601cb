import math

import numpy as np
import pytest

from sizegrad import ad, layout
from sizegrad.model import parse_circuit

LIB = '{"INV": [{"p": 10, "r": 2.0, "q": 2, "a": 1.0}, {"p": 8, "r": 1.0, "q": 4, "a": 2.0}]}'


def _design(gates, nets="", die="die 0 0 4 4"):
    lines = ["clock 100", die, "port_in in", "port_out out"]
    lines += [f"gate {g} INV 0 {x} {y}" for g, x, y in gates]
    chain = [g for g, _, _ in gates]
    lines.append(f"net n0 in {chain[0]}/A")
    for a, b in zip(chain, chain[1:]):
        lines.append(f"net n_{a} {a}/Y {b}/A")
    lines.append(f"net nz {chain[-1]}/Y out")
    return parse_circuit("\n".join(lines) + "\n", LIB, nets)


def test_single_gate_density():
    graph, lib = _design([("U1", 2.0, 2.0)])
    grids = layout.build_grids(graph, lib, scales=(1,))
    assert grids.grids[1].density == pytest.approx(np.array([[1.0 / 16.0]]))


def test_two_gates_same_cell():
    one, lib = _design([("U1", 1.0, 1.0)])
    two, _ = _design([("U1", 1.0, 1.0), ("U2", 1.0, 1.0)])
    d1 = layout.build_grids(one, lib, scales=(2,)).grids[2].density
    d2 = layout.build_grids(two, lib, scales=(2,)).grids[2].density
    assert d2[0, 0] == pytest.approx(2 * d1[0, 0])
    assert np.count_nonzero(d2) == 1


def test_zero_span_net_congestion():
    graph, lib = _design([("U1", 0.5, 0.5), ("U2", 0.6, 0.6)])
    g = layout.build_grids(graph, lib, scales=(4,)).grids[4]
    # every net is local to cell (0, 0) except the port nets, which have no coordinates
    for ch in (g.h_congestion, g.v_congestion):
        mask = np.ones_like(ch, dtype=bool)
        mask[0, 0] = False
        assert np.all(ch[mask] == 0)


def test_upsample_constant_and_single():
    assert np.allclose(layout.upsample_bilinear(np.full((2, 2), 0.3), 8), 0.3)
    assert np.allclose(layout.upsample_bilinear(np.array([[0.7]]), 16), 0.7)


def test_upsample_ramp():
    out = layout.upsample_bilinear(np.array([[0.0, 1.0], [0.0, 1.0]]), 4)
    ramp = out[0]
    assert ramp[0] == 0.0 and ramp[-1] == 1.0
    assert np.all(np.diff(ramp) > 0)
    for row in out:
        assert np.allclose(row, ramp)


def test_upsample_channels_match_per_channel():
    rng = np.random.default_rng(0)
    g = rng.random((2, 2, 3))
    out = layout.upsample_bilinear(g, 8)
    for c in range(3):
        assert np.allclose(out[..., c], layout.upsample_bilinear(g[..., c], 8))


def test_attention_softmax():
    eq = layout.attention_from_logits(np.zeros((2, 2, 3)))
    assert np.allclose(eq, 1.0 / 3.0)
    assert np.allclose(layout.attention_from_logits(np.zeros((2, 2, 1))), 1.0)
    w = layout.attention_from_logits(np.array([0.0, math.log(3.0)]))
    assert w == pytest.approx([0.25, 0.75])


def test_scale_attention_normalised():
    rng = np.random.default_rng(1)
    grids = [rng.random((4, 4, 3)) for _ in range(3)]
    psi = layout.init_psi(3, 3, seed=2)
    att = layout.scale_attention(grids, psi)
    assert att.shape == (4, 4, 3)
    assert np.allclose(att.sum(axis=-1), 1.0)


def test_aggregate_scales():
    grid = np.random.default_rng(3).random((4, 4, 3))
    uniform = np.full((4, 4, 3), 1.0 / 3.0)
    assert np.allclose(layout.aggregate_scales([grid, grid, grid], uniform), grid)
    others = [np.zeros_like(grid), grid + 1, np.ones_like(grid)]
    one_hot = np.zeros((4, 4, 3))
    one_hot[..., 1] = 1.0
    assert np.allclose(layout.aggregate_scales(others, one_hot), grid + 1)


def test_gate_feature_two_cells():
    fmap = np.zeros((2, 2, 1))
    fmap[0, 0, 0], fmap[0, 1, 0] = 0.2, 0.4
    # footprint of area 1 centred on the vertical cell boundary of a 4x4 die
    mask = layout.gate_mask(layout.footprint(2.0, 1.0, 1.0), (0, 0, 4, 4), 2)
    assert float(layout.gate_feature(mask, fmap)[0]) == pytest.approx(0.3)


def test_penalty_formula():
    assert layout.penalty_multiplier(0.0, 0.5) == 1.0
    assert layout.penalty_multiplier(0.0, 1.0) == pytest.approx(1.2)


def test_resize_penalty_grows_with_area():
    graph, lib = _design([("U1", 0.5, 0.5), ("U2", 0.6, 0.6), ("U3", 0.7, 0.7)], die="die 0 0 2 2")
    cfg = layout.PhysicalConfig(alpha=0.0)
    small = layout.resize_penalty(graph, lib, "U2", 0, cfg)
    big = layout.resize_penalty(graph, lib, "U2", 1, cfg)
    assert set(small) == {"n_U1", "n_U2"}
    assert all(big[k] >= small[k] for k in small)
    assert big["n_U2"] > small["n_U2"]


def test_penalty_tape_gradient():
    graph, lib = _design([("U1", 0.5, 0.5), ("U2", 0.6, 0.6)], die="die 0 0 2 2")
    pm = layout.PenaltyModel(graph, lib, layout.PhysicalConfig(alpha=0.0))
    tape = ad.Tape()
    areas = [tape.var(np.array(1.0)), tape.var(np.array(1.0))]
    mults = pm.net_multipliers(areas)
    total = mults[0] + mults[1]
    tape.backward(total)
    assert all(a.grad > 0 for a in areas)
