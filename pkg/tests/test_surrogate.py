import numpy as np
import pytest

from sizegrad import ad, bench, sta
from sizegrad.layout import PhysicalConfig
from sizegrad.model import parse_circuit
from sizegrad.surrogate import (AnalyticSurrogate, ModelConfig, SurrogateModel, aggregate_timing, loss,
                                make_gradient_labels, train)
from sizegrad.surrogate.learned import attach_labels, build_path_batch

from test_sta import FANOUT_CKT, FANOUT_LIB

SMALL = ModelConfig(width=8, enc_out=4, head_hidden=8)


def _circuit(seed=0, n=8, tightness=0.8):
    spec = bench.BenchSpec(seed=seed, n_gates=(n, n), tightness=tightness)
    graph, lib = bench.generate_circuit(spec, 0).parse()
    return sta.TimingGraph(graph, lib, PhysicalConfig()), lib


# -- analytical mode -----------------------------------------------------------

def test_analytic_chain(chain):
    graph, lib = chain(50.0)
    tg = sta.TimingGraph(graph, lib)
    ann = sta.analyze(tg)
    tau, omega = AnalyticSurrogate(tg).predict([0.0, 1.0], ann.paths, ann.gatewise.group)
    assert omega["U1"] == -14.0 and omega["U2"] == -14.0
    assert tau["U1"] == -14.0


@pytest.mark.parametrize("seed", range(6))
def test_analytic_bit_exact(seed):
    tg, _ = _circuit(seed, n=10, tightness=0.7)
    rng = np.random.default_rng(seed)
    sizes = rng.integers(0, tg.n_sizes)
    ann = sta.analyze(tg, sizes)
    tau, omega = AnalyticSurrogate(tg).predict([float(s) for s in sizes], ann.paths, ann.gatewise.group)
    for g in tau:
        assert tau[g] == ann.gatewise.tot[g]
        assert omega[g] == ann.gatewise.wst[g]


# -- aggregation ----------------------------------------------------------------

def test_aggregate_example():
    enc = {0: np.array([[1.0, 2.0], [3.0, 4.0]]), 1: np.array([[5.0, 6.0]])}
    t = aggregate_timing("v", enc, {0: ["v", "w"], 1: ["v"]}, 0, [0, 1])
    assert list(t) == [1, 2, 4, 6, 3, 4]


def test_aggregate_singleton_and_empty():
    e = np.array([[0.5, -1.0]])
    t = aggregate_timing("v", {0: e}, {0: ["v"]}, 0, [0])
    assert np.array_equal(t, np.concatenate([e[0]] * 3))
    assert np.array_equal(aggregate_timing("x", {0: e}, {0: ["v"]}, 0, []), np.zeros(6))


def test_pooling_matrices_match_reference():
    tg, lib = _circuit(1, n=10, tightness=0.6)
    model = SurrogateModel(lib.cell_names, SMALL, seed=1)
    ann = sta.analyze(tg)
    sample = model.make_sample(tg, tg.size_vector(), ann)
    bt = sample.batch
    feats = np.concatenate([(sample.sizes * sample.inv_span)[:, None], sample.static], axis=1)
    feats = np.vstack([feats, np.zeros((1, feats.shape[1]))])
    enc = model.encode_paths(model.params, feats[bt.gate_index][None], bt.key_mask)[0]
    flat = enc.reshape(-1, SMALL.enc_out)
    by_id = {p.id: k for k, p in enumerate(ann.paths)}
    per_path = {p.id: enc[by_id[p.id], :len(p.gates)] for p in ann.paths}
    gates = {p.id: p.gates for p in ann.paths}
    for r, gid in enumerate(bt.gates):
        want = aggregate_timing(gid, per_path, gates, ann.gatewise.critical[gid], ann.gatewise.group[gid])
        got = np.concatenate([bt.critical[r] @ flat, bt.intra[r] @ flat, bt.inter[r] @ flat])
        assert np.allclose(got, want)


# -- encoder and heads ------------------------------------------------------------

def test_zero_output_projection():
    tg, lib = _circuit(2)
    model = SurrogateModel(lib.cell_names, SMALL)
    model.params["w_out"][:] = 0.0
    model.params["b_out"][:] = 0.0
    ann = sta.analyze(tg)
    s = model.make_sample(tg, tg.size_vector(), ann)
    x = np.random.default_rng(0).normal(size=s.batch.gate_index.shape + (model.n_features,))
    assert not np.any(model.encode_paths(model.params, x[None], s.batch.key_mask))


def test_paths_encoded_independently():
    tg, lib = _circuit(3)
    model = SurrogateModel(lib.cell_names, SMALL, seed=3)
    mask = np.array([[True, False, False], [True, True, True]])
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 2, 3, model.n_features))
    a = model.encode_paths(model.params, x, mask)
    x2 = x.copy()
    x2[0, 1] = rng.normal(size=(3, model.n_features))  # other path
    x2[0, 0, 1:] = 7.0  # padding of the singleton path
    b = model.encode_paths(model.params, x2, mask)
    assert np.allclose(a[0, 0, 0], b[0, 0, 0])


def test_zero_heads_give_bias():
    tg, lib = _circuit(4)
    model = SurrogateModel(lib.cell_names, SMALL)
    for name in ("tau", "omega"):
        model.params[f"{name}_w2"][:] = 0.0
    model.params["tau_b2"][:] = -0.3
    model.params["omega_b2"][:] = 0.2
    s = model.make_sample(tg, tg.size_vector())
    tau, omega = model.forward(model.params, s.sizes.astype(float), s)
    assert np.allclose(tau, -0.3 * SMALL.output_scale)
    assert np.allclose(omega, 0.2 * SMALL.output_scale)


def test_path_order_invariance():
    tg, lib = _circuit(5, tightness=0.6)
    model = SurrogateModel(lib.cell_names, SMALL, seed=5)
    ann = sta.analyze(tg)
    s = model.make_sample(tg, tg.size_vector(), ann)
    a = model.forward(model.params, s.sizes.astype(float), s)
    s.batch = build_path_batch(tg, list(reversed(ann.paths)), ann.gatewise)
    b = model.forward(model.params, s.sizes.astype(float), s)
    assert np.allclose(a[0], b[0]) and np.allclose(a[1], b[1])


def test_batched_rows_match_single():
    tg, lib = _circuit(6)
    model = SurrogateModel(lib.cell_names, SMALL, seed=6)
    s = model.make_sample(tg, tg.size_vector())
    rows = np.random.default_rng(0).uniform(0, 3, (3, tg.n_gates))
    tau, _ = model.forward(model.params, rows, s)
    for i in range(3):
        t1, _ = model.forward(model.params, rows[i], s)
        assert np.allclose(tau[i], t1[0])


# -- labels and loss ---------------------------------------------------------------

def test_gradient_labels():
    assert make_gradient_labels([2], [4], [-285], [-150])[0] == 67.5
    assert make_gradient_labels([4], [2], [-150], [-285])[0] == 67.5
    assert make_gradient_labels([3], [3], [-10], [-20])[0] == 0.0
    assert make_gradient_labels([1], [3], [-5], [-5])[0] == 0.0


def test_zero_model_slack_term():
    graph, lib = parse_circuit(FANOUT_CKT, FANOUT_LIB)
    tg = sta.TimingGraph(graph, lib)
    model = SurrogateModel(lib.cell_names, SMALL)
    model.params = {k: np.zeros_like(v) for k, v in model.params.items()}
    s = model.make_sample(tg, tg.size_vector())
    s.s_tot = np.array([-285.0 if g == "U" else 0.0 for g in s.batch.gates])
    s.s_wst = np.zeros(len(s.batch.gates))
    lt, lw = loss(model, model.params, s, gradient_terms=False)
    assert lt == 285.0 ** 2 and lw == 0.0


def test_fanout_labels():
    graph, lib = parse_circuit(FANOUT_CKT, FANOUT_LIB)
    tg = sta.TimingGraph(graph, lib)
    model = SurrogateModel(lib.cell_names, SMALL)
    s = attach_labels(model.make_sample(tg, tg.size_vector()), tg.size_vector())
    assert s.s_tot[s.batch.gates.index("U")] == -285.0
    assert not np.any(s.d_tot)


def test_loss_gradient_term_uses_slopes():
    tg, lib = _circuit(7)
    model = SurrogateModel(lib.cell_names, SMALL)
    model.params = {k: np.zeros_like(v) for k, v in model.params.items()}
    s = attach_labels(model.make_sample(tg, tg.size_vector()), tg.n_sizes - 1)
    lt, lw = loss(model, model.params, s)
    assert lt == pytest.approx(np.sum(s.s_tot ** 2) + np.sum(s.d_tot ** 2))
    assert lw == pytest.approx(np.sum(s.s_wst ** 2) + np.sum(s.d_wst ** 2))


def test_loss_tape_gradient_matches_fd():
    tg, lib = _circuit(8)
    model = SurrogateModel(lib.cell_names, SMALL, seed=8)
    s = attach_labels(model.make_sample(tg, tg.size_vector()), tg.n_sizes - 1)
    tape = ad.Tape()
    pv = {k: tape.var(v) for k, v in model.params.items()}
    lt, lw = loss(model, pv, s)
    tape.backward(lt + lw)
    key = "tau_b2"
    h = 1e-4
    p_hi = dict(model.params, **{key: model.params[key] + h})
    p_lo = dict(model.params, **{key: model.params[key] - h})
    f = lambda p: sum(float(ad.value(x)) for x in loss(model, p, s))
    fd = (f(p_hi) - f(p_lo)) / (2 * h)
    assert pv[key].grad[0] == pytest.approx(fd, rel=1e-5)


def test_short_training_reduces_loss():
    model = SurrogateModel(_circuit(10)[1].cell_names, SMALL, seed=0)
    samples = []
    for i in range(3):
        tg, _ = _circuit(10 + i, n=6)
        samples.append(attach_labels(model.make_sample(tg, tg.size_vector()), tg.n_sizes - 1))
    res = train(model, samples, epochs=15, lr=1e-2, seed=0)
    assert res.final_loss < res.initial_loss
    assert len(res.history) == 15


# -- checkpoints ------------------------------------------------------------------

def test_checkpoint_roundtrip(chain):
    graph, lib = chain(50.0)
    tg = sta.TimingGraph(graph, lib, PhysicalConfig())
    model = SurrogateModel(lib.cell_names, SMALL, seed=9)
    again = SurrogateModel.from_json(model.to_json())
    assert again.cfg == model.cfg
    s1 = model.make_sample(tg, tg.size_vector())
    s2 = again.make_sample(tg, tg.size_vector())
    a = model.forward(model.params, s1.sizes.astype(float), s1)
    b = again.forward(again.params, s2.sizes.astype(float), s2)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_checkpoint_rejects_bad_shapes():
    model = SurrogateModel(["INV"], SMALL)
    params = dict(model.params)
    params["w_in"] = params["w_in"][:, :-1]
    with pytest.raises(ValueError, match="w_in"):
        SurrogateModel(["INV"], SMALL, params=params)
    with pytest.raises(ValueError):
        SurrogateModel.from_json('{"format": "other"}')


def test_predict_on_paths_dict_sizes(chain):
    graph, lib = chain(50.0)
    tg = sta.TimingGraph(graph, lib, PhysicalConfig())
    model = SurrogateModel(lib.cell_names, SMALL)
    ann = sta.analyze(tg)
    tau, omega = model.predict_on_paths(tg, tg.size_vector().astype(float), ann)
    assert set(tau) == set(omega) == {"U1", "U2"}
