"""Learned sizing-aware timing model.

Per-gate timing features are encoded path by path with a one-layer
self-attention block, pooled into critical / intra-path / inter-path blocks,
concatenated with the gate's multi-scale physical feature and mapped to
gate-wise TNS and WNS by two MLP heads. All tensors are batched over
(size rows, paths, positions) so the finite-difference gradient term of the
loss costs one forward pass.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .. import ad, layout, sta
from ..model import CellLibrary, CircuitGraph

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sizegrad-surrogate"
CHECKPOINT_VERSION = 1

R_SCALE = 1.0  # kOhm
C_SCALE = 0.1  # 1/fF


@dataclass(frozen=True)
class ModelConfig:
    width: int = 16  # encoder width
    enc_out: int = 8  # per-gate encoding width
    head_hidden: int = 32
    output_scale: float = 100.0  # ps per unit head output
    scales: tuple[int, ...] = layout.DEFAULT_SCALES
    psi_hidden: int = 8
    fd_step: float = 0.5  # size steps for the gradient term of the loss
    max_len: int = 64

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        if "scales" in d:
            d["scales"] = tuple(d["scales"])
        return cls(**d)


# ---------------------------------------------------------------------------
# features


def feature_names(cell_names: Sequence[str]) -> list[str]:
    return ["g_con"] + [f"type_{c}" for c in cell_names] + ["in_r", "in_c", "out_r", "out_c", "pin_cap"]


def static_features(tg: sta.TimingGraph, sizes: Sequence[int], cell_names: Sequence[str]) -> np.ndarray:
    """(n, f - 1) features other than the size coordinate, in timing-graph order."""
    vocab = {c: k for k, c in enumerate(cell_names)}
    rows = []
    for i in range(tg.n_gates):
        onehot = np.zeros(len(cell_names))
        if tg.cells[i] in vocab:
            onehot[vocab[tg.cells[i]]] = 1.0
        ins = [tg.nets[k] for k in tg.in_nets[i]]
        in_r = float(np.mean([n.r for n in ins])) if ins else 0.0
        in_c = float(np.mean([n.c for n in ins])) if ins else 0.0
        k = tg.out_net[i]
        out_r = tg.nets[k].r if k is not None else 0.0
        out_c = tg.nets[k].c if k is not None else 0.0
        q = tg.tables["q"][i, int(sizes[i])]
        rows.append(np.concatenate([onehot, [in_r * R_SCALE, in_c * C_SCALE, out_r * R_SCALE,
                                             out_c * C_SCALE, q * C_SCALE]]))
    return np.array(rows).reshape(tg.n_gates, len(cell_names) + 5)


def encode_grid(channels, weight=None, bias=None):
    """Per-cell channel encoder; identity unless a 1x1 weight is given."""
    if weight is None:
        return channels
    return layout.conv2d(channels, weight, bias if bias is not None else 0.0)


def physical_features(tg: sta.TimingGraph, sizes: Sequence[int], cfg: ModelConfig, psi: Mapping) -> np.ndarray:
    """(n, 3) scale-attended physical feature per gate."""
    graph = tg.graph
    assign = tg.assignment(sizes)
    grids = layout.build_grids(graph, tg.library, assign, cfg.scales)
    main = grids.main_scale
    up = [layout.upsample_bilinear(encode_grid(grids.grids[m].channels()), main) for m in grids.scales]
    att = layout.scale_attention(up, psi)
    fmap = layout.aggregate_scales(up, att)
    out = np.zeros((tg.n_gates, len(layout.CHANNELS)))
    for i, gid in enumerate(tg.gate_ids):
        g = graph.gates[gid]
        area = tg.tables["a"][i, int(sizes[i])]
        mask = layout.gate_mask(layout.footprint(g.x, g.y, area), grids.die, main)
        out[i] = layout.gate_feature(mask, fmap)
    return out


def sinusoidal_encoding(length: int, width: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# ---------------------------------------------------------------------------
# path batches and aggregation


@dataclass
class PathBatch:
    """Padded path tensors plus the pooling matrices of the aggregation."""
    gates: list[str]  # predicted gates (rows of the pooling matrices)
    rows: np.ndarray  # their timing-graph indices
    gate_index: np.ndarray  # (P, L), padding points at row n
    key_mask: np.ndarray  # (P, L) True on real positions
    critical: np.ndarray  # (K, P*L)
    intra: np.ndarray  # (K, P*L)
    inter: np.ndarray  # (K, P*L)


def build_path_batch(tg: sta.TimingGraph, paths: Sequence, gatewise: sta.GatewiseMetrics) -> PathBatch:
    by_id = {p.id: k for k, p in enumerate(paths)}
    n_p = len(paths)
    length = max((len(p.gates) for p in paths), default=1) or 1
    idx = np.full((max(n_p, 1), length), tg.n_gates, dtype=int)
    mask = np.zeros((max(n_p, 1), length), dtype=bool)
    pos: dict[tuple[int, str], int] = {}
    for k, p in enumerate(paths):
        for j, gid in enumerate(p.gates):
            idx[k, j] = tg.index[gid]
            mask[k, j] = True
            pos[(k, gid)] = k * length + j
    gates = [g for g in tg.gate_ids if gatewise.group.get(g)]
    width = idx.size
    crit = np.zeros((len(gates), width))
    intra = np.zeros((len(gates), width))
    inter = np.zeros((len(gates), width))
    for r, gid in enumerate(gates):
        kc = by_id[gatewise.critical[gid]]
        crit[r, pos[(kc, gid)]] = 1.0
        intra[r, kc * length:kc * length + len(paths[kc].gates)] = 1.0
        group = gatewise.group[gid]
        for pid in group:
            inter[r, pos[(by_id[pid], gid)]] += 1.0 / len(group)
    return PathBatch(gates, np.array([tg.index[g] for g in gates], dtype=int), idx, mask, crit, intra, inter)


def aggregate_timing(gate: str, encodings: Mapping[int, np.ndarray], path_gates: Mapping[int, Sequence[str]],
                     critical: int, group: Sequence[int]) -> np.ndarray:
    """t_v = critical encoding || sum over the critical path || mean over the group.

    ``encodings[p]`` is the (len(path), d) encoding of path ``p``.
    """
    if not group:
        d = next(iter(encodings.values())).shape[-1] if encodings else 0
        return np.zeros(3 * d)
    at = {p: list(path_gates[p]).index(gate) for p in group}
    crit = encodings[critical][at[critical]]
    total = encodings[critical].sum(axis=0)
    mean = np.mean([encodings[p][at[p]] for p in group], axis=0)
    return np.concatenate([crit, total, mean])


# ---------------------------------------------------------------------------
# model


def init_params(n_features: int, cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, e, h = cfg.width, cfg.enc_out, cfg.head_hidden

    def glorot(*shape):
        return rng.normal(0.0, math.sqrt(2.0 / (shape[0] + shape[-1])), shape)

    head_in = 3 * e + len(layout.CHANNELS)
    p = {
        "w_in": glorot(n_features, d), "b_in": np.zeros(d),
        "wq": glorot(d, d), "wk": glorot(d, d), "wv": glorot(d, d),
        "w_ff1": glorot(d, 2 * d), "b_ff1": np.zeros(2 * d),
        "w_ff2": glorot(2 * d, d), "b_ff2": np.zeros(d),
        "w_out": glorot(d, e), "b_out": np.zeros(e),
    }
    for name in ("tau", "omega"):
        p[f"{name}_w1"] = glorot(head_in, h)
        p[f"{name}_b1"] = np.zeros(h)
        p[f"{name}_w2"] = glorot(h, 1) * 0.1
        p[f"{name}_b2"] = np.zeros(1)
    return p


@dataclass
class GateSample:
    """One circuit at one sizing, ready for the model."""
    name: str
    tg: sta.TimingGraph
    sizes: np.ndarray
    static: np.ndarray
    phys: np.ndarray
    batch: PathBatch
    inv_span: np.ndarray  # 1 / (n_sizes - 1) per gate, 1 for single-size cells
    s_tot: np.ndarray | None = None
    s_wst: np.ndarray | None = None
    d_tot: np.ndarray | None = None
    d_wst: np.ndarray | None = None


class SurrogateModel:
    mode = "learned"

    def __init__(self, cell_names: Sequence[str], cfg: ModelConfig = ModelConfig(),
                 params: Mapping[str, np.ndarray] | None = None, psi: Mapping[str, np.ndarray] | None = None,
                 seed: int = 0):
        self.cell_names = list(cell_names)
        self.cfg = cfg
        self.n_features = len(feature_names(self.cell_names))
        self.params = dict(params) if params is not None else init_params(self.n_features, cfg, seed)
        self.psi = dict(psi) if psi is not None else layout.init_psi(len(cfg.scales), len(layout.CHANNELS),
                                                                     cfg.psi_hidden, seed)
        self._pe = sinusoidal_encoding(cfg.max_len, cfg.width)
        self._phys_cache: dict[tuple, np.ndarray] = {}
        self.check_shapes()

    # -- shapes -------------------------------------------------------------
    def expected_shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in init_params(self.n_features, self.cfg, 0).items()}

    def check_shapes(self) -> None:
        want = self.expected_shapes()
        if set(want) != set(self.params):
            missing = sorted(set(want) ^ set(self.params))
            raise ValueError(f"parameter set mismatch: {missing}")
        for k, shape in want.items():
            if tuple(np.shape(self.params[k])) != tuple(shape):
                raise ValueError(f"parameter {k} has shape {np.shape(self.params[k])}, expected {shape}")

    # -- samples ------------------------------------------------------------
    def make_sample(self, tg: sta.TimingGraph, sizes, ann: sta.TimingAnnotation | None = None,
                    name: str = "") -> GateSample:
        sizes = np.asarray(sizes, dtype=int)
        if ann is None:
            ann = sta.analyze(tg, sizes)
        key = (id(tg), tuple(sizes.tolist()))
        if key not in self._phys_cache:
            if len(self._phys_cache) > 256:
                self._phys_cache.clear()
            self._phys_cache[key] = physical_features(tg, sizes, self.cfg, self.psi)
        span = np.maximum(tg.n_sizes - 1, 1).astype(float)
        return GateSample(name, tg, sizes, static_features(tg, sizes, self.cell_names), self._phys_cache[key],
                          build_path_batch(tg, ann.paths, ann.gatewise), 1.0 / span)

    # -- forward ------------------------------------------------------------
    def encode_paths(self, params, x, key_mask):
        """(..., P, L, f) path features -> (..., P, L, enc_out) per-gate encodings."""
        length = np.shape(ad.value(x))[-2]
        if length > self.cfg.max_len:
            raise ValueError(f"path of {length} gates exceeds max_len {self.cfg.max_len}")
        h0 = ad.matmul(x, params["w_in"]) + params["b_in"] + self._pe[:length]
        q = ad.matmul(h0, params["wq"])
        k = ad.matmul(h0, params["wk"])
        v = ad.matmul(h0, params["wv"])
        scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(self.cfg.width))
        scores = scores + np.where(key_mask[:, None, :], 0.0, -1e9)
        att = ad.softmax(scores, axis=-1)
        h1 = h0 + ad.matmul(att, v)
        ff = ad.matmul(ad.relu(ad.matmul(h1, params["w_ff1"]) + params["b_ff1"]), params["w_ff2"]) + params["b_ff2"]
        h2 = h1 + ff
        return ad.matmul(h2, params["w_out"]) + params["b_out"]

    def head(self, params, name: str, z):
        hidden = ad.relu(ad.matmul(z, params[f"{name}_w1"]) + params[f"{name}_b1"])
        out = ad.matmul(hidden, params[f"{name}_w2"]) + params[f"{name}_b2"]
        shape = np.shape(ad.value(out))[:-1]
        return ad.reshape(out, shape) * self.cfg.output_scale

    def forward(self, params, g, sample: GateSample):
        """tau, omega of shape (B, K) for size rows ``g`` of shape (B, n) (or (n,) -> (1, K))."""
        if np.ndim(ad.value(g)) == 1:
            g = ad.reshape(g, (1, -1))
        b, n = np.shape(ad.value(g))
        gfeat = ad.expand_dims(g * sample.inv_span, -1)
        static = np.broadcast_to(sample.static, (b, n, sample.static.shape[1]))
        feats = ad.concat([gfeat, static], axis=-1)
        feats = ad.concat([feats, np.zeros((b, 1, self.n_features))], axis=1)  # padding row
        x = ad.take(feats, sample.batch.gate_index, axis=1)  # (B, P, L, f)
        enc = self.encode_paths(params, x, sample.batch.key_mask)
        p_, l_ = sample.batch.gate_index.shape
        flat = ad.reshape(enc, (b, p_ * l_, self.cfg.enc_out))
        bt = sample.batch
        t = ad.concat([ad.matmul(bt.critical, flat), ad.matmul(bt.intra, flat), ad.matmul(bt.inter, flat)], axis=-1)
        h = np.broadcast_to(sample.phys[bt.rows], (b, len(bt.rows), sample.phys.shape[1]))
        z = ad.concat([t, h], axis=-1)
        return self.head(params, "tau", z), self.head(params, "omega", z)

    def predict(self, sample: GateSample, g=None):
        """Gate-wise (tau, omega) dicts at size coordinates ``g`` (defaults to the sample's sizes)."""
        g = sample.sizes.astype(float) if g is None else g
        tau, omega = self.forward(self.params, g, sample)
        return ({gid: tau[0, k] for k, gid in enumerate(sample.batch.gates)},
                {gid: omega[0, k] for k, gid in enumerate(sample.batch.gates)})

    def predict_on_paths(self, tg: sta.TimingGraph, g, ann: sta.TimingAnnotation):
        """Optimizer hook: predictions on the current path set, differentiable in ``g``."""
        sizes = tg.size_vector(ann.sizes)
        sample = self.make_sample(tg, sizes, ann)
        return self.predict(sample, g)

    # -- checkpoints --------------------------------------------------------
    def to_json(self) -> str:
        blobs = {**{f"param/{k}": v for k, v in self.params.items()}, **{f"psi/{k}": v for k, v in self.psi.items()}}
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.cfg),
            "cell_names": self.cell_names,
            "shapes": {k: list(np.shape(v)) for k, v in blobs.items()},
            "data": {k: np.asarray(v, dtype=float).ravel().tolist() for k, v in blobs.items()},
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "SurrogateModel":
        doc = json.loads(text)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a surrogate checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
        arrays = {}
        for k, shape in doc["shapes"].items():
            flat = np.asarray(doc["data"][k], dtype=float)
            if flat.size != math.prod(shape):
                raise ValueError(f"checkpoint blob {k} has {flat.size} values for shape {shape}")
            arrays[k] = flat.reshape(shape)
        params = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("param/")}
        psi = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("psi/")}
        return cls(doc["cell_names"], ModelConfig.from_dict(doc["config"]), params, psi)


# ---------------------------------------------------------------------------
# labels, loss, training


def make_gradient_labels(g_or, g_op, s_or, s_op) -> np.ndarray:
    """Per-gate slope (s_op - s_or) / (g_op - g_or); 0 where the size did not change."""
    g_or, g_op = np.asarray(g_or, dtype=float), np.asarray(g_op, dtype=float)
    s_or, s_op = np.asarray(s_or, dtype=float), np.asarray(s_op, dtype=float)
    dg = g_op - g_or
    safe = np.where(dg == 0, 1.0, dg)
    return np.where(dg == 0, 0.0, (s_op - s_or) / safe)


def attach_labels(sample: GateSample, op_sizes) -> GateSample:
    """Slack labels at the sample's sizes and gradient labels towards ``op_sizes``."""
    tg = sample.tg
    ann_or = sta.analyze(tg, sample.sizes)
    ann_op = sta.analyze(tg, np.asarray(op_sizes, dtype=int))
    gates = sample.batch.gates
    rows = sample.batch.rows
    sample.s_tot = np.array([ann_or.gatewise.tot[g] for g in gates])
    sample.s_wst = np.array([ann_or.gatewise.wst[g] for g in gates])
    op_tot = np.array([ann_op.gatewise.tot[g] for g in gates])
    op_wst = np.array([ann_op.gatewise.wst[g] for g in gates])
    g_or = sample.sizes[rows]
    g_op = np.asarray(op_sizes)[rows]
    sample.d_tot = make_gradient_labels(g_or, g_op, sample.s_tot, op_tot)
    sample.d_wst = make_gradient_labels(g_or, g_op, sample.s_wst, op_wst)
    return sample


def _sum_sq(x):
    return (x * x).sum()


def loss(model: SurrogateModel, params, sample: GateSample, gradient_terms: bool = True):
    """(L_tau, L_omega): squared slack-label error plus squared gradient-label error.

    The model's derivative in the size coordinate is a symmetric finite
    difference with step ``cfg.fd_step``, so all rows go through one batched
    forward pass.
    """
    if sample.s_tot is None:
        raise ValueError("sample has no labels")
    k = len(sample.batch.gates)
    if k == 0:
        return 0.0, 0.0
    g0 = sample.sizes.astype(float)
    if not gradient_terms:
        tau, omega = model.forward(params, g0, sample)
        return (_sum_sq(sample.s_tot - tau[0]), _sum_sq(sample.s_wst - omega[0]))
    step = model.cfg.fd_step
    rows = np.repeat(g0[None, :], 1 + 2 * k, axis=0)
    ar = np.arange(k)
    rows[1 + ar, sample.batch.rows] += step
    rows[1 + k + ar, sample.batch.rows] -= step
    tau, omega = model.forward(params, rows, sample)
    out = []
    for pred, s, d in ((tau, sample.s_tot, sample.d_tot), (omega, sample.s_wst, sample.d_wst)):
        slope = (pred[1 + ar, ar] - pred[1 + k + ar, ar]) * (1.0 / (2 * step))
        out.append(_sum_sq(s - pred[0]) + _sum_sq(d - slope))
    return tuple(out)


class ParamAdam:
    def __init__(self, params: Mapping[str, np.ndarray], lr: float = 4e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {k}")
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def dataset_loss(model: SurrogateModel, samples: Sequence[GateSample], gradient_terms: bool = True) -> float:
    total = 0.0
    for s in samples:
        lt, lw = loss(model, model.params, s, gradient_terms)
        total += float(ad.value(lt)) + float(ad.value(lw))
    return total


@dataclass
class TrainResult:
    initial_loss: float
    final_loss: float
    history: list[float] = field(default_factory=list)  # summed per-step losses per epoch
    runtime: float = 0.0


def train(model: SurrogateModel, samples: Sequence[GateSample], epochs: int = 200, lr: float = 4e-4,
          seed: int = 0, gradient_terms: bool = True) -> TrainResult:
    """Adam, one step per circuit per epoch, circuit order shuffled by ``seed``."""
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    opt = ParamAdam(model.params, lr)
    initial = dataset_loss(model, samples, gradient_terms)
    history = []
    for epoch in range(epochs):
        running = 0.0
        for j in rng.permutation(len(samples)):
            tape = ad.Tape()
            pv = {k: tape.var(v) for k, v in model.params.items()}
            lt, lw = loss(model, pv, samples[j], gradient_terms)
            total = lt + lw
            if not isinstance(total, ad.Var):
                continue
            running += float(total.value)
            tape.backward(total)
            opt.step(model.params, {k: (v.grad if v.grad is not None else np.zeros_like(v.value))
                                    for k, v in pv.items()})
        history.append(running)
        if epoch % 20 == 0:
            log.info("epoch %d loss %.6g", epoch, running)
    final = dataset_loss(model, samples, gradient_terms)
    return TrainResult(initial, final, history, time.perf_counter() - started)


def build_dataset(circuits: Sequence[tuple[CircuitGraph, CellLibrary]], model: SurrogateModel, op_sizer,
                  physical: layout.PhysicalConfig = layout.PhysicalConfig()) -> list[GateSample]:
    """Labelled samples at each circuit's current sizes; ``op_sizer(graph, library)`` gives the target sizes."""
    samples = []
    for k, (graph, library) in enumerate(circuits):
        tg = sta.TimingGraph(graph, library, physical)
        sizes = tg.size_vector()
        sample = model.make_sample(tg, sizes, name=f"c{k}")
        op = op_sizer(graph, library)
        attach_labels(sample, tg.size_vector(op))
        samples.append(sample)
    return samples
