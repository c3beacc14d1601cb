"""Gradient-descent gate sizing.

Each iteration scores the current rounded sizes with the golden STA,
re-extracts the violating paths, evaluates the surrogate's gate-wise TNS and
WNS on a tape through the straight-through rounding, forms the smoothed
timing target, and moves the continuous size coordinates with Adam using
per-gate rates drawn by Gumbel-Softmax over gate-wise WNS severity.

The timing target is a slack (larger is better). Its gradient is taken on the
tape and the Adam step descends on the violation ``-target``.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import ad, sta
from .layout import PhysicalConfig
from .model import CellLibrary, CircuitGraph
from .surrogate import AnalyticSurrogate

log = logging.getLogger(__name__)

# Backward multiplier of the rounding estimator; flipped only by fault-injection hooks.
STE_MULTIPLIER = 1.0


@dataclass(frozen=True)
class TargetWeights:
    mu_tau: float = 0.5
    mu_wns: float = 0.5
    gamma: float = 10.0  # ps
    lam: float = 5.0
    eta: float = 0.25  # size steps per iteration, on average over active gates

    def __post_init__(self):
        if self.mu_tau < 0 or self.mu_wns < 0:
            raise ValueError("target weights must be non-negative")
        if self.gamma <= 0 or self.lam <= 0:
            raise ValueError("gamma and lambda must be positive")


@dataclass(frozen=True)
class SizerConfig:
    weights: TargetWeights = TargetWeights()
    max_iters: int = 200
    patience: int = 20
    seed: int = 0
    mode: str = "analytical"  # or "learned"
    rates: str = "gumbel"  # or "uniform"
    slack_threshold: float = 0.0
    k_max: int | None = 8
    physical: PhysicalConfig = PhysicalConfig()
    severity_floor: float = 0.01  # ps
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# timing target


def smooth_min0(x, gamma: float):
    """Softplus smoothing of min(0, x); never above the exact value."""
    return -gamma * ad.softplus(-x * (1.0 / gamma))


def smoothmin(xs, gamma: float):
    """Log-Sum-Exp smoothing of min over ``xs``: -gamma * log sum exp(-x / gamma)."""
    if isinstance(xs, (list, tuple)):
        xs = ad.stack(xs) if any(isinstance(x, ad.Var) for x in xs) else np.asarray(xs, dtype=float)
    return -gamma * ad.logsumexp(xs * (-1.0 / gamma))


def timing_target(tau: Sequence, omega: Sequence, weights: TargetWeights = TargetWeights(), smooth: bool = True):
    """(mu_tau / N) * sum min(0, tau) + mu_wns * min omega, optionally smoothed.

    N counts gates with negative tau at the evaluation point and is held
    constant for differentiation.
    """
    n_neg = sum(1 for t in tau if ad.value(t) < 0)
    tape = next((x.tape for x in list(tau) + list(omega) if isinstance(x, ad.Var)), None)
    if tape is not None:
        tape.record("N", n_neg)
    total = 0.0
    if n_neg:
        acc = 0.0
        for t in tau:
            acc = acc + (smooth_min0(t, weights.gamma) if smooth else ad.min0(t))
        total = total + acc * (weights.mu_tau / n_neg)
    if len(omega):
        m = smoothmin(list(omega), weights.gamma) if smooth else ad.minimum(list(omega))
        total = total + weights.mu_wns * m
    return total


# ---------------------------------------------------------------------------
# straight-through rounding


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def ste_round(g, n_sizes):
    """Round to the nearest size index (ties away from zero), clamped to the table.

    Backward passes the incoming gradient unchanged, except where the
    coordinate sits on or beyond a table end and the gradient points further
    out (negative at the bottom, positive at the top): those entries are zeroed.
    """
    upper = np.asarray(n_sizes, dtype=float) - 1.0
    v = ad.value(g)
    out = np.clip(round_half_away(v), 0.0, upper)
    if not isinstance(g, ad.Var):
        return out
    low = v <= 0.0
    high = v >= upper
    g.tape.record("ste", tuple(np.atleast_1d(out).tolist()))

    def back(grad):
        if STE_MULTIPLIER != 1.0:
            grad = grad * STE_MULTIPLIER
        outward = (low & (np.asarray(grad) < 0)) | (high & (np.asarray(grad) > 0))
        if np.any(outward):
            grad = np.where(outward, 0.0, grad)
        return (grad,)

    return ad.Var(g.tape, out, (g,), back)


# ---------------------------------------------------------------------------
# adaptive rates and Adam


def gumbel_weights(severity: np.ndarray, lam: float, noise: np.ndarray) -> np.ndarray:
    """Softmax of (log severity + Gumbel noise) / lambda."""
    z = (np.log(severity) + noise) / lam
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def gumbel_rates(omega: np.ndarray, active: np.ndarray, lam: float, eta: float,
                 rng: np.random.Generator | None = None, floor: float = 0.01,
                 noise: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-gate learning rates; returns (rates, raw softmax weights over the active set).

    Severity is ``max(-omega, floor)`` so worse gate-wise WNS draws a larger
    share. Rates are rescaled so that they sum to ``eta * |active|``.
    """
    omega = np.asarray(omega, dtype=float)
    active = np.asarray(active, dtype=bool)
    rates = np.zeros(len(omega))
    idx = np.flatnonzero(active)
    if idx.size == 0:
        return rates, np.zeros(0)
    severity = np.maximum(-omega[idx], floor)
    if noise is None:
        noise = rng.gumbel(size=idx.size)
    w = gumbel_weights(severity, lam, noise)
    rates[idx] = eta * idx.size * w
    return rates, w


def uniform_rates(active: np.ndarray, eta: float) -> np.ndarray:
    return np.where(np.asarray(active, dtype=bool), eta, 0.0)


@dataclass
class OptimizerState:
    g: np.ndarray  # continuous size coordinates
    upper: np.ndarray  # n_sizes - 1 per gate
    m: np.ndarray = None
    v: np.ndarray = None
    t: int = 0
    iteration: int = 0
    best_sizes: np.ndarray | None = None
    best_metrics: dict | None = None
    rng: np.random.Generator | None = None

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float).copy()
        self.upper = np.asarray(self.upper, dtype=float)
        if self.m is None:
            self.m = np.zeros_like(self.g)
        if self.v is None:
            self.v = np.zeros_like(self.g)


def adam_step(state: OptimizerState, grad: np.ndarray, rates: np.ndarray,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    """One Adam update descending ``grad`` with per-coordinate rates, then projection."""
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad)).tolist()
        raise FloatingPointError(f"non-finite gradient at coordinates {bad}")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    step = np.asarray(rates, dtype=float) * m_hat / (np.sqrt(v_hat) + eps)
    state.g = np.clip(state.g - step, 0.0, state.upper)
    return state


# ---------------------------------------------------------------------------
# loop


def violation_score(tns: float, wns: float, weights: TargetWeights) -> float:
    """Weighted golden violation (>= 0); the oracle minimises the same quantity."""
    return weights.mu_tau * max(0.0, -tns) + weights.mu_wns * max(0.0, -wns)


@dataclass
class SizingResult:
    initial: dict[str, int]
    final: dict[str, int]
    initial_metrics: dict
    final_metrics: dict
    trajectory: list[dict] = field(default_factory=list)
    iterations: int = 0
    stop_reason: str = ""
    runtime: float = 0.0
    errors: list[str] = field(default_factory=list)

    def trajectory_csv(self) -> str:
        cols = ["iter", "wns", "tns", "nve", "target", "best_wns", "best_tns"]
        lines = [",".join(cols)]
        for row in self.trajectory:
            lines.append(",".join(_fmt(row[c]) for c in cols))
        return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(round(x, 9)) if math.isfinite(x) else str(x)
    return str(x)


def _surrogate_gates(tg, ann, surrogate, r):
    """Evaluate tau/omega on the tape for gates with a path group."""
    if getattr(surrogate, "mode", "analytical") == "analytical":
        sizes = [r[i] for i in range(tg.n_gates)]
        return surrogate.predict(sizes, ann.paths, ann.gatewise.group)
    return surrogate.predict_on_paths(tg, r, ann)


def size_loop(graph: CircuitGraph, library: CellLibrary, config: SizerConfig = SizerConfig(),
              surrogate=None, tg: sta.TimingGraph | None = None) -> SizingResult:
    """Run the sizing iterations and return the best assignment seen.

    The best assignment minimises :func:`violation_score` among states whose
    golden TNS is no worse than the initial netlist's, so the result never
    regresses TNS.
    """
    started = time.perf_counter()
    tg = tg or sta.TimingGraph(graph, library, config.physical)
    if surrogate is None:
        if config.mode != "analytical":
            raise ValueError("learned mode needs a trained surrogate model")
        surrogate = AnalyticSurrogate(tg)
    w = config.weights
    init_sizes = tg.size_vector()
    state = OptimizerState(init_sizes.astype(float), tg.n_sizes - 1, rng=np.random.default_rng(config.seed))
    init_ann = sta.propagate(tg, init_sizes)
    init_metrics = init_ann.summary()
    state.best_sizes = init_sizes.copy()
    state.best_metrics = dict(init_metrics)
    best_score = violation_score(init_ann.tns, init_ann.wns, w)
    result = SizingResult(tg.assignment(init_sizes), {}, init_metrics, {})
    stale = 0
    reason = "max_iters"
    for it in range(config.max_iters):
        state.iteration = it
        sizes = ste_round(state.g, tg.n_sizes).astype(int)
        ann = sta.analyze(tg, sizes, config.slack_threshold, config.k_max)
        score = violation_score(ann.tns, ann.wns, w)
        if ann.tns >= init_ann.tns and score < best_score - 1e-9:
            best_score = score
            state.best_sizes = sizes.copy()
            state.best_metrics = ann.summary()
            stale = 0
        elif it > 0:
            stale += 1
        row = {"iter": it, "wns": ann.wns, "tns": ann.tns, "nve": ann.nve, "target": float("nan"),
               "best_wns": state.best_metrics["wns"], "best_tns": state.best_metrics["tns"]}
        result.trajectory.append(row)
        if not ann.paths:
            reason = "closed"
            break
        if stale >= config.patience:
            reason = "patience"
            break
        try:
            tape = ad.Tape()
            gv = tape.var(state.g)
            r = ste_round(gv, tg.n_sizes)
            tau, omega = _surrogate_gates(tg, ann, surrogate, r)
            gates = list(tau)
            target = timing_target([tau[g] for g in gates], [omega[g] for g in gates], w)
            row["target"] = float(ad.value(target))
            if not isinstance(target, ad.Var):
                reason = "no_gradient"
                break
            tape.backward(target)
            grad = np.zeros(tg.n_gates) if gv.grad is None else np.asarray(gv.grad, dtype=float)
            omega_vec = np.zeros(tg.n_gates)
            active = np.zeros(tg.n_gates, dtype=bool)
            for gid in gates:
                i = tg.index[gid]
                omega_vec[i] = float(ad.value(omega[gid]))
                active[i] = omega_vec[i] < 0
            if config.rates == "uniform":
                rates = uniform_rates(active, w.eta)
            else:
                rates, _ = gumbel_rates(omega_vec, active, w.lam, w.eta, state.rng, config.severity_floor)
            adam_step(state, -grad, rates, config.beta1, config.beta2, config.adam_eps)
        except (FloatingPointError, ValueError) as exc:
            log.warning("iteration %d aborted: %s", it, exc)
            result.errors.append(f"iter {it}: {exc}")
            reason = "error"
            break
    result.final = tg.assignment(state.best_sizes)
    result.final_metrics = dict(state.best_metrics)
    result.iterations = len(result.trajectory)
    result.stop_reason = reason
    result.runtime = time.perf_counter() - started
    return result
