"""Self-checks shared by the ``verify`` subcommand and the test-suite.

Each suite returns a :class:`SuiteResult`; suites only use built-in
micro-instances and seeded randomness so they are cheap and reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ad, optimizer, sta
from .model import CellLibrary, CircuitGraph, emit_netlist, emit_parasitics, parse_circuit
from .optimizer import TargetWeights
from .surrogate import AnalyticSurrogate


@dataclass
class SuiteResult:
    name: str
    ok: bool
    detail: str = ""
    data: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# gradient of the timing target


def target_fn(tg: sta.TimingGraph, ann: sta.TimingAnnotation, weights: TargetWeights = TargetWeights(),
              through_ste: bool = False, surrogate: AnalyticSurrogate | None = None) -> Callable:
    """Smoothed target as a function of the size vector on a fixed path set.

    With ``through_ste`` the coordinates are rounded by the estimator first,
    as in the sizing loop; otherwise rounding is bypassed.
    """
    sur = surrogate or AnalyticSurrogate(tg)

    def f(g):
        x = optimizer.ste_round(g, tg.n_sizes) if through_ste else g
        sizes = [x[i] for i in range(tg.n_gates)]
        tau, omega = sur.predict(sizes, ann.paths, ann.gatewise.group)
        gates = list(tau)
        return optimizer.timing_target([tau[v] for v in gates], [omega[v] for v in gates], weights)

    return f


def tape_gradient(f: Callable, g: np.ndarray) -> tuple[float, np.ndarray, tuple]:
    tape = ad.Tape()
    gv = tape.var(np.asarray(g, dtype=float))
    out = f(gv)
    if not isinstance(out, ad.Var):
        return float(out), np.zeros(len(g)), tape.signature()
    tape.backward(out)
    grad = np.zeros(len(g)) if gv.grad is None else np.asarray(gv.grad, dtype=float)
    return float(out.value), grad, tape.signature()


def _signature(f: Callable, g: np.ndarray) -> tuple:
    tape = ad.Tape()
    f(tape.var(g))
    return tape.signature()


def fd_gradient(f: Callable, g: np.ndarray, h: float = 1e-3, signature: tuple | None = None):
    """Central differences; returns (gradient, interior) where interior means every
    stencil point took the same non-smooth branches as ``signature``."""
    g = np.asarray(g, dtype=float)
    out = np.zeros(len(g))
    interior = True
    for i in range(len(g)):
        gp, gm = g.copy(), g.copy()
        gp[i] += h
        gm[i] -= h
        if signature is not None:
            interior &= _signature(f, gp) == signature and _signature(f, gm) == signature
        out[i] = (float(ad.value(f(gp))) - float(ad.value(f(gm)))) / (2 * h)
    return out, interior


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Infinity-norm error of ``a`` against reference ``b``, relative to ``b``'s scale."""
    scale = max(float(np.max(np.abs(b), initial=0.0)), 1e-12)
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)), initial=0.0)) / scale


def gradient_fidelity(graphs: list[tuple[CircuitGraph, CellLibrary]], n_points: int, seed: int = 0,
                      h: float = 1e-3, tol: float = 1e-4, weights: TargetWeights = TargetWeights(),
                      physical=None, max_tries: int = 50) -> SuiteResult:
    """Tape gradient of the bypassed target against central differences at interior points."""
    from .layout import PhysicalConfig

    rng = np.random.default_rng(seed)
    physical = physical if physical is not None else PhysicalConfig()
    errs, rejected, flat = [], 0, 0
    per_circuit = [n_points // len(graphs) + (1 if k < n_points % len(graphs) else 0) for k in range(len(graphs))]
    for (graph, library), count in zip(graphs, per_circuit):
        tg = sta.TimingGraph(graph, library, physical)
        sur = AnalyticSurrogate(tg)
        done = 0
        tries = 0
        while done < count:
            tries += 1
            if tries > count * max_tries:
                break
            g = rng.uniform(0.0, tg.n_sizes - 1.0)
            ann = sta.analyze(tg, optimizer.ste_round(g, tg.n_sizes).astype(int))
            if not ann.paths:
                rejected += 1
                continue
            f = target_fn(tg, ann, weights, surrogate=sur)
            _, grad, sig = tape_gradient(f, g)
            fd, interior = fd_gradient(f, g, h, sig)
            if not interior:
                rejected += 1
                continue
            if not np.any(fd):
                flat += 1
            errs.append(relative_error(grad, fd))
            done += 1
    worst = max(errs, default=float("inf"))
    ok = len(errs) == n_points and worst <= tol
    return SuiteResult("gradient-fidelity", ok,
                       f"{len(errs)}/{n_points} interior points, worst relative error {worst:.3g} (tol {tol:g}), "
                       f"{rejected} resampled", {"errors": errs, "rejected": rejected, "flat": flat})


def ste_contract(graphs: list[tuple[CircuitGraph, CellLibrary]], n_points: int = 20, seed: int = 0) -> SuiteResult:
    """Gradient through the estimator at g equals the bypassed gradient at round(g), bitwise."""
    from .layout import PhysicalConfig

    rng = np.random.default_rng(seed)
    mismatches = 0
    checked = 0
    for graph, library in graphs:
        tg = sta.TimingGraph(graph, library, PhysicalConfig())
        for _ in range(n_points):
            # keep rounded sizes off the table ends so no clamping rule applies
            lo = np.minimum(0.5, tg.n_sizes - 1.0)
            hi = np.maximum(tg.n_sizes - 1.5, lo)
            g = np.where(tg.n_sizes > 2, rng.uniform(lo, hi), rng.uniform(0.0, 0.49, tg.n_gates))
            r = optimizer.ste_round(g, tg.n_sizes)
            ann = sta.analyze(tg, r.astype(int))
            if not ann.paths:
                continue
            _, g_ste, _ = tape_gradient(target_fn(tg, ann, through_ste=True), g)
            _, g_con, _ = tape_gradient(target_fn(tg, ann), r)
            if not np.any(g_con):
                continue
            checked += 1
            if not np.array_equal(g_ste, g_con):
                mismatches += 1
    ok = checked > 0 and mismatches == 0
    return SuiteResult("ste-contract", ok, f"{checked} points, {mismatches} gradient mismatches "
                                           f"(multiplier {optimizer.STE_MULTIPLIER})")


# ---------------------------------------------------------------------------
# smoothing and rates


def lse_bound(n_vectors: int = 1000, seed: int = 0, gammas=(1.0, 10.0, 100.0)) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for k in range(n_vectors):
        n = int(rng.integers(1, 65))
        x = rng.normal(0.0, 100.0, n)
        gamma = gammas[k % len(gammas)]
        err = abs(optimizer.smoothmin(x, gamma) - x.min())
        worst = max(worst, err - gamma * math.log(n))
    x = rng.normal(0.0, 100.0, 64)
    limit = abs(optimizer.smoothmin(x, 0.01) - x.min())
    ok = worst <= 1e-9 and limit < 0.1
    return SuiteResult("lse-bound", ok, f"max(err - gamma ln n) = {worst:.3g}; error at gamma=0.01: {limit:.3g} ps",
                       {"slack": worst, "limit_error": limit})


def gumbel_share(draws: int = 10000, seed: int = 0, severities=(100.0, 1.0), lam: float = 0.01) -> float:
    """Fraction of the sampled rate mass that lands on the first (worse) gate."""
    rng = np.random.default_rng(seed)
    omega = -np.asarray(severities, dtype=float)
    mass = np.zeros(len(omega))
    for _ in range(draws):
        rates, _ = optimizer.gumbel_rates(omega, np.ones(len(omega), bool), lam, 0.25, rng)
        mass += rates
    return float(mass[0] / mass.sum())


def gumbel_checks(draws: int = 10000, seed: int = 0) -> SuiteResult:
    """Normalisation, the noiseless low-temperature limit, and the sampled share.

    As the temperature goes to zero the softmax picks the argmax of
    log w + noise, whose win probability for gate i is w_i / sum w, so the
    sampled share is compared with that value within four standard errors.
    """
    rng = np.random.default_rng(seed)
    worst_sum = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 40))
        omega = -rng.exponential(50.0, n)
        _, w = optimizer.gumbel_rates(omega, np.ones(n, bool), 5.0, 0.25, rng)
        worst_sum = max(worst_sum, abs(w.sum() - 1.0))
    _, w0 = optimizer.gumbel_rates(np.array([-100.0, -1.0]), np.ones(2, bool), 0.01, 0.25, noise=np.zeros(2))
    share = gumbel_share(draws, seed)
    expect = 100.0 / 101.0
    se = math.sqrt(expect * (1 - expect) / draws)
    ok = worst_sum <= 1e-9 and w0[0] > 1 - 1e-12 and abs(share - expect) <= 4 * se
    return SuiteResult("gumbel", ok, f"max |sum w - 1| = {worst_sum:.3g}; noiseless limit weight {w0[0]:.6f}; "
                       f"sampled share {share:.4f} vs {expect:.4f} +- {4 * se:.4f}",
                       {"sum_error": worst_sum, "share": share, "expected": expect})


def tape_expressions(n: int = 100, seed: int = 0, tol: float = 1e-4) -> SuiteResult:
    """Random smooth expressions over +, *, exp, log and smooth max against central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        ops = rng.integers(0, 5, 6)
        x0 = rng.uniform(0.5, 2.0, 3)

        def f(x):
            a, b, c = x[0], x[1], x[2]
            acc = a
            for op in ops:
                if op == 0:
                    acc = acc + b * c
                elif op == 1:
                    acc = acc * (0.5 + 0.1 * b)
                elif op == 2:
                    acc = ad.exp(acc * 0.1) + c
                elif op == 3:
                    acc = ad.log(acc * acc + 1.0) + a
                else:
                    acc = ad.logsumexp(ad.stack([acc, b * 2.0, c]) if isinstance(acc, ad.Var)
                                       else np.array([acc, b * 2.0, c]))
            return acc

        _, grad, _ = tape_gradient(f, x0)
        fd, _ = fd_gradient(f, x0, 1e-5)
        worst = max(worst, relative_error(grad, fd))
    return SuiteResult("tape", worst <= tol, f"{n} expressions, worst relative error {worst:.3g}", {"worst": worst})


# ---------------------------------------------------------------------------
# timing definitions and oracle


INV_LIB = '{"INV": [{"p": 10, "r": 2.0, "q": 2, "a": 1.0}, {"p": 8, "r": 1.0, "q": 4, "a": 2.0}]}'
CHAIN = """\
clock {clock}
port_in in
port_out out
gate U1 INV 0 1.0 1.0
gate U2 INV 1 3.0 1.0
net n1 in U1/A
net n2 U1/Y U2/A
net n3 U2/Y out
"""
CHAIN_SPF = "net n2 R=2.0 C=10.0\n"


def timing_examples() -> SuiteResult:
    problems = []
    for clock, want in ((100.0, 36.0), (50.0, -14.0)):
        graph, lib = parse_circuit(CHAIN.format(clock=clock), INV_LIB, CHAIN_SPF)
        ann = sta.analyze(sta.TimingGraph(graph, lib))
        if ann.wns != want:
            problems.append(f"chain at clock {clock}: WNS {ann.wns} != {want}")
    metrics = sta.gatewise_metrics(["U"], [_path(0, -120.0), _path(1, -85.0), _path(2, -80.0)])
    if metrics.wst["U"] != -120.0 or metrics.tot["U"] != -285.0:
        problems.append(f"gate-wise metrics {metrics.wst['U']}, {metrics.tot['U']} != -120, -285")
    return SuiteResult("sta-definitions", not problems, "; ".join(problems) or "chain and gate-wise examples hold")


def _path(pid: int, slack: float):
    from .model import TimingPath

    return TimingPath(pid, f"out{pid}", (f"n{pid}", "U", f"m{pid}"), ("U",), (f"n{pid}", f"m{pid}"), slack)


def oracle_spot_check(seed: int = 0) -> SuiteResult:
    from .bench import BenchSpec, exhaustive_size, generate_circuit, greedy_sensitivity_size

    spec = BenchSpec(seed=seed, n_gates=(5, 5), suite_size=3)
    bad = []
    for i in range(spec.suite_size):
        graph, lib = generate_circuit(spec, i).parse()
        opt = exhaustive_size(graph, lib)
        tns_opt = exhaustive_size(graph, lib, mode="tns")
        gr = greedy_sensitivity_size(graph, lib)
        if gr.score < opt.score - 1e-9 or gr.tns > tns_opt.tns + 1e-9:
            bad.append(i)
    return SuiteResult("oracle", not bad, f"greedy never beats the oracle on {spec.suite_size} instances"
                       if not bad else f"greedy beat the oracle on instances {bad}")


def roundtrip(n: int = 20, seed: int = 0) -> SuiteResult:
    from .bench import BenchSpec, generate_circuit

    spec = BenchSpec(seed=seed, n_gates=(4, 12))
    bad = []
    for i in range(n):
        c = generate_circuit(spec, i)
        graph, lib = c.parse()
        again, lib2 = parse_circuit(emit_netlist(graph), lib.to_json(), emit_parasitics(graph))
        if again != graph or lib2 != lib:
            bad.append(c.name)
    return SuiteResult("roundtrip", not bad, f"{n} generated circuits" if not bad else f"mismatch: {bad}")


def micro_circuits(n: int = 3, seed: int = 11) -> list[tuple[CircuitGraph, CellLibrary]]:
    from .bench import BenchSpec, generate_circuit

    spec = BenchSpec(seed=seed, n_gates=(5, 8))
    return [generate_circuit(spec, i).parse() for i in range(n)]


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "tape": lambda: tape_expressions(),
    "gradient": lambda: _gradient_suite(),
    "lse": lambda: lse_bound(),
    "gumbel": lambda: gumbel_checks(),
    "sta": lambda: timing_examples(),
    "oracle": lambda: oracle_spot_check(),
    "roundtrip": lambda: roundtrip(),
}


def _gradient_suite() -> SuiteResult:
    circuits = micro_circuits()
    fid = gradient_fidelity(circuits, 30)
    ste = ste_contract(circuits, 10)
    return SuiteResult("gradient", fid.ok and ste.ok, f"{fid.detail}; {ste.detail}")
