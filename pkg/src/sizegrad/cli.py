"""Command-line entry point: ``sizegrad <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 input or validation error,
3 runtime failure (including failing ``verify`` suites).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, bench, checks, optimizer, sta
from .layout import DEFAULT_SCALES, PhysicalConfig, build_grids, dump_grids_csv
from .model import CircuitError, emit_sizing_changelist, load_design

log = logging.getLogger("sizegrad")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# argument groups


def _scales(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(sorted(int(t) for t in text.split(",") if t.strip()))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad scale list {text!r}") from None
    if not vals or any(v < 1 or v & (v - 1) for v in vals):
        raise argparse.ArgumentTypeError("scales must be powers of two")
    return vals


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads, 0 = auto (default: $SIZEGRAD_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")


def _add_design(p: argparse.ArgumentParser) -> None:
    p.add_argument("netlist", help=".ckt netlist")
    p.add_argument("--lib", help="library JSON (default: <netlist stem>.lib.json)")
    p.add_argument("--spf", help="parasitics (default: <netlist stem>.spf if present)")
    p.add_argument("--pl", help="placement override: '<gate> <x> <y>' lines")


def _add_physical(p: argparse.ArgumentParser) -> None:
    p.add_argument("--no-physical", action="store_true", help="disable the congestion/density wire penalty")
    p.add_argument("--alpha", type=float, default=0.5, help="congestion weight (default 0.5)")
    p.add_argument("--beta", type=float, default=1.0, help="overfill weight (default 1.0)")
    p.add_argument("--d0", type=float, default=0.8, help="density threshold (default 0.8)")
    p.add_argument("--penalty-scale", type=int, default=4, help="penalty grid resolution (default 4)")


def _add_paths(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k-max", type=int, default=8, help="worst paths kept per endpoint, 0 = all (default 8)")
    p.add_argument("--threshold", type=float, default=0.0, help="path slack threshold in ps (default 0)")


def _add_weights(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mu-tau", type=float, default=0.5, help="TNS target weight (default 0.5)")
    p.add_argument("--mu-wns", type=float, default=0.5, help="WNS target weight (default 0.5)")


def _add_sizer(p: argparse.ArgumentParser) -> None:
    _add_weights(p)
    p.add_argument("--gamma", type=float, default=10.0, help="smoothing temperature in ps (default 10)")
    p.add_argument("--lambda", dest="lam", type=float, default=5.0, help="Gumbel temperature (default 5)")
    p.add_argument("--eta", type=float, default=0.25, help="mean per-gate rate in size steps (default 0.25)")
    p.add_argument("--max-iters", type=int, default=200, help="iteration cap (default 200)")
    p.add_argument("--patience", type=int, default=20, help="stop after this many non-improving iterations")
    p.add_argument("--mode", choices=("analytical", "learned"), default="analytical")
    p.add_argument("--model", help="surrogate checkpoint (learned mode)")
    p.add_argument("--rates", choices=("gumbel", "uniform"), default="gumbel", help="per-gate rate scheme")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sizegrad", description="Gradient-descent discrete gate sizing.")
    parser.add_argument("--version", action="version", version=f"sizegrad {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("sta", aliases=["analyze"], help="static timing report")
    _add_design(p)
    _add_physical(p)
    _add_paths(p)
    p.add_argument("--json", action="store_true", help="emit the full annotation as JSON")
    p.add_argument("--paths", type=int, default=5, help="paths listed in the text report (default 5)")
    p.add_argument("--dump-grids", metavar="DIR", help="write layout grids as CSV")
    p.add_argument("--layout-scales", type=_scales, default=DEFAULT_SCALES,
                   help="comma-separated grid scales for --dump-grids, e.g. 1,2,4,8")
    p.add_argument("--out", help="write the report here instead of stdout")
    _add_common(p)

    p = sub.add_parser("size", help="run the gradient sizer")
    _add_design(p)
    _add_physical(p)
    _add_paths(p)
    _add_sizer(p)
    p.add_argument("--out", help="output directory (changelist.txt, trajectory.csv, run.json)")
    _add_common(p)

    p = sub.add_parser("train", help="train the learned surrogate on a generated toy set")
    p.add_argument("--spec", help="BenchSpec JSON for the training circuits")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.0004)
    p.add_argument("--no-gradient-labels", action="store_true", help="train on slack labels only")
    p.add_argument("--layout-scales", type=_scales, default=DEFAULT_SCALES,
                   help="comma-separated grid scales of the physical features")
    p.add_argument("--out", required=True, help="output directory (model.json, history.csv, run.json)")
    _add_physical(p)
    _add_common(p)

    p = sub.add_parser("oracle", help="exhaustive sizing of one small design")
    _add_design(p)
    _add_physical(p)
    _add_weights(p)
    p.add_argument("--objective", choices=("weighted", "tns", "wns"), default="weighted")
    p.add_argument("--budget", type=int, default=2 ** 20, help="max assignments (default 2^20)")
    p.add_argument("--out", help="output directory (changelist.txt, run.json)")
    _add_common(p)

    p = sub.add_parser("bench", help="run the benchmark suite")
    p.add_argument("--spec", help="BenchSpec JSON (default: built-in 8-gate suite)")
    p.add_argument("--methods", default="initial,greedy,grad,exhaustive",
                   help="comma-separated subset of initial,greedy,grad,exhaustive")
    p.add_argument("--sweep-mu", action="store_true", help="sweep mu_tau over 0.1..0.9 with mu_wns = 1 - mu_tau")
    p.add_argument("--budget", type=int, default=2 ** 20)
    p.add_argument("--out", required=True, help="output directory (results.csv, summary.md, run.json)")
    _add_physical(p)
    _add_paths(p)
    _add_sizer(p)
    _add_common(p)

    p = sub.add_parser("gen", help="generate benchmark circuits")
    p.add_argument("--spec", help="BenchSpec JSON")
    p.add_argument("--count", type=int, help="number of circuits (default: spec suite_size)")
    p.add_argument("--gates", type=int, help="gate count (overrides the spec range)")
    p.add_argument("--tightness", type=float, help="clock as a fraction of the unoptimized critical delay")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)

    p = sub.add_parser("verify", help="run the built-in property suites")
    p.add_argument("--list", action="store_true", help="list suites without running them")
    p.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    p.add_argument("--break-ste", action="store_true", help="fault injection: zero the rounding backward multiplier")
    _add_common(p)
    return parser


# ---------------------------------------------------------------------------
# helpers


def resolve_threads(value: int | None) -> int:
    if value is None:
        env = os.environ.get("SIZEGRAD_THREADS", "")
        try:
            value = int(env) if env else 1
        except ValueError:
            raise UsageError(f"SIZEGRAD_THREADS must be an integer, got {env!r}") from None
    if value < 0:
        raise UsageError("--threads must be >= 0")
    return value or (os.cpu_count() or 1)


def physical_config(args) -> PhysicalConfig:
    return PhysicalConfig(enabled=not args.no_physical, alpha=args.alpha, beta=args.beta, d0=args.d0,
                          scale=args.penalty_scale)


def sizer_config(args) -> optimizer.SizerConfig:
    try:
        weights = optimizer.TargetWeights(args.mu_tau, args.mu_wns, args.gamma, args.lam, args.eta)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return optimizer.SizerConfig(weights=weights, max_iters=args.max_iters, patience=args.patience, seed=args.seed,
                                 mode=args.mode, rates=args.rates, slack_threshold=args.threshold,
                                 k_max=args.k_max or None, physical=physical_config(args))


def load(args):
    for path in (args.netlist, args.lib, args.spf, args.pl):
        if path and not Path(path).exists():
            raise InputError(f"no such file: {path}")
    lib = args.lib or str(Path(args.netlist).with_suffix("").with_suffix(".lib.json"))
    if not Path(lib).exists():
        raise InputError(f"no such file: {lib}")
    return load_design(args.netlist, args.lib, args.spf, args.pl)


def load_spec(path: str | None) -> bench.BenchSpec:
    if not path:
        return bench.BenchSpec()
    p = Path(path)
    if not p.exists():
        raise InputError(f"no such file: {path}")
    try:
        return bench.BenchSpec.from_dict(json.loads(p.read_text()))
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _jsonable(v):
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    return v


def write_run_json(out: Path, argv: list[str], args, extra: dict | None = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    cfg = {k: _jsonable(v) for k, v in vars(args).items() if k != "func"}
    doc = {
        "command": args.command,
        "argv": argv,
        "config": cfg,
        "seed": getattr(args, "seed", None),
        "versions": {"sizegrad": __version__, "python": platform.python_version(), "numpy": np.__version__},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        doc.update(_jsonable(extra))
    path = out / "run.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_sta(args, argv) -> int:
    graph, library = load(args)
    tg = sta.TimingGraph(graph, library, physical_config(args))
    ann = sta.analyze(tg, None, args.threshold, args.k_max or None)
    text = json.dumps(ann.to_json(), indent=2, sort_keys=True) + "\n" if args.json else sta.report(tg, ann, args.paths)
    if args.dump_grids:
        grids = build_grids(graph, library, scales=args.layout_scales)
        dump_grids_csv(grids, args.dump_grids)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _load_model(args):
    from .surrogate.learned import SurrogateModel

    if args.mode != "learned":
        return None
    if not args.model:
        raise UsageError("--mode learned needs --model <checkpoint.json>")
    path = Path(args.model)
    if not path.exists():
        raise InputError(f"no such file: {args.model}")
    try:
        return SurrogateModel.from_json(path.read_text())
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"{args.model}: {exc}") from None


def cmd_size(args, argv) -> int:
    graph, library = load(args)
    cfg = sizer_config(args)
    model = _load_model(args)
    res = optimizer.size_loop(graph, library, cfg, model)
    changelist = emit_sizing_changelist(res.initial, res.final, graph)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "changelist.txt").write_text(changelist)
        (out / "trajectory.csv").write_text(res.trajectory_csv())
        write_run_json(out, argv, args, {"result": {"initial": res.initial_metrics, "final": res.final_metrics,
                                                    "iterations": res.iterations, "stop_reason": res.stop_reason,
                                                    "errors": res.errors}})
    else:
        sys.stdout.write(changelist)
    log.info("initial %s -> final %s after %d iterations (%s)", res.initial_metrics, res.final_metrics,
             res.iterations, res.stop_reason)
    return EXIT_OK


def cmd_train(args, argv) -> int:
    from .surrogate import learned

    spec = load_spec(args.spec) if args.spec else bench.BenchSpec(seed=args.seed, n_gates=(6, 16), suite_size=20)
    phys = physical_config(args)
    circuits = [c.parse() for c in bench.generate_suite(spec, phys)]
    cells = sorted({name for _, lib in circuits for name in lib.cell_names})
    model = learned.SurrogateModel(cells, learned.ModelConfig(scales=args.layout_scales), seed=args.seed)

    def op_sizer(graph, library):
        tg = sta.TimingGraph(graph, library, phys)
        if np.prod(tg.n_sizes.astype(float)) <= 2 ** 16:
            return bench.exhaustive_size(graph, library, physical=phys).sizes
        return bench.greedy_sensitivity_size(graph, library, physical=phys).sizes

    samples = learned.build_dataset(circuits, model, op_sizer, phys)
    res = learned.train(model, samples, args.epochs, args.lr, args.seed, not args.no_gradient_labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.json").write_text(model.to_json())
    (out / "history.csv").write_text("epoch,loss\n" + "".join(f"{k},{v!r}\n" for k, v in enumerate(res.history)))
    write_run_json(out, argv, args, {"spec": asdict(spec), "initial_loss": res.initial_loss,
                                     "final_loss": res.final_loss})
    print(f"loss {res.initial_loss:.6g} -> {res.final_loss:.6g} ({res.final_loss / max(res.initial_loss, 1e-300):.3f}x)")
    return EXIT_OK


def cmd_oracle(args, argv) -> int:
    graph, library = load(args)
    weights = optimizer.TargetWeights(args.mu_tau, args.mu_wns)
    try:
        res = bench.exhaustive_size(graph, library, weights, physical_config(args), args.objective, args.budget)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    changelist = emit_sizing_changelist(graph.assignment(), res.sizes, graph)
    summary = f"# evaluated {res.evaluated}; wns {res.wns:.6g} tns {res.tns:.6g} nve {res.nve} score {res.score:.6g}\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "changelist.txt").write_text(changelist)
        write_run_json(out, argv, args, {"result": {"wns": res.wns, "tns": res.tns, "nve": res.nve,
                                                    "score": res.score, "evaluated": res.evaluated}})
    sys.stdout.write(summary + changelist)
    return EXIT_OK


def cmd_bench(args, argv) -> int:
    spec = load_spec(args.spec)
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    unknown = set(methods) - set(bench.METHODS)
    if unknown:
        raise UsageError(f"unknown methods: {', '.join(sorted(unknown))}")
    cfg = bench.SuiteConfig(spec, methods, sizer_config(args), args.sweep_mu, exhaustive_budget=args.budget,
                            threads=resolve_threads(args.threads))
    rows = bench.run_suite(cfg)
    out = Path(args.out)
    bench.write_suite(rows, out)
    failed = sum(1 for r in rows if r["error"])
    write_run_json(out, argv, args, {"spec": asdict(spec), "rows": len(rows), "failed_rows": failed})
    sys.stdout.write(bench.rows_to_markdown(rows))
    return EXIT_OK


def cmd_gen(args, argv) -> int:
    spec = load_spec(args.spec)
    changes = {"seed": args.seed}
    if args.count is not None:
        changes["suite_size"] = args.count
    if args.gates is not None:
        changes["n_gates"] = (args.gates, args.gates)
    if args.tightness is not None:
        changes["tightness"] = args.tightness
    try:
        spec = replace(spec, **changes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    for c in bench.generate_suite(spec):
        print(c.write(out))
    (out / "spec.json").write_text(bench.spec_to_json(spec) + "\n")
    return EXIT_OK


def cmd_verify(args, argv) -> int:
    names = list(checks.SUITES)
    if args.list:
        for name in names:
            print(name)
        return EXIT_OK
    chosen = args.suite or names
    unknown = [s for s in chosen if s not in checks.SUITES]
    if unknown:
        raise UsageError(f"unknown suites: {', '.join(unknown)}")
    saved = optimizer.STE_MULTIPLIER
    if args.break_ste:
        optimizer.STE_MULTIPLIER = 0.0
    failed = 0
    try:
        for name in chosen:
            try:
                res = checks.SUITES[name]()
            except Exception as exc:  # a crashing suite is a failing suite
                res = checks.SuiteResult(name, False, f"raised {type(exc).__name__}: {exc}")
            failed += not res.ok
            print(f"{'PASS' if res.ok else 'FAIL'} {name}: {res.detail}")
    finally:
        optimizer.STE_MULTIPLIER = saved
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


COMMANDS = {"sta": cmd_sta, "analyze": cmd_sta, "size": cmd_size, "train": cmd_train, "oracle": cmd_oracle,
            "bench": cmd_bench, "gen": cmd_gen, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help()
            return EXIT_USAGE
        logging.basicConfig(level=max(logging.DEBUG, logging.WARNING - 10 * args.verbose),
                            format="%(levelname)s %(name)s: %(message)s")
        if hasattr(args, "threads"):
            resolve_threads(args.threads)
        return COMMANDS[args.command](args, argv)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, CircuitError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
