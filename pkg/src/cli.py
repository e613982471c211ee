#!/usr/bin/env python3
"""
varlat command line

What: One entry point for simulations, live traces, trace analysis, iterative
      refinement, policy comparisons, theta tuning and the single-queue menu
      harness
How: argparse subcommands; each command runs inside RunMonitor.monitor_operation
     and writes its documents under --out. Errors map to exit codes:
     0 success, 2 usage/config/input, 3 runtime abort.

Usage:
    python -m src.cli sim configs/contended.toml
    python -m src.cli compare configs/contended.toml --policies fcfs,vats --seeds 20
    python -m src.cli compare configs/bufpool_contended.toml --vary bufpool.mode --values baseline,llu
    python -m src.cli analyze traces/run-0-*.vtrace traces/run-0-*.vreg --k 5 --d 0.05
    python -m src.cli refine configs/contended_live.toml --k 5 --d 0.05
    python -m src.cli tune-theta configs/contended.toml --grid 0,0.25,0.5,0.75,1
    python -m src.cli menu --menus 50 --trials 10000
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from multiprocessing import Pool
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.collector import ProfileSet
from src.config import SCHEDULERS, SimConfig, apply_override, load_config, load_environment
from src.errors import EXIT_OK, EXIT_USAGE, ConfigError, SaturationError, VarlatError, exit_code_for
from src.lockmgr import SchedulerPolicy, tune_theta
from src.monitoring import RunMonitor, setup_logging
from src.refine import run_refinement
from src.reporting import (comparison_frame, format_table, row_from_latencies, write_csv, write_json,
                           write_table)
from src.testbed import LiveRunner, build_registry, run_live
from src.tracefmt import build_invocations, read_registry, read_trace
from src.vartree import SelectionParams, build_variance_tree, factor_frame, factor_report, select_factors
from src.workload import RemainingTimeModel, evaluate_menus, generate_menu, run_sim, simulate_pool

logger = logging.getLogger(__name__)

DEFAULT_OUT = "results"


def _split(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in _split(text)]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _load(args: argparse.Namespace) -> SimConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = apply_override(config, "seed", args.seed)
    return config


def _sim_latencies(config: SimConfig) -> np.ndarray:
    return run_sim(config).latencies_ns


def _sweep(configs: Sequence[SimConfig], jobs: int) -> List[np.ndarray]:
    """Latency vectors of independent runs, in input order."""
    if jobs > 1 and len(configs) > 1:
        with Pool(min(jobs, len(configs))) as pool:
            return pool.map(_sim_latencies, configs)
    return [_sim_latencies(c) for c in configs]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_sim(args: argparse.Namespace) -> int:
    config = _load(args)
    result = run_sim(config)
    out = Path(args.out)
    target = Path(args.output) if args.output else out / "sim.json"
    write_json(result.to_dict(), target)
    write_table(result.phase_breakdown(), out / "phases", args.format)
    summary = result.summary
    print(f"committed={result.committed} mean_ns={summary.mean_ns:.1f} variance_ns2={summary.variance_ns2:.6g} "
          f"p99_ns={summary.p99_ns:.1f} l2={summary.lp_norm.value:.6g} -> {target}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    """
    Variant comparison averaged over seeds

    Variants are either scheduler policies (--policies) or values of any
    config key (--vary/--values); the first variant is the baseline.
    """
    config = _load(args)
    if args.vary:
        if not args.values:
            raise ConfigError("--vary needs --values")
        variants = [(f"{args.vary}={value}", apply_override(config, args.vary, value))
                    for value in _split(args.values)]
    else:
        names = _split(args.policies)
        unknown = [n for n in names if n not in SCHEDULERS]
        if unknown:
            raise ConfigError(f"unknown policies {unknown}; choose from {SCHEDULERS}")
        variants = [(name, apply_override(config, "scheduler", name)) for name in names]
    if len(variants) < 2:
        raise ConfigError("compare needs at least two variants")
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")

    seeds = [config.seed + i for i in range(args.seeds)]
    rows = []
    for label, variant in variants:
        runs = _sweep([replace(variant, seed=s) for s in seeds], args.jobs)
        rows.append(row_from_latencies(label, runs))
        logger.info(f"Compared {label} over {len(seeds)} seeds")

    frame = comparison_frame(rows)
    out = Path(args.out)
    write_csv(frame, out / "compare.csv")
    write_json({"seeds": seeds, "baseline": rows[0].label, "rows": frame.to_dict(orient="records")},
               out / "compare.json")
    print(format_table(frame))
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    registry = read_registry(args.registry)
    events, spills = read_trace(args.trace)
    forest = build_invocations(events, registry, spills)
    if args.root is not None:
        root = registry.resolve(args.root)
    else:
        roots = registry.roots()
        if len(roots) != 1:
            raise ConfigError(f"registry declares {len(roots)} root functions; pass --root")
        root = roots[0]
    tree = build_variance_tree(forest, root)
    factors = select_factors(tree, SelectionParams(args.k, args.d))
    out = Path(args.out)
    write_json(factor_report(tree, factors, registry), out / "factors.json")
    frame = factor_frame(factors, registry)
    write_csv(frame, out / "factors.csv")
    print(format_table(frame) if len(frame) else "no factor reaches the contribution threshold")
    return EXIT_OK


def cmd_refine(args: argparse.Namespace) -> int:
    config = _load(args)
    trace_root = Path(args.trace_dir) if args.trace_dir else load_environment().trace_dir
    runner = LiveRunner(config, trace_root, extra_probes=args.extra_probes)
    result = run_refinement(args.root, runner, SelectionParams(args.k, args.d), args.max_iterations)
    out = Path(args.out)
    for report in result.iterations:
        write_json(report.to_dict(), out / f"iter-{report.iteration}.json")
    final = result.final_report()
    write_json(final, out / "final.json")
    for rank, factor in enumerate(final["factors"], start=1):
        print(f"{rank}. {factor['identity']} contribution={factor['contribution']:.3f} score={factor['score']:.6g}")
    print(f"{len(result.iterations)} iterations -> {out / 'final.json'}")
    return EXIT_OK


def cmd_live(args: argparse.Namespace) -> int:
    config = _load(args)
    registry = build_registry(args.extra_probes)
    if args.profile:
        try:
            enabled = ProfileSet(registry.resolve(name) for name in _split(args.profile))
        except KeyError as e:
            raise ConfigError(f"unknown function in --profile: {e}") from None
    else:
        enabled = ProfileSet(registry.entries)
    directory = Path(args.trace_dir) if args.trace_dir else load_environment().trace_dir
    result = run_live(config, enabled, directory, iteration=args.iteration, registry=registry)
    write_json(result.to_dict(), Path(args.out) / "live.json")
    print(f"trace={result.trace_path} registry={result.registry_path} events={result.events}")
    return EXIT_OK


def cmd_tune_theta(args: argparse.Namespace) -> int:
    config = apply_override(_load(args), "scheduler", "vats")

    def simulate(theta: float) -> np.ndarray:
        return _sim_latencies(apply_override(config, "vats.theta", theta))

    sweep = tune_theta(simulate, _floats(args.grid), args.tolerance, progress=args.progress)
    write_table(sweep.table, Path(args.out) / "theta", args.format)
    print(format_table(sweep.table))
    print(f"selected theta={sweep.best_theta}")
    return EXIT_OK


def cmd_menu(args: argparse.Namespace) -> int:
    """Monte Carlo p-performance of scheduling policies on random single-queue menus."""
    if not 1 <= args.min_txns <= args.max_txns:
        raise ConfigError("menu sizes must satisfy 1 <= --min-txns <= --max-txns")
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    menus = [generate_menu(rng, int(rng.integers(args.min_txns, args.max_txns + 1)))
             for _ in range(args.menus)]
    try:
        model = RemainingTimeModel(args.distribution, args.mean, args.sigma)
        policies = [SchedulerPolicy(name, theta=0.0, seed=seed) for name in _split(args.policies)]
    except ValueError as e:
        raise ConfigError(str(e)) from None
    table = evaluate_menus(menus, model, policies, args.trials, args.p, seed=seed, progress=args.progress)
    write_table(table, Path(args.out) / "menu", args.format)
    overview = table.groupby("policy", sort=False)["mean"].mean().reset_index()
    print(format_table(overview))
    return EXIT_OK


def cmd_pool(args: argparse.Namespace) -> int:
    config = _load(args)
    rows = []
    for mode in _split(args.modes):
        result = simulate_pool(config.bufpool, seed=config.seed, mode=mode)
        wait = result.wait_summary
        rows.append({"mode": mode, "hit_rate": result.stats.hit_rate, "make_young": result.stats.make_young,
                     "deferred": result.stats.deferred, "wait_mean_ns": wait.mean_ns,
                     "wait_variance_ns2": wait.variance_ns2, "wait_p99_ns": wait.p99_ns,
                     "wait_max_ns": float(max(result.stats.wait_ns, default=0))})
    frame = pd.DataFrame(rows)
    write_table(frame, Path(args.out) / "pool", args.format)
    print(format_table(frame))
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "sim": cmd_sim,
    "compare": cmd_compare,
    "analyze": cmd_analyze,
    "refine": cmd_refine,
    "live": cmd_live,
    "tune-theta": cmd_tune_theta,
    "menu": cmd_menu,
    "pool": cmd_pool,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varlat", description="Latency variance profiling and scheduling toolkit",
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--seed", type=int, default=None, help="Override the config seed")
    parser.add_argument("--out", default=DEFAULT_OUT, help="Output directory")
    parser.add_argument("--format", choices=["csv", "json"], default="csv", help="Table format")
    parser.add_argument("--log-level", default=None, help="Console log level (default VARLAT_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sim", help="Run one discrete-event simulation")
    p.add_argument("config", help="TOML workload config")
    p.add_argument("--output", default=None, help="SimResult JSON path (default <out>/sim.json)")

    p = sub.add_parser("compare", help="Compare scheduler policies or config variants over seeds")
    p.add_argument("config")
    p.add_argument("--policies", default="fcfs,vats", help="Comma-separated policies; first is the baseline")
    p.add_argument("--vary", default=None, help="Dotted config key to vary instead of the policy")
    p.add_argument("--values", default=None, help="Comma-separated values for --vary")
    p.add_argument("--seeds", type=int, default=5, help="Seeds per variant")
    p.add_argument("--jobs", type=int, default=1, help="Parallel simulation processes")

    p = sub.add_parser("analyze", help="Decompose a trace into a variance tree and rank factors")
    p.add_argument("trace")
    p.add_argument("registry")
    p.add_argument("--root", default=None, help="Root function name or id")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--d", type=float, default=0.05)

    p = sub.add_parser("refine", help="Iteratively refine the profile on the live testbed")
    p.add_argument("config")
    p.add_argument("--root", default="dispatch")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--d", type=float, default=0.05)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--extra-probes", type=int, default=0)
    p.add_argument("--trace-dir", default=None, help="Trace directory (default VARLAT_TRACE_DIR)")

    p = sub.add_parser("live", help="Run the live testbed once and write a trace")
    p.add_argument("config")
    p.add_argument("--profile", default=None, help="Comma-separated functions to enable (default all)")
    p.add_argument("--extra-probes", type=int, default=0)
    p.add_argument("--iteration", type=int, default=0)
    p.add_argument("--trace-dir", default=None)

    p = sub.add_parser("tune-theta", help="Sweep the VATS activation threshold")
    p.add_argument("config")
    p.add_argument("--grid", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p.add_argument("--tolerance", type=float, default=0.05)
    p.add_argument("--progress", action="store_true")

    p = sub.add_parser("menu", help="Monte Carlo p-performance on random single-queue menus")
    p.add_argument("--menus", type=int, default=50)
    p.add_argument("--min-txns", type=int, default=2)
    p.add_argument("--max-txns", type=int, default=10)
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--distribution", default="exponential", choices=["exponential", "lognormal", "constant"])
    p.add_argument("--mean", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--policies", default="fcfs,vats,random")
    p.add_argument("--progress", action="store_true")

    p = sub.add_parser("pool", help="Buffer-pool contention run per LRU update mode")
    p.add_argument("config")
    p.add_argument("--modes", default="baseline,llu")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK

    try:
        env = load_environment()
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    setup_logging(env.log_dir, args.log_level or env.log_level)
    monitor = RunMonitor(env.log_dir)

    try:
        with monitor.monitor_operation(args.command, "cli"):
            return COMMANDS[args.command](args)
    except VarlatError as e:
        print(f"error: {e}", file=sys.stderr)
        if isinstance(e, SaturationError):
            print(json.dumps(e.diagnostic, indent=2, default=str), file=sys.stderr)
        return exit_code_for(e)
    except (KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)
    finally:
        monitor.shutdown()


if __name__ == "__main__":
    sys.exit(main())
