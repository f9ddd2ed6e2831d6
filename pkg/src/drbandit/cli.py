"""Experiment runner CLI.

Subcommands::

    drbandit run   <spec.json>   # execute every (policy, seed) pair
    drbandit sweep <spec.json> --delta ... --sigma ...
    drbandit bench <spec.json>   # per-event timing report

The spec is a JSON document::

    {
      "sim": { ... SimConfig fields ... },
      "policies": ["ols", "ucb"],
      "seeds": [0, 1, 2],
      "objective": "budget",
      "out_dir": "results",
      "population_seed": 0          # optional; defaults to sim.seed
    }

Progress goes to stderr, data to files; stdout carries one final summary
line.  Exit codes: 0 success, 2 config error, 3 runtime failure.
Environment overrides: DRBANDIT_SEED_OFFSET and DRBANDIT_OUT_DIR.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .sim import (
    SimConfig,
    generate_population,
    make_priors,
    run_policy,
)

__all__ = ["RunSpec", "parse_spec", "cmd_run", "cmd_sweep", "cmd_bench", "main"]

POLICIES = ("ols", "ucb", "random", "oracle")
OBJECTIVES = ("budget", "target", "target_one_sided", "budget_network")


class ConfigError(Exception):
    pass


@dataclasses.dataclass
class RunSpec:
    sim: SimConfig
    policies: list[str]
    seeds: list[int]
    objective: str
    out_dir: str
    population_seed: int
    network_file: str | None = None

    def to_dict(self) -> dict:
        return {
            "sim": dataclasses.asdict(self.sim),
            "policies": list(self.policies),
            "seeds": list(self.seeds),
            "objective": self.objective,
            "out_dir": self.out_dir,
            "population_seed": self.population_seed,
            "network_file": self.network_file,
        }


def parse_spec(doc: dict) -> RunSpec:
    """Validate a spec document; raises ConfigError naming the bad field."""
    if not isinstance(doc, dict):
        raise ConfigError("spec: top level must be an object")
    sim_doc = doc.get("sim", {})
    if not isinstance(sim_doc, dict):
        raise ConfigError("sim: must be an object")
    objective = doc.get("objective", sim_doc.get("objective", "budget"))
    if objective not in OBJECTIVES:
        raise ConfigError(f"objective: unknown value {objective!r}")
    if objective == "budget_network" and not doc.get("network_file"):
        raise ConfigError("network_file: required for the budget_network objective")
    sim_doc = dict(sim_doc)
    sim_doc["objective"] = objective if objective != "budget_network" else "budget"
    known = {f.name for f in dataclasses.fields(SimConfig)}
    for key in sim_doc:
        if key not in known:
            raise ConfigError(f"sim.{key}: unknown field")
    for key in ("d_range", "r_range", "budget_range", "context_range",
                "theta_range", "target_range"):
        if key in sim_doc:
            sim_doc[key] = tuple(sim_doc[key])
    try:
        sim = SimConfig(**sim_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sim: {exc}") from exc
    policies = doc.get("policies", ["ols"])
    if not policies:
        raise ConfigError("policies: at least one policy required")
    for p in policies:
        if p not in POLICIES:
            raise ConfigError(f"policies: unknown policy {p!r}")
    seeds = doc.get("seeds", [sim.seed])
    if not seeds:
        raise ConfigError("seeds: at least one seed required")
    seeds = [int(s) for s in seeds]
    out_dir = os.environ.get("DRBANDIT_OUT_DIR") or doc.get("out_dir", "results")
    return RunSpec(
        sim=sim,
        policies=list(policies),
        seeds=seeds,
        objective=objective,
        out_dir=str(out_dir),
        population_seed=int(doc.get("population_seed", sim.seed)),
        network_file=doc.get("network_file"),
    )


def load_spec(path: str) -> RunSpec:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"spec file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    return parse_spec(doc)


def _run_one(spec_dict: dict, policy: str, seed: int):
    """Worker: one (policy, seed) run; returns the trace."""
    spec = parse_spec(spec_dict)
    cfg = spec.sim
    network = None
    if spec.network_file:
        from .network import RadialNetwork

        with open(spec.network_file) as fh:
            network = RadialNetwork.from_dict(json.load(fh))
    pop_rng = np.random.default_rng(spec.population_seed)
    truth, pop = generate_population(cfg, pop_rng)
    priors = None
    if policy == "ols":
        prior_rng = np.random.default_rng((seed, 1))
        priors = make_priors(truth, cfg.delta, cfg.sigma, prior_rng)
    return run_policy(
        cfg, truth, pop, policy, priors=priors, seed=seed,
        record_probs=False, network=network,
    )


def _dispatch(spec: RunSpec, pairs, jobs: int):
    """Run (policy, seed) pairs, possibly in parallel; yields traces in order."""
    spec_dict = spec.to_dict()
    if jobs <= 1:
        return [_run_one(spec_dict, p, s) for p, s in pairs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_run_one, spec_dict, p, s) for p, s in pairs]
        return [f.result() for f in futures]


def _write_plot_data(path, traces):
    """Median and interquartile band of cumulative regret per policy."""
    by_policy: dict[str, list] = {}
    for tr in traces:
        by_policy.setdefault(tr.policy, []).append(tr.cum_regret)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "policy", "median_cum_regret", "q25", "q75"])
        for policy, curves in by_policy.items():
            if not curves or not curves[0]:
                continue
            arr = np.asarray(curves)
            med = np.median(arr, axis=0)
            q25 = np.quantile(arr, 0.25, axis=0)
            q75 = np.quantile(arr, 0.75, axis=0)
            for t in range(arr.shape[1]):
                writer.writerow(
                    [t + 1, policy, repr(float(med[t])), repr(float(q25[t])),
                     repr(float(q75[t]))]
                )


def cmd_run(spec: RunSpec, jobs: int = 1, seed_offset: int = 0) -> dict:
    os.makedirs(spec.out_dir, exist_ok=True)
    seeds = [s + seed_offset for s in spec.seeds]
    pairs = [(p, s) for p in spec.policies for s in seeds]
    print(f"running {len(pairs)} (policy, seed) pairs", file=sys.stderr)
    traces = _dispatch(spec, pairs, jobs)
    summary = {"objective": spec.objective, "runs": []}
    for tr in traces:
        name = f"trace_{tr.policy}_{tr.seed}.csv"
        tr.to_csv(os.path.join(spec.out_dir, name))
        summary["runs"].append(
            {
                "policy": tr.policy,
                "seed": tr.seed,
                "trace_file": name,
                "final_cum_regret": tr.final_cum_regret,
                "wall_time_s": tr.wall_time_s,
            }
        )
        print(
            f"  {tr.policy} seed={tr.seed} final_cum_regret="
            f"{tr.final_cum_regret:.4f} ({tr.wall_time_s:.1f}s)",
            file=sys.stderr,
        )
    _write_plot_data(os.path.join(spec.out_dir, "plot_data.csv"), traces)
    with open(os.path.join(spec.out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def cmd_sweep(
    spec: RunSpec,
    deltas: list[float],
    sigmas: list[float],
    jobs: int = 1,
    seed_offset: int = 0,
) -> list[dict]:
    """Grid over prior parameters; one run set per (delta, sigma) point."""
    if not deltas or not sigmas:
        raise ConfigError("sweep grid must be non-empty")
    os.makedirs(spec.out_dir, exist_ok=True)
    rows = []
    for delta in deltas:
        for sigma in sigmas:
            sub = RunSpec(
                sim=dataclasses.replace(spec.sim, delta=delta, sigma=sigma),
                policies=["ols"],
                seeds=spec.seeds,
                objective=spec.objective,
                out_dir=os.path.join(
                    spec.out_dir, f"delta{delta:g}_sigma{sigma:g}"
                ),
                population_seed=spec.population_seed,
                network_file=spec.network_file,
            )
            print(f"sweep point delta={delta} sigma={sigma}", file=sys.stderr)
            summary = cmd_run(sub, jobs=jobs, seed_offset=seed_offset)
            finals = [r["final_cum_regret"] for r in summary["runs"]]
            med = statistics.median(finals)
            q25, q75 = np.quantile(finals, [0.25, 0.75])
            rows.append(
                {
                    "delta": delta,
                    "sigma": sigma,
                    "median_final_cum_regret": med,
                    "iqr": float(q75 - q25),
                }
            )
    with open(os.path.join(spec.out_dir, "sweep.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["delta", "sigma", "median_final_cum_regret", "iqr"])
        for row in rows:
            writer.writerow(
                [row["delta"], row["sigma"],
                 repr(row["median_final_cum_regret"]), repr(row["iqr"])]
            )
    return rows


def cmd_bench(spec: RunSpec, n_events: int = 50, seed_offset: int = 0) -> dict:
    """Mean per-event solver and full-round timings over >= 50 events."""
    cfg = dataclasses.replace(spec.sim, horizon=max(n_events, 50))
    pop_rng = np.random.default_rng(spec.population_seed)
    truth, pop = generate_population(cfg, pop_rng)
    priors = make_priors(
        truth, cfg.delta, cfg.sigma, np.random.default_rng((cfg.seed, 1))
    )
    t0 = time.perf_counter()
    trace = run_policy(
        cfg, truth, pop, "ols", priors=priors,
        seed=cfg.seed + seed_offset, record_probs=False,
    )
    total = time.perf_counter() - t0
    n = len(trace)
    report = {
        "n_customers": cfg.n_customers,
        "n_events": n,
        "mean_solver_time_s": trace.solver_time_s / n / 2,  # policy + oracle solve
        "mean_learn_time_s": trace.learn_time_s / n,
        "mean_round_time_s": total / n,
    }
    return report


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="drbandit", description="Budgeted customer-selection bandit runner"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("spec", help="path to a JSON run spec")
        p.add_argument("--seed-offset", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--out-dir", default=None)

    p_run = sub.add_parser("run", help="execute every (policy, seed) pair")
    common(p_run)
    p_sweep = sub.add_parser("sweep", help="grid over prior parameters")
    common(p_sweep)
    p_sweep.add_argument("--delta", type=float, nargs="+", required=True)
    p_sweep.add_argument("--sigma", type=float, nargs="+", required=True)
    p_bench = sub.add_parser("bench", help="timing report")
    common(p_bench)
    p_bench.add_argument("--events", type=int, default=50)

    args = parser.parse_args(argv)
    try:
        spec = load_spec(args.spec)
        if args.out_dir:
            spec.out_dir = args.out_dir
        offset = args.seed_offset
        if offset is None:
            offset = int(os.environ.get("DRBANDIT_SEED_OFFSET", "0"))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "run":
            summary = cmd_run(spec, jobs=args.jobs, seed_offset=offset)
            finals = [r["final_cum_regret"] for r in summary["runs"]]
            print(
                f"run complete: {len(summary['runs'])} runs, "
                f"median final cumulative regret "
                f"{statistics.median(finals) if finals else 0.0:.4f}"
            )
        elif args.command == "sweep":
            rows = cmd_sweep(
                spec, args.delta, args.sigma, jobs=args.jobs, seed_offset=offset
            )
            print(f"sweep complete: {len(rows)} grid points -> sweep.csv")
        elif args.command == "bench":
            report = cmd_bench(spec, n_events=args.events, seed_offset=offset)
            print(
                f"bench: N={report['n_customers']} "
                f"solver {report['mean_solver_time_s']*1e3:.1f} ms/event, "
                f"learning {report['mean_learn_time_s']*1e3:.1f} ms/event, "
                f"round {report['mean_round_time_s']*1e3:.1f} ms/event"
            )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure surface
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
