"""Experiment harness: ``market <command> --config <path> [--seed N] [--out DIR]``.

Commands cover the benchmark pipelines end to end: trajectory simulation,
the pricing benchmark (exact curve vs the three heuristics, in and out of
sample), the prior-learning grid, the discovery-driver comparison, the
cost-of-estimation-error sweep, and the full discovery-to-revenue
pipeline. Every command is deterministic given (config, seed) and writes
CSV outputs plus a manifest with per-file checksums.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .buyer import (
    Population,
    PriceCurve,
    SearchCost,
    simulate_buyer,
    solve_optimal_stopping,
)
from .discovery import (
    StoppingRule,
    run_automl_only,
    run_data_all,
    run_data_alt,
    run_discovery,
    trace_to_trajectory,
)
from .experiments import (
    PRIOR_FAMILIES,
    drifting_chain,
    generate_learning_setup,
    make_grid,
    make_prior,
    planted_env,
    random_chain,
    random_types,
    stage_rng,
)
from .grid import (
    MarkovChain,
    estimate_chain,
    read_trajectories_csv,
    sample_trajectories,
    write_trajectories_csv,
)
from .learning import CeeTemplate, cee, perturb_chain, perturb_simplex, run_learning
from .milp import MIPConfig
from .pricing import (
    PricingInstance,
    evaluate_revenue,
    independent_pricing,
    jiggle_pricing,
    shift_pricing,
    solve_optimal_pricing,
)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage


def _fmt(x: float) -> str:
    return f"{x:.12g}"


class Manifest:
    """Config hash, per-output checksums and stage wall-times."""

    def __init__(self, command: str, config: dict, seed: int):
        canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
        self.data = {
            "command": command,
            "tool_version": __version__,
            "seed": seed,
            "config_hash": hashlib.sha256(canon.encode()).hexdigest(),
            "outputs": {},
            "wall_times_s": {},
        }

    def add_output(self, path: str) -> None:
        with open(path, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        self.data["outputs"][os.path.basename(path)] = digest

    def time_stage(self, name: str, seconds: float) -> None:
        self.data["wall_times_s"][name] = round(seconds, 3)

    def write(self, out_dir: str, command: str) -> str:
        path = os.path.join(out_dir, f"{command}_manifest.json")
        with open(path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
        return path


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _mip_config(params: dict) -> MIPConfig:
    return MIPConfig(
        gap_tol=params.get("milp_gap_tol", 1e-9),
        node_limit=params.get("milp_node_limit", 200_000),
        time_budget=params.get("milp_time_budget", 30.0),
        max_tableau_cells=params.get("milp_max_tableau_cells", 40_000_000),
    )


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(params: dict, seed: int, out_dir: str, manifest: Manifest) -> None:
    m = int(params.get("m", 100))
    if m < 1:
        raise StageError("simulate", "empty sample requested")
    horizon = int(params.get("horizon", 10))
    grid = make_grid(int(params.get("grid_size", 20)), params.get("grid_lo", 0.0))
    rng = stage_rng(seed, "simulate/chain")
    kind = params.get("chain", "drifting")
    if kind == "drifting":
        chain = drifting_chain(grid, horizon, rng)
    elif kind == "random":
        chain = random_chain(grid, horizon, rng, params.get("chain_concentration", 1.0))
    else:
        raise StageError("simulate", f"unknown chain kind {kind!r}")
    sample = sample_trajectories(chain, m, stage_rng(seed, "simulate/sample"))

    traj_path = os.path.join(out_dir, "simulate_trajectories.csv")
    write_trajectories_csv(traj_path, sample, grid)
    est = estimate_chain(sample, grid)
    chain_path = os.path.join(out_dir, "simulate_chain.json")
    with open(chain_path, "w") as fh:
        fh.write(est.to_json())
    manifest.add_output(traj_path)
    manifest.add_output(chain_path)


# ---------------------------------------------------------------------------
# price


def _price_one_instance(args) -> tuple[int, list[list], dict]:
    (i, seed, params) = args
    n_types = int(params.get("n_types", 20))
    n_metrics = int(params.get("n_metrics", 20))
    horizon = int(params.get("horizon", 8))
    m = int(params.get("m", 100))
    rng = stage_rng(seed, f"price/instance/{i}")

    if params.get("trajectories") and params.get("chain"):
        with open(params["chain"]) as fh:
            chain = MarkovChain.from_json(fh.read())
        grid = chain.grid
        sample = tuple(read_trajectories_csv(params["trajectories"], grid))
    else:
        grid = make_grid(n_metrics, params.get("grid_lo", 0.0))
        chain = random_chain(grid, horizon, rng, params.get("chain_concentration", 1.0))
        sample = tuple(sample_trajectories(chain, m, rng))
    types = random_types(n_types, len(grid), rng, params.get("value_bound", 1.0))
    pop = Population(types, rng.dirichlet(np.ones(n_types)))
    instance = PricingInstance(
        pop, sample, SearchCost(params.get("cost", 0.0)),
        oos_subset_rule=params.get("oos_subset_rule", "uniform-half"),
    )

    mip = _mip_config(params)
    curves = {}
    curves["independent"] = independent_pricing(instance)
    curves["shift"] = shift_pricing(instance)
    curves["jiggle"] = jiggle_pricing(instance)
    warnings = []
    try:
        curves["milp"] = solve_optimal_pricing(instance, mip)
    except Exception as exc:  # budget/size problems must not kill the benchmark
        warnings.append(f"instance {i}: milp failed ({exc}); skipping scheme")

    oos_sample = tuple(
        sample_trajectories(chain, m, stage_rng(seed, f"price/oos-sample/{i}"))
    )
    rows = []
    for scheme in ("milp", "jiggle", "shift", "independent"):
        if scheme not in curves:
            continue
        rep = evaluate_revenue(curves[scheme], pop, sample, "IS")
        rows.append([i, scheme, "IS", _fmt(rep.expected_revenue),
                     _fmt(rep.total_welfare), _fmt(rep.fraction_of_welfare)])
        rep = evaluate_revenue(
            curves[scheme], pop, oos_sample, "OOS",
            rng=stage_rng(seed, f"price/oos-thin/{i}/{scheme}"),
            subset_rule=instance.oos_subset_rule,
        )
        rows.append([i, scheme, "OOS", _fmt(rep.expected_revenue),
                     _fmt(rep.total_welfare), _fmt(rep.fraction_of_welfare)])
    # reference: curve re-solved with hindsight on the OOS trajectories,
    # buyers seeing every metric
    try:
        ref_instance = PricingInstance(pop, oos_sample, instance.cost)
        ref_curve = solve_optimal_pricing(ref_instance, mip)
        rep = evaluate_revenue(ref_curve, pop, oos_sample, "IS")
        rows.append([i, "milp-oos-reference", "OOS", _fmt(rep.expected_revenue),
                     _fmt(rep.total_welfare), _fmt(rep.fraction_of_welfare)])
    except Exception as exc:
        warnings.append(f"instance {i}: oos reference failed ({exc})")
    curve_dump = {s: c.prices.tolist() for s, c in curves.items()}
    return i, rows, {"curves": curve_dump, "warnings": warnings}


def cmd_price(params: dict, seed: int, out_dir: str, manifest: Manifest) -> None:
    n_instances = int(params.get("n_instances", 1))
    workers = int(params.get("workers", 1))
    jobs = [(i, seed, params) for i in range(n_instances)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = sorted(pool.map(_price_one_instance, jobs), key=lambda r: r[0])
    else:
        results = [_price_one_instance(j) for j in jobs]

    all_rows = []
    curve_dump = {}
    for i, rows, extra in results:
        all_rows.extend(rows)
        curve_dump[str(i)] = extra["curves"]
        for w in extra["warnings"]:
            print(f"[price] warning: {w}", file=sys.stderr)
    report_path = os.path.join(out_dir, "price_revenue.csv")
    _write_csv(report_path,
               ["instance", "scheme", "mode", "revenue", "welfare", "fraction_of_welfare"],
               all_rows)
    curves_path = os.path.join(out_dir, "price_curves.json")
    with open(curves_path, "w") as fh:
        json.dump(curve_dump, fh, indent=2, sort_keys=True)
    manifest.add_output(report_path)
    manifest.add_output(curves_path)


# ---------------------------------------------------------------------------
# learn


def _cell_name(family: str, schedule: str, batch: int, rounds: int) -> str:
    sched = {"1/(t+1)": "inv-t", "1/sqrt(t)": "inv-sqrt-t", "0.5": "const-half"}[schedule]
    return f"learn_{family}_{sched}_b{batch}_r{rounds}.csv"


def cmd_learn(params: dict, seed: int, out_dir: str, manifest: Manifest) -> None:
    families = params.get("families", ["random"])
    schedules = params.get("schedules", ["1/sqrt(t)"])
    batches = [int(b) for b in params.get("batches", [100])]
    rounds_list = [int(r) for r in params.get("rounds", [1000])]
    n_types = int(params.get("n_types", 5))
    setup = generate_learning_setup(
        stage_rng(seed, "learn/instance"),
        n_types=n_types,
        n_metrics=int(params.get("n_metrics", 10)),
        horizon=int(params.get("horizon", 15)),
        cost=params.get("cost", 0.02),
    )
    summary = []
    for family in families:
        if family not in PRIOR_FAMILIES:
            raise StageError("learn", f"unknown prior family {family!r}")
        mu_star = make_prior(family, n_types, stage_rng(seed, f"learn/prior/{family}"))
        for schedule in schedules:
            for batch in batches:
                for rounds in rounds_list:
                    trace = run_learning(
                        mu_star, setup.population, setup.price, setup.chain,
                        setup.cost, rounds, batch, schedule,
                        stage_rng(seed, f"learn/run/{family}/{schedule}/{batch}/{rounds}"),
                    )
                    name = _cell_name(family, schedule, batch, rounds)
                    path = os.path.join(out_dir, name)
                    trace.to_csv(path)
                    manifest.add_output(path)
                    summary.append(
                        [family, schedule, batch, rounds, _fmt(trace.kl[-1]),
                         trace.skipped_observations]
                    )
    path = os.path.join(out_dir, "learn_summary.csv")
    _write_csv(path, ["family", "schedule", "batch", "rounds", "final_kl", "skipped"], summary)
    manifest.add_output(path)


# ---------------------------------------------------------------------------
# discover


def cmd_discover(params: dict, seed: int, out_dir: str, manifest: Manifest) -> None:
    iterations = int(params.get("iterations", 300))
    automl_period = int(params.get("automl_period", 10))
    drivers = params.get("drivers", ["data-bandit", "data-all", "data-alt", "automl-only"])
    env_kwargs = dict(
        n_models=int(params.get("n_models", 8)),
        n_augmentations=int(params.get("n_augmentations", 200)),
        n_clusters=int(params.get("n_clusters", 10)),
        noise_sigma=params.get("noise_sigma", 0.0),
    )
    counts = []
    for driver in drivers:
        env, best_model, planted, optimum = planted_env(
            stage_rng(seed, "discover/env"), **env_kwargs
        )
        rng = stage_rng(seed, f"discover/run/{driver}")
        if driver == "data-bandit":
            trace = run_discovery(env, StoppingRule(max_iterations=iterations), rng)
            analytic = iterations + trace.repass_evaluations
        elif driver == "data-all":
            trace = run_data_all(env, iterations, rng)
            analytic = iterations * env_kwargs["n_models"]
        elif driver == "data-alt":
            trace = run_data_alt(env, iterations, rng, automl_period)
            analytic = iterations + (iterations // automl_period) * env_kwargs["n_models"]
        elif driver == "automl-only":
            trace = run_automl_only(env, iterations, rng)
            analytic = iterations
        else:
            raise StageError("discover", f"unknown driver {driver!r}")
        path = os.path.join(out_dir, f"discover_{driver}.csv")
        trace.to_csv(path)
        manifest.add_output(path)
        counts.append([driver, env.eval_count, analytic, _fmt(trace.best_metric),
                       _fmt(optimum)])
    path = os.path.join(out_dir, "discover_evaluations.csv")
    _write_csv(path, ["driver", "evaluations", "analytic", "best_metric", "planted_optimum"],
               counts)
    manifest.add_output(path)


# ---------------------------------------------------------------------------
# cee


def _cee_one(args) -> tuple[int, list[list], list[float]]:
    s, seed, params, eps_list = args
    n_types = int(params.get("n_types", 3))
    n_metrics = int(params.get("n_metrics", 4))
    horizon = int(params.get("horizon", 3))
    m = int(params.get("m", 6))
    rng = stage_rng(seed, f"cee/instance/{s}")
    grid = make_grid(n_metrics)
    chain = random_chain(grid, horizon, rng)
    types = random_types(n_types, n_metrics, rng, params.get("value_bound", 1.0))
    mu_star = rng.dirichlet(np.ones(n_types))
    template = CeeTemplate(
        types, m, SearchCost(params.get("cost", 0.0)),
        seed=int(rng.integers(0, 2**31)),
        mip=MIPConfig(time_budget=params.get("milp_time_budget"), gap_tol=0.0),
    )
    rows, values = [], []
    for eps in eps_list:
        prng = stage_rng(seed, f"cee/perturb/{s}/{eps}")
        mu = perturb_simplex(mu_star, eps, prng)
        pchain = perturb_chain(chain, eps, prng)
        val = cee(mu_star, chain, mu, pchain, template)
        rows.append([_fmt(eps), s, _fmt(val)])
        values.append(val)
    return s, rows, values


def cmd_cee(params: dict, seed: int, out_dir: str, manifest: Manifest) -> None:
    eps_list = [float(e) for e in params.get("eps", [0.0, 0.01, 0.02, 0.04, 0.08])]
    n_seeds = int(params.get("n_seeds", 20))
    workers = int(params.get("workers", 1))
    jobs = [(s, seed, params, eps_list) for s in range(n_seeds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = sorted(pool.map(_cee_one, jobs), key=lambda r: r[0])
    else:
        results = [_cee_one(j) for j in jobs]

    rows = []
    per_seed = []
    for s, rws, values in results:
        rows.extend(rws)
        per_seed.append(values)
    path = os.path.join(out_dir, "cee_sweep.csv")
    _write_csv(path, ["eps", "seed", "cee"], rows)
    manifest.add_output(path)

    # per-seed quadratic fit over the positive-eps sweep
    pos = [e for e in eps_list if e > 0]
    curvatures, slopes = [], []
    if len(pos) >= 3:
        x = np.array(pos)
        design = np.stack([np.ones_like(x), x, x * x], axis=1)
        for values in per_seed:
            y = np.array([v for e, v in zip(eps_list, values) if e > 0])
            coef, *_ = np.linalg.lstsq(design, y, rcond=None)
            slopes.append(float(coef[1]))
            curvatures.append(float(coef[2]))
    summary = {
        "eps": eps_list,
        "median_cee": {
            str(e): float(np.median([v[i] for v in per_seed]))
            for i, e in enumerate(eps_list)
        },
        "mean_slope": float(np.mean(slopes)) if slopes else None,
        "mean_curvature": float(np.mean(curvatures)) if curvatures else None,
        "curvature_se": float(np.std(curvatures, ddof=1) / math.sqrt(len(curvatures)))
        if len(curvatures) > 1 else None,
    }
    if summary["curvature_se"] is not None:
        # one-sided check at the 5% level, df = n_seeds - 1 (critical value
        # hard-coded for df=19; conservative enough nearby)
        t_crit = 1.729
        summary["at_most_linear"] = bool(
            summary["mean_curvature"] <= t_crit * summary["curvature_se"]
        )
    spath = os.path.join(out_dir, "cee_summary.json")
    with open(spath, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    manifest.add_output(spath)


# ---------------------------------------------------------------------------
# pipeline


def cmd_pipeline(params: dict, seed: int, out_dir: str, manifest: Manifest) -> None:
    stages = {}

    def run_stage(name, fn):
        t0 = time.monotonic()
        try:
            out = fn()
        except Exception as exc:
            raise StageError(f"pipeline/{name}", exc) from exc
        stages[name] = time.monotonic() - t0
        manifest.time_stage(f"pipeline/{name}", stages[name])
        return out

    n_runs = int(params.get("n_discovery_runs", 20))
    iterations = int(params.get("iterations", 60))
    period = int(params.get("period", 10))
    n_types = int(params.get("n_types", 4))
    env_kwargs = dict(
        n_models=int(params.get("n_models", 4)),
        n_augmentations=int(params.get("n_augmentations", 40)),
        n_clusters=int(params.get("n_clusters", 5)),
        noise_sigma=params.get("noise_sigma", 0.05),
    )
    grid = make_grid(int(params.get("grid_size", 21)), 0.0, 0.05)

    def discover_stage():
        trajectories = []
        for r in range(n_runs):
            env, *_ = planted_env(stage_rng(seed, f"pipeline/env/{r}"), **env_kwargs)
            trace = run_discovery(
                env, StoppingRule(max_iterations=iterations),
                stage_rng(seed, f"pipeline/discover/{r}"),
            )
            trajectories.append(trace_to_trajectory(trace, grid, period))
        return trajectories

    trajectories = run_stage("discover", discover_stage)
    traj_path = os.path.join(out_dir, "pipeline_trajectories.csv")
    write_trajectories_csv(traj_path, trajectories, grid)
    manifest.add_output(traj_path)

    chain = run_stage("estimate-chain", lambda: estimate_chain(trajectories, grid))
    chain_path = os.path.join(out_dir, "pipeline_chain.json")
    with open(chain_path, "w") as fh:
        fh.write(chain.to_json())
    manifest.add_output(chain_path)

    rng_pop = stage_rng(seed, "pipeline/population")
    types = random_types(n_types, len(grid), rng_pop)
    pop = Population(types, rng_pop.dirichlet(np.ones(n_types)))
    cost = SearchCost(params.get("cost", 0.005))
    instance = PricingInstance(pop, tuple(trajectories), cost)

    curve = run_stage(
        "price", lambda: solve_optimal_pricing(instance, _mip_config(params))
    )
    curve_path = os.path.join(out_dir, "pipeline_curve.json")
    with open(curve_path, "w") as fh:
        fh.write(curve.to_json())
    manifest.add_output(curve_path)

    def simulate_stage():
        rows = []
        revenue = 0.0
        welfare_rng = stage_rng(seed, "pipeline/buyers")
        n_buyers = int(params.get("n_buyers", 200))
        fresh = sample_trajectories(chain, n_buyers, stage_rng(seed, "pipeline/fresh"))
        for b in range(n_buyers):
            i = int(welfare_rng.choice(pop.n_types, p=pop.prior))
            policy = solve_optimal_stopping(pop.types[i], curve, chain, cost)
            out = simulate_buyer(pop.types[i], policy, fresh[b], curve, cost)
            revenue += out.payment / n_buyers
            rows.append(
                [b, pop.types[i].id, out.stop_time,
                 "" if out.purchased is None else out.purchased,
                 _fmt(out.payment), _fmt(out.buyer_utility)]
            )
        return rows, revenue

    rows, revenue = run_stage("simulate-buyers", simulate_stage)
    buyers_path = os.path.join(out_dir, "pipeline_buyers.csv")
    _write_csv(buyers_path,
               ["buyer", "type", "stop_time", "purchased", "payment", "utility"], rows)
    manifest.add_output(buyers_path)

    rep = evaluate_revenue(curve, pop, trajectories, "IS")
    summary_path = os.path.join(out_dir, "pipeline_summary.csv")
    _write_csv(summary_path,
               ["in_sample_revenue", "welfare", "fraction", "simulated_dp_revenue"],
               [[_fmt(rep.expected_revenue), _fmt(rep.total_welfare),
                 _fmt(rep.fraction_of_welfare), _fmt(revenue)]])
    manifest.add_output(summary_path)


COMMANDS = {
    "simulate": cmd_simulate,
    "price": cmd_price,
    "learn": cmd_learn,
    "discover": cmd_discover,
    "cee": cmd_cee,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="market",
        description="Pricing-and-simulation engine for a data-augmented AutoML market",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=False, help="JSON config path")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--out", default=None, help="output directory override")
    args = parser.parse_args(argv)

    config: dict = {}
    if args.config:
        try:
            with open(args.config) as fh:
                config = json.load(fh)
        except OSError as exc:
            print(f"[config] {exc}", file=sys.stderr)
            return 2
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    out_dir = args.out or config.get("out_dir", "results")
    params = config.get("params", config)

    os.makedirs(out_dir, exist_ok=True)
    manifest = Manifest(args.command, config, seed)
    t0 = time.monotonic()
    try:
        COMMANDS[args.command](params, seed, out_dir, manifest)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"[{args.command}] {exc}", file=sys.stderr)
        return 1
    manifest.time_stage(args.command, time.monotonic() - t0)
    manifest.write(out_dir, args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())
