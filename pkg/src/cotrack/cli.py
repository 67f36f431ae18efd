"""Batch experiment runner and results emission.

`cotrack run` executes seeded Monte-Carlo batches of one filter variant over
a scenario (builtin "paper-vi" or a YAML file), writing per-step and per-run
CSVs, a machine-readable summary, communication counters and rendered
figures. `cotrack compare` joins summaries from previous runs into
difference curves and overlay figures.

Seed derivation: Monte-Carlo run r draws every stream from numpy
SeedSequence entropy (seed, r, ...); measurement synthesis at step t uses
(seed, r, t, 0) and the filter's samplers use (seed, r, t, domain, ...)
with domain 1 = agent products, 2 = pooled target products,
3 = decentralized target sampling. Identical spec + seed therefore
reproduces byte-identical CSVs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .filter import FilterConfig, RngFactory, VARIANTS, infer, initial_state, step
from .metrics import OspaParams, agent_rmse, aggregate_runs, ospa
from .scenario import Scenario, paper_scenario, scenario_from_dict, synthesize_frame, truth_to_csv

log = logging.getLogger(__name__)

ENV_PREFIX = "COTRACK_"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class ConfigError(Exception):
    pass


@dataclass
class RunSpec:
    scenario: str = "paper-vi"
    variant: str = "CGM"
    mc_runs: int = 1
    seed: int = 0
    consensus_rounds: int = 50
    gibbs_iterations: int = 6
    outer_iterations: int = 1
    out_dir: str = "out"
    workers: int = 1
    make_figures: bool = True
    label_dump: bool = False

    def __post_init__(self):
        if self.mc_runs < 1:
            raise ConfigError("mc_runs must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")


def load_scenario(name_or_path: str) -> Scenario:
    if name_or_path == "paper-vi":
        return paper_scenario()
    if not os.path.exists(name_or_path):
        raise ConfigError(f"scenario file not found: {name_or_path}")
    import yaml

    with open(name_or_path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse scenario file: {exc}") from exc
    try:
        return scenario_from_dict(data)
    except KeyError as exc:
        raise ConfigError(f"bad scenario file: {exc}") from exc


def filter_config_for(scn: Scenario, spec: RunSpec) -> FilterConfig:
    return FilterConfig(
        variant=spec.variant,
        outer_iterations=spec.outer_iterations,
        gibbs_iterations=spec.gibbs_iterations,
        gibbs_top=max(2 * spec.gibbs_iterations, 12),
        consensus_rounds=spec.consensus_rounds,
        existence_threshold=scn.config.existence_threshold,
        collect_label_trace=spec.label_dump,
    )


def run_single(scn: Scenario, config: FilterConfig, seed: int, run_index: int) -> dict:
    """One Monte-Carlo run: regenerate measurements, filter, per-step metrics."""
    factory = RngFactory(seed, run_index)
    state = initial_state(scn, config)
    n = scn.config.n_steps
    rmse = np.zeros(n)
    osp = np.zeros(n)
    card = np.zeros(n, dtype=int)
    traffic_steps = []
    labels = []
    params = OspaParams(scn.config.ospa_cutoff, scn.config.ospa_order)
    mobile = np.array([scn.truth.is_mobile(s) for s in range(scn.n_agents)])
    for t in range(n):
        graph, visibility = scn.graphs_at(t)
        frame = synthesize_frame(
            scn.truth, t, graph, visibility, scn.sensors, scn.inter_R, factory(t, 0)
        )
        state = step(scn, state, t, frame, graph, visibility, config, factory)
        est_agents, confirmed = infer(state, config.existence_threshold)
        rmse[t] = agent_rmse(scn.truth.agents_at(t), est_agents[:, :2], mobile)
        _, true_states = scn.truth.alive_targets(t)
        est_xy = np.array([x[:2] for _, x in confirmed]).reshape(-1, 2)
        osp[t] = ospa(true_states[:, :2], est_xy, params)
        card[t] = len(confirmed)
        if config.decentralized_targets:
            traffic_steps.append(
                {"diameter": state.diagnostics["graph_diameter"],
                 "tags": state.diagnostics["traffic"]}
            )
        if config.collect_label_trace:
            labels.extend(state.diagnostics.get("label_trace", []))
    out = {"rmse": rmse, "ospa": osp, "card": card, "traffic": traffic_steps}
    if config.collect_label_trace:
        out["labels"] = labels
    return out


def _run_task(args):
    scn, config, seed, run_index = args
    return run_index, run_single(scn, config, seed, run_index)


def run_batch(spec: RunSpec, scn: Scenario | None = None, config: FilterConfig | None = None) -> dict:
    """Execute all Monte-Carlo runs of one variant and aggregate the metrics.

    Per-run failures are isolated: the run is reported in `failed_runs` and
    excluded from the aggregates."""
    if scn is None:
        scn = load_scenario(spec.scenario)
    if config is None:
        config = filter_config_for(scn, spec)
    results: dict[int, dict] = {}
    failed: dict[int, str] = {}
    t0 = time.monotonic()
    tasks = [(scn, config, spec.seed, r) for r in range(spec.mc_runs)]
    if spec.workers > 1 and spec.mc_runs > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            for r, res in pool.map(_run_task, tasks):
                results[r] = res
    else:
        for task in tasks:
            r = task[3]
            try:
                results[r] = _run_task(task)[1]
            except Exception as exc:  # isolate per-run failures
                log.exception("run %d failed", r)
                failed[r] = f"{type(exc).__name__}: {exc}"
    elapsed = time.monotonic() - t0
    if not results:
        raise RuntimeError(f"all {spec.mc_runs} runs failed: {failed}")
    runs = sorted(results)
    agg = aggregate_runs(
        [results[r]["rmse"] for r in runs],
        [results[r]["ospa"] for r in runs],
        [results[r]["card"] for r in runs],
    )
    card_true = np.array([scn.truth.cardinality(t) for t in range(scn.config.n_steps)])
    total_reals = 0
    for r in runs:
        for step_info in results[r]["traffic"]:
            total_reals += sum(tag["reals"] for tag in step_info["tags"].values())
    return {
        "spec": spec,
        "variant": spec.variant,
        "runs": runs,
        "failed_runs": failed,
        "per_run": results,
        "aggregate": agg,
        "card_true": card_true,
        "consensus_reals_total": int(total_reals),
        "elapsed_seconds": elapsed,
        "scenario": scn,
        "config": config,
    }


# ---------------------------------------------------------------------------
# Artifact emission
# ---------------------------------------------------------------------------

PER_STEP_COLUMNS = ["t", "rmse", "ospa_mean", "card_mean", "card_std", "card_true"]
PER_RUN_COLUMNS = ["run", "t", "rmse", "ospa", "card_est"]


def write_artifacts(batch: dict, out_dir: str, make_figures: bool = True) -> dict:
    """Write CSVs, summary.json, schema, ground truth and figures; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    agg = batch["aggregate"]
    n = batch["card_true"].size
    paths = {}

    per_step = os.path.join(out_dir, "per_step.csv")
    with open(per_step, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PER_STEP_COLUMNS)
        for t in range(n):
            w.writerow(
                [
                    t,
                    f"{agg['rmse_per_step'][t]:.9g}",
                    f"{agg['ospa_per_step'][t]:.9g}",
                    f"{agg['card_mean'][t]:.9g}",
                    f"{agg['card_std'][t]:.9g}",
                    int(batch["card_true"][t]),
                ]
            )
    paths["per_step"] = per_step

    per_run = os.path.join(out_dir, "per_run.csv")
    with open(per_run, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PER_RUN_COLUMNS)
        for r in batch["runs"]:
            res = batch["per_run"][r]
            for t in range(n):
                w.writerow(
                    [r, t, f"{res['rmse'][t]:.9g}", f"{res['ospa'][t]:.9g}", int(res["card"][t])]
                )
    paths["per_run"] = per_run

    spec = batch["spec"]
    summary = {
        "variant": batch["variant"],
        "scenario": spec.scenario,
        "mc_runs": spec.mc_runs,
        "completed_runs": len(batch["runs"]),
        "failed_runs": batch["failed_runs"],
        "seed": spec.seed,
        "gibbs_iterations": spec.gibbs_iterations,
        "consensus_rounds": spec.consensus_rounds,
        "outer_iterations": spec.outer_iterations,
        "rmse_time_avg": agg["rmse_time_avg"],
        "ospa_time_avg": agg["ospa_time_avg"],
        "consensus_reals_total": batch["consensus_reals_total"],
        "elapsed_seconds": batch["elapsed_seconds"],
        "n_steps": int(n),
    }
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    paths["summary"] = summary_path

    schema_path = os.path.join(out_dir, "schema.json")
    with open(schema_path, "w") as fh:
        json.dump(
            {
                "per_step.csv": {
                    "t": "time step index",
                    "rmse": "mobile-agent position RMSE averaged over runs (m)",
                    "ospa_mean": "mean OSPA over runs (m)",
                    "card_mean": "mean confirmed-target count over runs",
                    "card_std": "sample std of confirmed-target count over runs",
                    "card_true": "true target count",
                },
                "per_run.csv": {
                    "run": "Monte-Carlo run index",
                    "t": "time step index",
                    "rmse": "mobile-agent position RMSE (m)",
                    "ospa": "OSPA (m)",
                    "card_est": "confirmed-target count",
                },
            },
            fh,
            indent=2,
            sort_keys=True,
        )
    paths["schema"] = schema_path

    truth_path = os.path.join(out_dir, "truth.csv")
    truth_to_csv(batch["scenario"].truth, truth_path)
    paths["truth"] = truth_path

    if spec.label_dump:
        label_path = os.path.join(out_dir, "labels.csv")
        with open(label_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "t", "outer_iter", "pt", "round", "agent", "label"])
            for r in batch["runs"]:
                for row in batch["per_run"][r].get("labels", []):
                    w.writerow([r, *row])
        paths["labels"] = label_path

    if make_figures:
        paths.update(render_figures(batch, out_dir))
    return paths


def render_figures(batch: dict, out_dir: str) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    agg = batch["aggregate"]
    n = batch["card_true"].size
    tt = np.arange(n)
    label = batch["variant"]
    paths = {}

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(tt, agg["rmse_per_step"], marker=".", label=label)
    ax.set_xlabel("time step")
    ax.set_ylabel("agent RMSE (m)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = os.path.join(out_dir, "rmse.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths["fig_rmse"] = path

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(tt, agg["ospa_per_step"], marker=".", color="tab:orange", label=label)
    ax.set_xlabel("time step")
    ax.set_ylabel("OSPA (m)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = os.path.join(out_dir, "ospa.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths["fig_ospa"] = path

    fig, ax = plt.subplots(figsize=(7, 4))
    mean, std = agg["card_mean"], agg["card_std"]
    ax.step(tt, batch["card_true"], where="post", color="k", label="true")
    ax.plot(tt, mean, color="tab:blue", label="estimated mean")
    ax.fill_between(tt, mean - 3 * std, mean + 3 * std, alpha=0.2, label="±3 std")
    ax.set_xlabel("time step")
    ax.set_ylabel("cardinality")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = os.path.join(out_dir, "cardinality.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths["fig_cardinality"] = path
    return paths


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def compare_summaries(summary_paths, out_dir: str, make_figures: bool = True) -> dict:
    """Join per-step curves of several finished runs into difference CSVs."""
    entries = []
    for path in summary_paths:
        if not os.path.exists(path):
            raise ConfigError(f"summary not found: {path}")
        with open(path) as fh:
            summary = json.load(fh)
        per_step = os.path.join(os.path.dirname(path), "per_step.csv")
        if not os.path.exists(per_step):
            raise ConfigError(f"per_step.csv missing next to {path}")
        rows = list(csv.DictReader(open(per_step)))
        entries.append((summary, rows))
    n = len(entries[0][1])
    for summary, rows in entries[1:]:
        if len(rows) != n:
            raise ConfigError("mismatched step counts between summaries")
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for summary, _ in entries:
        base = summary["variant"]
        name = base
        k = 2
        while name in names:
            name = f"{base}#{k}"
            k += 1
        names.append(name)
    out_csv = os.path.join(out_dir, "compare.csv")
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["t"]
        for name in names:
            header += [f"rmse_{name}", f"ospa_{name}"]
        for name in names[1:]:
            header += [f"rmse_{name}_minus_{names[0]}", f"ospa_{name}_minus_{names[0]}"]
        w.writerow(header)
        for t in range(n):
            row = [t]
            for _, rows in entries:
                row += [rows[t]["rmse"], rows[t]["ospa_mean"]]
            base_rmse = float(entries[0][1][t]["rmse"])
            base_ospa = float(entries[0][1][t]["ospa_mean"])
            for _, rows in entries[1:]:
                row += [
                    f"{float(rows[t]['rmse']) - base_rmse:.9g}",
                    f"{float(rows[t]['ospa_mean']) - base_ospa:.9g}",
                ]
            w.writerow(row)
    report = {
        "variants": names,
        "rmse_time_avg": {n_: s["rmse_time_avg"] for n_, (s, _) in zip(names, entries)},
        "ospa_time_avg": {n_: s["ospa_time_avg"] for n_, (s, _) in zip(names, entries)},
    }
    report_path = os.path.join(out_dir, "compare.json")
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    paths = {"compare_csv": out_csv, "compare_json": report_path}
    if make_figures:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        for metric, col in (("rmse", "rmse"), ("ospa", "ospa_mean")):
            fig, ax = plt.subplots(figsize=(7, 4))
            for name, (_, rows) in zip(names, entries):
                ax.plot([float(r[col]) for r in rows], label=name)
            ax.set_xlabel("time step")
            ax.set_ylabel(f"{metric} (m)")
            ax.legend()
            ax.grid(alpha=0.3)
            fig.tight_layout()
            path = os.path.join(out_dir, f"{metric}_compare.png")
            fig.savefig(path, dpi=120)
            plt.close(fig)
            paths[f"fig_{metric}"] = path
    return paths


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _env(name: str, default, cast):
    raw = os.environ.get(ENV_PREFIX + name)
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {ENV_PREFIX}{name}: {raw}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cotrack",
        description="Cooperative localization and multi-target tracking experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a Monte-Carlo batch of one variant")
    run.add_argument("--scenario", default=_env("SCENARIO", "paper-vi", str),
                     help="builtin name 'paper-vi' or a YAML scenario file")
    run.add_argument("--variant", default=_env("VARIANT", "CGM", str), choices=VARIANTS)
    run.add_argument("--mc-runs", type=int, default=_env("MC_RUNS", 1, int))
    run.add_argument("--seed", type=int, default=_env("SEED", 0, int))
    run.add_argument("--gibbs-iters", type=int, default=_env("GIBBS_ITERS", 6, int))
    run.add_argument("--consensus-iters", type=int, default=_env("CONSENSUS_ITERS", 50, int))
    run.add_argument("--outer-iters", type=int, default=_env("OUTER_ITERS", 1, int))
    run.add_argument("--out", default=_env("OUT", "out", str))
    run.add_argument("--workers", type=int, default=_env("WORKERS", 1, int))
    run.add_argument("--no-figures", action="store_true")
    run.add_argument("--dump-labels", action="store_true",
                     help="write decentralized label trajectories to labels.csv")

    cmp_ = sub.add_parser("compare", help="join summaries into difference curves")
    cmp_.add_argument("summaries", nargs="+", help="summary.json files from previous runs")
    cmp_.add_argument("--out", default=_env("OUT", "out-compare", str))
    cmp_.add_argument("--no-figures", action="store_true")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            spec = RunSpec(
                scenario=args.scenario,
                variant=args.variant,
                mc_runs=args.mc_runs,
                seed=args.seed,
                consensus_rounds=args.consensus_iters,
                gibbs_iterations=args.gibbs_iters,
                outer_iterations=args.outer_iters,
                out_dir=args.out,
                workers=args.workers,
                make_figures=not args.no_figures,
                label_dump=args.dump_labels,
            )
            batch = run_batch(spec)
            paths = write_artifacts(batch, spec.out_dir, spec.make_figures)
            agg = batch["aggregate"]
            print(
                f"{spec.variant}: {len(batch['runs'])}/{spec.mc_runs} runs, "
                f"time-avg RMSE {agg['rmse_time_avg']:.3f} m, "
                f"time-avg OSPA {agg['ospa_time_avg']:.3f} m "
                f"({batch['elapsed_seconds']:.1f} s)"
            )
            if batch["failed_runs"]:
                print(f"failed runs: {batch['failed_runs']}", file=sys.stderr)
            print(f"artifacts in {spec.out_dir}: {', '.join(sorted(paths))}")
            return EXIT_OK
        if args.command == "compare":
            paths = compare_summaries(args.summaries, args.out, not args.no_figures)
            print(f"comparison written to {args.out}: {', '.join(sorted(paths))}")
            return EXIT_OK
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure
        log.exception("runtime failure")
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
