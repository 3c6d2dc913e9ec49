"""Command line: ``staclab train | verify | analyze``.

Exit codes: 0 success, 1 configuration error, 2 numeric failure,
3 verification failure.
"""

import argparse
import json
import logging
import os
import sys
import time
import traceback

import numpy as np

from staclab import checks, metrics, tabular
from staclab.agent import Agent
from staclab.config import ConfigError, load_config
from staclab.diffcore import NumericFailure
from staclab.harness import pipeline

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("staclab")


def _out_dir(args, cfg):
    path = args.out or os.environ.get("STACLAB_OUT") or cfg.run.out_dir
    os.makedirs(path, exist_ok=True)
    return path


def _config_from_args(args):
    overrides = list(args.set or [])
    if getattr(args, "mode", None):
        overrides.append(f"run.mode={args.mode}")
    if getattr(args, "meta_mask", None) is not None:
        overrides.append(f"run.meta_mask={args.meta_mask or '{}'}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seeds={args.seed}")
        overrides.append(f"verify.seed={args.seed}")
    if getattr(args, "deterministic", False):
        overrides.append("harness.deterministic=true")
    return load_config(args.config, overrides)


# -- train ------------------------------------------------------------------------


def _metrics_row(rec, stats, start, agent, recent_staleness):
    s = stats.summary()
    d = rec.diagnostics
    row = {
        "step": rec.env_steps,
        "version": rec.version,
        "wall_time": time.perf_counter() - start,
        "episodes": s["episodes"],
        "return_mean": s["return_mean"],
        "return_std": s["return_std"],
        "inner_loss": d.get("inner_loss", float("nan")),
        "outer_loss": d.get("outer_loss", float("nan")),
        "metagrad_norm": d.get("metagrad_norm", float("nan")),
        "staleness_mean": float(np.mean(recent_staleness)),
        "staleness_max": int(np.max(recent_staleness)),
    }
    row.update(agent.metaparams())
    return row


def train_seed(cfg, seed, out, deterministic=None):
    """One training run; returns a summary dict. Raises NumericFailure after dumping state."""
    agent = Agent(cfg.agent_config(seed))
    hcfg = cfg.harness_config(seed, deterministic)
    columns = metrics.BASE_COLUMNS + metrics.meta_columns(agent.cfg.num_heads, agent.cfg.meta_names)
    writer = metrics.MetricsWriter(os.path.join(out, f"metrics_seed{seed}.csv"), columns)
    start = time.perf_counter()
    staleness = []
    rows = 0

    def on_step(rec, stats):
        nonlocal rows
        staleness.extend(rec.staleness.tolist())
        if rec.version % cfg.run.log_period == 0:
            writer.write(_metrics_row(rec, stats, start, agent, staleness))
            staleness.clear()
            rows += 1

    try:
        result = pipeline.run(agent, cfg.make_env, hcfg, cfg.run.total_steps, on_step)
    except NumericFailure as err:
        path = os.path.join(out, f"failure_seed{seed}")
        agent.save(path + ".ckpt")
        with open(path + ".json", "w") as fh:
            json.dump({"error": str(err), "version": agent.version, "metaparams": agent.metaparams(), "traceback": traceback.format_exc()}, fh, indent=2)
        raise
    finally:
        writer.close()
    if cfg.run.checkpoint:
        agent.save(os.path.join(out, f"checkpoint_seed{seed}.ckpt"))
    summary = result.stats.summary()
    return {
        "seed": seed,
        "env_steps": result.env_steps,
        "updates": agent.version,
        "episodes": summary["episodes"],
        "final_return": summary["return_mean"],
        "metrics_rows": rows,
        "faults": result.faults,
        "wall_time": result.wall_time,
    }


def cmd_train(args):
    cfg = _config_from_args(args)
    out = _out_dir(args, cfg)
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    runs = []
    for seed in cfg.run.seeds:
        log.info("training seed %s (%s, %d steps)", seed, cfg.run.mode, cfg.run.total_steps)
        try:
            runs.append(train_seed(cfg, int(seed), out))
        except NumericFailure as err:
            print(f"numeric failure on seed {seed}: {err}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"seed {seed}: final return {runs[-1]['final_return']:.4f} after {runs[-1]['env_steps']} steps")
    finals = np.array([r["final_return"] for r in runs])
    summary = {"mode": cfg.run.mode, "runs": runs, "final_return_mean": float(finals.mean()), "final_return_std": float(finals.std())}
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"mean final return {summary['final_return_mean']:.4f} +/- {summary['final_return_std']:.4f} over {len(runs)} seed(s)")
    return EXIT_OK


# -- verify -----------------------------------------------------------------------


def verify_operator(cfg, out):
    v = cfg.verify
    instances = tabular.random_instances(v.instances, seed=v.seed, alpha_mode=v.alpha_mode)
    rows = []
    for inst in instances:
        try:
            rows.append(tabular.analyse_instance(inst, iterations=v.iterations, pairs=v.pairs))
        except tabular.ConfigError as err:
            raise ConfigError(str(err)) from err
    with open(os.path.join(out, "verify_operator.tsv"), "w") as fh:
        tabular.write_report(rows, fh)
    bad = [r for r in rows if not (r["contraction_ok"] and r["fixed_point_ok"] and r["envelope_ok"])]
    unconverged = sum(not r["converged"] for r in rows)
    print(f"operator: {len(rows) - len(bad)}/{len(rows)} instances pass (contraction bound, fixed point, geometric envelope)")
    print(f"operator: {len(rows) - unconverged}/{len(rows)} within 1e-8 of the fixed point after {v.iterations} iterations")
    return not bad


def verify_metagrad(cfg, out):
    v = cfg.verify
    rows = checks.metagradient_suite(batches=v.metagrad_batches, seed=v.seed, tol=v.metagrad_tol)
    with open(os.path.join(out, "verify_metagrad.tsv"), "w") as fh:
        fh.write("batch\trel_error\tok\n")
        for r in rows:
            fh.write(f"{r['batch']}\t{r['rel_error']!r}\t{r['ok']}\n")
    worst = max(r["rel_error"] for r in rows)
    ok = all(r["ok"] for r in rows)
    print(f"metagradient: {sum(r['ok'] for r in rows)}/{len(rows)} batches within {v.metagrad_tol:g} (worst {worst:.2e})")
    return ok


SUITES = {"operator": verify_operator, "metagrad": verify_metagrad}


def cmd_verify(args):
    cfg = _config_from_args(args)
    out = _out_dir(args, cfg)
    names = list(SUITES) if args.suite == "all" else [args.suite]
    results = {name: SUITES[name](cfg, out) for name in names}
    return EXIT_OK if all(results.values()) else EXIT_VERIFY


# -- analyze ----------------------------------------------------------------------


def cmd_analyze(args):
    series = []
    for path in args.files:
        try:
            series.append(metrics.read_metrics(path))
        except metrics.MetricsFileError as err:
            print(f"error: {err}", file=sys.stderr)
            return EXIT_CONFIG
    try:
        agg = metrics.aggregate(series)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or os.environ.get("STACLAB_OUT") or "."
    os.makedirs(out, exist_ok=True)
    metrics.write_columns(os.path.join(out, "aggregate.csv"), agg)
    print(f"aggregated {len(series)} run(s) over {len(agg['step'])} rows -> {os.path.join(out, 'aggregate.csv')}")
    if not args.no_plot:
        meta = sorted({k[: -len("_mean")] for k in agg if k.startswith("head") and k.endswith("_mean")})
        heads = sorted({m.split("/")[0] for m in meta})
        for h in heads:
            metrics.plot_series(os.path.join(out, f"metaparams_{h}.svg"), agg, [m for m in meta if m.startswith(h + "/")], title=h)
        metrics.plot_series(os.path.join(out, "returns.svg"), agg, ["return_mean"], title="episode return")
    return EXIT_OK


# -- entry ------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="staclab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="key=value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", metavar="DIR")

    train = sub.add_parser("train", help="train an agent on one or more seeds")
    common(train)
    train.add_argument("--mode", choices=("impala", "stac", "stacx"))
    train.add_argument("--meta-mask", metavar="LIST", help="comma-separated metaparameters to self-tune ('' for none)")
    train.add_argument("--deterministic", action="store_true", help="single-threaded fixed schedule")
    train.set_defaults(func=cmd_train)

    verify = sub.add_parser("verify", help="run the verification suites")
    common(verify)
    verify.add_argument("--suite", choices=("all",) + tuple(SUITES), default="all")
    verify.set_defaults(func=cmd_verify)

    analyze = sub.add_parser("analyze", help="aggregate metrics files across seeds")
    analyze.add_argument("files", nargs="+")
    analyze.add_argument("--out", metavar="DIR")
    analyze.add_argument("--no-plot", action="store_true")
    analyze.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
