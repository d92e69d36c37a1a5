"""Command line entry point: ``fedptr {run,probe,partition,plot,compare,selftest}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import DataError
from .federation import METRIC_COLUMNS, NonFiniteError
from .harness import (
    ConfigError, ExperimentFile, compare_suite, load_data, make_partition, plot_metrics, run_all,
    selftest, write_comparison_csv,
)
from . import svgplot

log = logging.getLogger("fedptr")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _common(p: argparse.ArgumentParser, config=True):
    if config:
        p.add_argument("config_path", nargs="?", help="experiment JSON file")
        p.add_argument("--config", dest="config_flag", help="experiment JSON file")
    p.add_argument("--seed", type=int, default=None, help="override the seed (beats FEDPTR_SEED)")
    p.add_argument("--out", default=None, help="output directory or file")
    p.add_argument("--threads", type=int, default=None, help="worker threads for client solves")
    p.add_argument("--quiet", action="store_true", help="only report errors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedptr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment file for each of its seeds")
    _common(p)
    p = sub.add_parser("probe", help="run with the regularizer off and record gradient cosines")
    _common(p)
    p = sub.add_parser("partition", help="write the client partition and label statistics")
    _common(p)
    p = sub.add_parser("plot", help="draw columns of a metrics CSV as SVG polylines")
    p.add_argument("metrics", help="metrics CSV written by 'run'")
    p.add_argument("--columns", default="test_acc",
                   help=f"comma-separated columns (from {', '.join(METRIC_COLUMNS[1:])})")
    _common(p, config=False)
    p = sub.add_parser("compare", help="mean and std of last-5 accuracy across configs and seeds")
    p.add_argument("configs", nargs="*", help="experiment JSON files")
    p.add_argument("--config", dest="config_flag", help="experiment JSON file")
    p.add_argument("--sweep", action="append", default=[],
                   help="FIELD or FIELD=v1,v2,... (JSON values); repeatable")
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: from the file)")
    _common(p, config=False)
    p = sub.add_parser("selftest", help="finite-difference checks of all derivatives")
    _common(p, config=False)
    return parser


def _config(args) -> ExperimentFile:
    path = args.config_flag or getattr(args, "config_path", None)
    if path is None:
        raise ConfigError("--config", "an experiment file is required")
    return ExperimentFile.load(path)


def _out_dir(args, exp: ExperimentFile) -> Path:
    if args.out:
        return Path(args.out)
    return exp.base_dir / exp.output_dir


def cmd_run(args, probe: bool = False) -> int:
    exp = _config(args)
    if probe:
        if exp.fed.algorithm not in ("fedptr", "fedptr_s"):
            raise ConfigError("algorithm", "probe mode needs 'fedptr' or 'fedptr_s'")
        exp = ExperimentFile(exp.fed.replace(probe=True), exp.dataset, exp.partition,
                             exp.output_dir, exp.seeds, exp.base_dir)
    seeds = exp.resolve_seeds(args.seed)
    exp = exp.with_seeds(seeds)
    out = _out_dir(args, exp)
    results = run_all(exp, seeds, out, threads=args.threads, quiet=args.quiet)
    for r in results:
        line = f"seed {r.seed}: last5_acc={r.summary['last5_acc']:.4f} -> {r.out_dir}"
        if probe:
            ca = np.nanmean([m.cos_aux for m in r.history]) if any(
                m.cos_aux == m.cos_aux for m in r.history) else float("nan")
            cl = np.nanmean([m.cos_local for m in r.history]) if any(
                m.cos_local == m.cos_local for m in r.history) else float("nan")
            line += f" mean cos_aux={ca:.4f} mean cos_local={cl:.4f}"
        if not args.quiet:
            print(line)
    return EXIT_OK


def cmd_partition(args) -> int:
    exp = _config(args)
    seed = exp.resolve_seeds(args.seed)[0]
    train, _, digest = load_data(exp, seed)
    part = make_partition(exp, train, seed)
    out = _out_dir(args, exp)
    out.mkdir(parents=True, exist_ok=True)
    part.to_csv(out / "partition.csv")
    dist = part.label_distribution(train)
    entropy = part.label_entropy(train)
    with open(out / "label_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "n_samples", "label_entropy",
                    *[f"class_{k}" for k in range(train.num_classes)]])
        for i in range(part.n_clients):
            w.writerow([i, int(dist[i].sum()), repr(float(entropy[i])), *[int(c) for c in dist[i]]])
    stats = {"seed": seed, "dataset_hash": digest, "sizes": [int(s) for s in part.sizes],
             "mean_label_entropy": float(entropy.mean()), "warnings": list(part.warnings)}
    (out / "partition_summary.json").write_text(json.dumps(stats, indent=2) + "\n")
    for warning in part.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    if not args.quiet:
        print(f"{part.n_clients} clients, sizes {stats['sizes']}, "
              f"mean label entropy {stats['mean_label_entropy']:.4f} -> {out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    columns = [c.strip() for c in args.columns.split(",") if c.strip()]
    if not columns:
        raise ConfigError("--columns", "at least one column is required")
    src = Path(args.metrics)
    out = Path(args.out) if args.out else src.with_name(src.stem + "_" + "_".join(columns) + ".svg")
    plot_metrics(src, columns, out)
    if not args.quiet:
        print(out)
    return EXIT_OK


def _parse_sweep(spec: str):
    if "=" not in spec:
        return spec, None
    name, raw = spec.split("=", 1)
    values = []
    for token in raw.split(","):
        try:
            values.append(json.loads(token))
        except json.JSONDecodeError:
            values.append(token)
    return name, values


def cmd_compare(args) -> int:
    paths = list(args.configs) + ([args.config_flag] if args.config_flag else [])
    if not paths:
        raise ConfigError("configs", "at least one experiment file is required")
    exps = [ExperimentFile.load(p) for p in paths]
    sweeps = [_parse_sweep(s) for s in args.sweep] or [("algorithm", None)]
    for name, values in sweeps:
        if values is not None:
            exps = [e.with_field(name, v) for e in exps for v in values]
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    else:
        seeds = list(exps[0].resolve_seeds(args.seed))
    rows = compare_suite(exps, seeds, sweep=[n for n, _ in sweeps], threads=args.threads,
                         quiet=args.quiet)
    out = Path(args.out) if args.out else exps[0].base_dir / exps[0].output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_comparison_csv(rows, out / "comparison.csv")
    svgplot.bar_chart([r.label for r in rows], [r.mean for r in rows], out / "comparison.svg",
                      title="mean last-5 test accuracy", ylabel="accuracy",
                      errors=[r.std for r in rows])
    if not args.quiet:
        for r in rows:
            print(f"{r.label}: {r.mean:.4f} +/- {r.std:.4f} over {len(r.per_seed)} seeds")
        print(out / "comparison.csv")
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = selftest(seed=0 if args.seed is None else args.seed)
    for r in results:
        if not args.quiet or not r.passed:
            status = "PASS" if r.passed else "FAIL"
            print(f"{status} {r.name}: worst relative error {r.worst:.3e} "
                  f"(tolerance {r.tolerance:g}, {r.instances} instances)")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


COMMANDS = {
    "run": cmd_run,
    "probe": lambda a: cmd_run(a, probe=True),
    "partition": cmd_partition,
    "plot": cmd_plot,
    "compare": cmd_compare,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("fedptr").setLevel(logging.ERROR if args.quiet else logging.INFO)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"fedptr: bad config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"fedptr: aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (FileNotFoundError, DataError) as exc:
        print(f"fedptr: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
