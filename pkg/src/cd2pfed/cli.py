"""Command line front-end: ``run``, ``partition``, ``gradcheck`` and ``report``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .config import FederationConfig
from .evaluation import MetricRow, format_summary, summarize
from .exceptions import CD2Error, ConfigurationError

log = logging.getLogger("cd2pfed")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _load_config(args) -> FederationConfig:
    cfg = FederationConfig.load(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        changes["output_dir"] = args.out
    return cfg.replace(**changes) if changes else cfg


def cmd_run(args) -> int:
    from .server import build_data, run_experiment

    cfg = _load_config(args)
    if args.parallel < 1:
        raise ConfigurationError("--parallel must be >= 1")
    data = build_data(cfg)
    result = run_experiment(cfg, data, out_dir=cfg.output_dir, parallel=args.parallel)
    print(result.run_dir)
    for metric in ("local", "new", "external"):
        rows = [r for r in result.metrics if r.metric == metric and r.client_id is None]
        if rows:
            print(f"{metric:>8}: {rows[-1].value:.2f}%")
    return EXIT_OK


def cmd_partition(args) -> int:
    from .server import build_data

    cfg = _load_config(args)
    data = build_data(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"partition-{cfg.config_hash()}-seed{cfg.seed}.json"
    data.write_manifest(path)
    print(path)
    for sh in data.shards:
        labels = sorted(set(sh.train.labels.tolist()))
        print(f"client {sh.client_id}: {len(sh.train)} train, {len(sh.local_test)} local-test, labels {labels}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    cases = run_gradcheck(seed=args.seed, cases=args.cases, max_layers=args.max_layers)
    worst = 0.0
    for c in cases:
        ok = c.max_rel_error < args.tol
        worst = max(worst, c.max_rel_error)
        print(f"case {c.index:>3}  layers={len(c.arch.param_layers)}  input={c.arch.input_shape}  "
              f"private={c.private_counts}  lambda={c.lam:.1f}  rel_err={c.max_rel_error:.2e}  {'PASS' if ok else 'FAIL'}")
    passed = worst < args.tol
    print(f"gradcheck {'PASS' if passed else 'FAIL'}: max relative error {worst:.2e} (tol {args.tol:g})")
    return EXIT_OK if passed else EXIT_RUNTIME


def read_run(run_dir: Path) -> tuple[dict, list[MetricRow]]:
    cfg = json.loads((run_dir / "config.json").read_text())
    label = cfg["strategy"] if cfg.get("name", "run") == "run" else cfg["name"]
    rows = []
    with open(run_dir / "metrics.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append(MetricRow(int(r["round"]), label, r["metric"], float(r["value"]), int(r["seed"]),
                                  int(r["client_id"]) if r["client_id"] else None))
    return cfg, rows


def cmd_report(args) -> int:
    all_rows = []
    by_s = defaultdict(list)
    for d in args.run_dirs:
        run_dir = Path(d)
        if not (run_dir / "metrics.csv").exists():
            raise ConfigurationError(f"{run_dir} is not a run directory (no metrics.csv)")
        cfg, rows = read_run(run_dir)
        all_rows += rows
        het = cfg["data"]["heterogeneity"]
        if het.get("kind") == "label_skew":
            last = max((r.round for r in rows), default=0)
            for r in rows:
                if r.client_id is None and r.round == last:
                    by_s[(r.strategy, r.metric, het["s"])].append(r.value)
    summary = summarize(all_rows)
    print(format_summary(summary))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "metric", "mean", "std", "n", "min", "max"])
        for (strategy, metric), s in summary.items():
            w.writerow([strategy, metric, f"{s['mean']:.4f}", f"{s['std']:.4f}", s["n"],
                        f"{s['min']:.4f}", f"{s['max']:.4f}"])
    curves = defaultdict(list)
    for r in all_rows:
        if r.client_id is None:
            curves[(r.strategy, r.metric, r.round)].append(r.value)
    _write_series(out / "accuracy_vs_round.csv", "round", curves)
    _write_series(out / "accuracy_vs_s.csv", "s", by_s)
    print(f"wrote {out / 'summary.csv'}, {out / 'accuracy_vs_round.csv'}, {out / 'accuracy_vs_s.csv'}")
    return EXIT_OK


def _write_series(path: Path, axis: str, groups: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "metric", axis, "mean", "std", "n"])
        for (strategy, metric, x), vals in sorted(groups.items()):
            v = np.asarray(vals)
            std = v.std(ddof=1) if len(v) > 1 else 0.0
            w.writerow([strategy, metric, x, f"{v.mean():.4f}", f"{std:.4f}", len(v)])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cd2pfed", description="Personalized federated learning simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train a federation and write a run directory")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--parallel", type=int, default=1, help="client worker cap; never changes results")
    run.set_defaults(func=cmd_run)

    part = sub.add_parser("partition", help="write the partition manifest only")
    part.add_argument("--config", required=True)
    part.add_argument("--seed", type=int)
    part.add_argument("--out")
    part.set_defaults(func=cmd_partition)

    gc = sub.add_parser("gradcheck", help="finite-difference check of training gradients")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--cases", type=int, default=20)
    gc.add_argument("--max-layers", type=int, default=4)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=cmd_gradcheck)

    rep = sub.add_parser("report", help="summarize run directories")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--out", default="report")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CD2Error, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
