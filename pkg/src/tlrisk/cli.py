"""Command line entry point: simulate, study, summarize, validate."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .data import DataError, load_grouped_csv
from .runner import (ExperimentConfig, eligible_groups, read_results, run, summarize,
                     write_outputs, write_summary)

log = logging.getLogger("tlrisk")


def _split_list(text: str | None):
    if text is None:
        return None
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--jobs", type=int, help="worker processes (default 1)")
    p.add_argument("--methods", help="comma-separated method names")
    p.add_argument("--thresholds", help="comma-separated thresholds, e.g. 0.5,prevalence,youden")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tlrisk", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run the simulation scenario grid")
    _add_common(s)
    s.add_argument("--replicates", type=int, help="replicates per scenario (default 20)")

    s = sub.add_parser("study", help="per-group cross-validated study on a grouped CSV")
    _add_common(s)
    s.add_argument("--input", help="grouped CSV path")
    s.add_argument("--label-column")
    s.add_argument("--group-column")
    s.add_argument("--k-folds", type=int)
    s.add_argument("--single-feature", help="feature column for the single-feature baseline")
    s.add_argument("--min-positives", type=int)
    s.add_argument("--recalibration", choices=["holdout", "none"])

    s = sub.add_parser("summarize", help="aggregate a results CSV")
    s.add_argument("results", help="results CSV")
    s.add_argument("--out", default="-", help="summary CSV path ('-' for stdout)")

    s = sub.add_parser("validate", help="schema and stratification checks only")
    s.add_argument("input", help="grouped CSV path")
    s.add_argument("--label-column", default="label")
    s.add_argument("--group-column", default="group")
    s.add_argument("--k-folds", type=int, default=3)
    s.add_argument("--min-positives", type=int)
    return ap


def _config(args, mode: str) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig(mode=mode)
    if cfg.mode != mode:
        raise ValueError(f"config mode is {cfg.mode!r}, command needs {mode!r}")
    upd = {}
    if args.seed is not None:
        upd["seed"] = args.seed
    if args.jobs is not None:
        upd["jobs"] = args.jobs
    if args.methods is not None:
        upd["methods"] = _split_list(args.methods)
    if args.thresholds is not None:
        upd["thresholds"] = _split_list(args.thresholds)
    for name in ("replicates", "label_column", "group_column", "k_folds", "single_feature",
                 "min_positives", "recalibration"):
        v = getattr(args, name, None)
        if v is not None:
            upd[name] = v
    if getattr(args, "input", None):
        upd["input_path"] = args.input
    return replace(cfg, **upd) if upd else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("simulate", "study"):
            cfg = _config(args, "simulation" if args.command == "simulate" else "cohort")
            rows = run(cfg)
            out = write_outputs(cfg, rows, args.out)
            print(f"wrote {len(rows)} result rows to {out / 'results.csv'}")
        elif args.command == "summarize":
            summary = summarize(read_results(args.results))
            write_summary(summary, sys.stdout if args.out == "-" else args.out)
        else:
            ds = load_grouped_csv(args.input, args.label_column, args.group_column)
            ok, skipped = eligible_groups(ds, args.k_folds, args.min_positives)
            print(f"{ds.n} rows, {ds.K} groups, {len(ds.feature_names)} features")
            for c in ds.cohorts:
                status = "ok" if c.group_id in ok else f"skip: {skipped[c.group_id]}"
                print(f"  {c.group_id}: n={c.m} positives={int(c.labels.sum())} {status}")
    except (DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
