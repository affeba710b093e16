"""Command-line entry point: ``python3 -m sslab <subcommand> --config cfg.json``.

Exit codes: 0 success, 1 a verification check failed, 2 configuration or
usage error, 3 runtime error.  A rejected symmetry test is a result, not
an error, and exits 0.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .config import RunConfig, canonical_json, load_config
from .dgp import control_residuals, read_dataset, simulate_cross_section, write_dataset
from .errors import ConfigError, SslabError
from .harness import (lemma_check, monte_carlo_study, read_report,
                      run_oracle_check, run_symmetry_test, write_report, write_residual_field,
                      write_study_table)
from .oracle import PopulationOracle

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
LEMMA_TOLERANCE = 2e-3

log = logging.getLogger("sslab")


def _output_dir(cfg: RunConfig, args) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg: RunConfig):
    data = simulate_cross_section(cfg.system, cfg.design, cfg.n, cfg.seed, cfg.endogenous)
    if cfg.endogenous:
        data = control_residuals(data, mode="estimated")
    return data


def cmd_simulate(cfg: RunConfig, args) -> int:
    data = _dataset(cfg)
    path = _output_dir(cfg, args) / "dataset.csv"
    csv_path, meta_path = write_dataset(data, path)
    print(f"simulate: wrote {data.n} rows to {csv_path} (metadata {meta_path}), "
          f"fingerprint {data.fingerprint()[:16]}")
    return EXIT_OK


def cmd_oracle_verify(cfg: RunConfig, args) -> int:
    oracle = PopulationOracle(cfg.system, cfg.oracle)
    rows = lemma_check(oracle, cfg.grid, scheme=cfg.scheme)
    diffs = [r["abs_diff"] for r in rows if r["error"] is None]
    failed = [r for r in rows if r["error"] is not None]
    worst = max(diffs) if diffs else math.nan
    ok = bool(diffs) and not failed and worst <= LEMMA_TOLERANCE
    path = _output_dir(cfg, args) / "oracle_verify.json"
    doc = {"config": cfg.doc, "config_hash": cfg.hash, "tolerance": LEMMA_TOLERANCE,
           "max_abs_diff": worst if diffs else None, "passed": ok, "rows": rows}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(f"oracle-verify: max |lhs - rhs| = {worst:.3e} over {len(diffs)} comparisons "
          f"({len(failed)} failed); {'PASS' if ok else 'FAIL'} at {LEMMA_TOLERANCE:g}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_symmetry_check(cfg: RunConfig, args) -> int:
    oracle = PopulationOracle(cfg.system, cfg.oracle)
    report = run_oracle_check(oracle, cfg.grid, cfg.channel, cfg.seed, cfg.scheme,
                              config=cfg.doc, config_hash=cfg.hash)
    out = _output_dir(cfg, args)
    write_report(report, out / "symmetry_check.json")
    write_residual_field(report, out / "residual_field.csv")
    chosen = [r["residual"] for r in report.points if r["channel"] == cfg.channel.value]
    worst = max((abs(v) for v in chosen if v is not None), default=math.nan)
    print(f"symmetry-check: {cfg.system.name} {cfg.channel.value}: T = {report.statistic:.6g}, "
          f"max |residual| = {worst:.3e} over {len(chosen)} points")
    return EXIT_OK


def cmd_test(cfg: RunConfig, args) -> int:
    if args.data:
        data = read_dataset(args.data)
        if data.endogenous and data.v_hat is None:
            data = control_residuals(data, mode="estimated")
    else:
        data = _dataset(cfg)
    report = run_symmetry_test(data, cfg.grid, cfg.channel, cfg.B, cfg.seed, cfg.estimator,
                               cfg.scheme, config=cfg.doc, config_hash=cfg.hash)
    out = _output_dir(cfg, args)
    write_report(report, out / "report.json")
    write_residual_field(report, out / "residual_field.csv")
    print(f"test: {cfg.channel.value}: T = {report.statistic:.6g}, "
          f"p = {report.p_value:.4f} (B = {len(report.replicates)}, "
          f"{report.n_invalid} invalid replicates)")
    return EXIT_OK


def cmd_mc_study(cfg: RunConfig, args) -> int:
    cells = monte_carlo_study(cfg.mc_systems, cfg.mc_sizes, cfg.mc_reps, cfg.design, cfg.grid,
                              cfg.channel, cfg.B, cfg.seed, cfg.estimator, cfg.scheme,
                              labels=cfg.mc_labels)
    out = _output_dir(cfg, args)
    write_study_table(cells, out / "mc_study.csv")
    detail = [{"system": c.system, "n": c.n, "channel": c.channel, "statistics": c.statistics,
               "p_values": c.p_values, "errors": c.errors} for c in cells]
    doc = {"config": cfg.doc, "config_hash": cfg.hash, "cells": detail}
    (out / "mc_study.json").write_text(canonical_json(_nan_to_none(doc)) + "\n")
    summary = ", ".join(f"{c.system} n={c.n}: reject {c.reject_rate:.2f}" for c in cells)
    print(f"mc-study: {summary}")
    return EXIT_OK


def cmd_report(args) -> int:
    report = read_report(args.report)
    out = Path(args.out) if args.out else Path(args.report).with_suffix(".csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = write_residual_field(report, out)
    print(f"report: wrote {rows} residual rows to {out}")
    return EXIT_OK


def _nan_to_none(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


COMMANDS = {
    "simulate": (cmd_simulate, "simulate a cross-section and write dataset CSV + metadata"),
    "oracle-verify": (cmd_oracle_verify,
                      "compare the quantile-side expression with the structural one"),
    "symmetry-check": (cmd_symmetry_check, "population residual field under every channel"),
    "test": (cmd_test, "bootstrap symmetry test on a dataset"),
    "mc-study": (cmd_mc_study, "Monte Carlo size/power table"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sslab", description="Slutsky symmetry laboratory")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a dotted configuration key (repeatable)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        if name == "test":
            p.add_argument("--data", help="dataset CSV written by 'simulate'; "
                                          "simulated from the configuration when omitted")
    p = sub.add_parser("report", help="render a test report as a residual-field CSV")
    p.add_argument("--report", required=True, help="report JSON")
    p.add_argument("--out", help="CSV path (default: report path with .csv suffix)")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args)
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command][0](cfg, args)
    except ConfigError as exc:
        print(f"sslab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SslabError, OSError) as exc:
        print(f"sslab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
