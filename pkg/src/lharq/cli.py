"""Command-line driver: ``lharq {calibrate,sweep,tune-delta,oracle-check,export-mi}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

from . import infotheory
from .errormodel import ConfigurationError, TableValidationError
from .policy import CalibrationError
from .sweep import (
    SWEEP_COLUMNS,
    TUNE_COLUMNS,
    ConfigError,
    SweepConfig,
    calibrate_rows,
    oracle_rows,
    run_sweep,
    run_tune,
)

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION = 0, 2, 3


def _csv_list(cast):
    return lambda s: [cast(x) for x in s.split(",") if x.strip()]


def _rates(s):
    return "continuous" if s.strip() == "continuous" else _csv_list(float)(s)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--schemes", type=_csv_list(str), help="e.g. amc,ir4,ir4_drop,lharq2,vl4")
    common.add_argument("--snr-db", type=_csv_list(float), help="average SNR grid in dB")
    common.add_argument("--fd-tau", type=float)
    common.add_argument("--corr", type=float, help="correlation factor (wins over --fd-tau)")
    common.add_argument("--constellation", type=_csv_list(int), help="QAM orders, e.g. 16,64")
    common.add_argument("--rates", type=_rates, help="comma-separated rates or 'continuous'")
    common.add_argument("--calibration", choices=("optimal", "per_target"))
    common.add_argument("--epsilon", type=float)
    common.add_argument("--eps-b", type=float)
    common.add_argument("--log2-f", type=int)
    common.add_argument("--mixing", choices=("closed_form", "discrete", "none"))
    common.add_argument("--delta-mode", choices=("fixed", "tuned"))
    common.add_argument("--delta", type=float)
    common.add_argument("--delta-max", type=float)
    common.add_argument("--n-blocks", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--model", choices=("threshold", "empirical", "synthetic"))
    common.add_argument("--per-table")
    common.add_argument("--threads", type=int)
    common.add_argument("-o", "--output", help="output CSV (default: stdout)")

    ap = argparse.ArgumentParser(prog="lharq", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("calibrate", parents=[common], help="AMC thresholds per SNR point")
    sub.add_parser("sweep", parents=[common], help="throughput vs average SNR")
    sub.add_parser("tune-delta", parents=[common], help="aggressiveness factor search")
    sub.add_parser("oracle-check", parents=[common], help="Monte Carlo vs exact oracle")
    sub.add_parser("export-mi", parents=[common], help="write the MI table")
    return ap


_KEYS = ("schemes", "snr_db", "fd_tau", "corr", "constellation", "rates", "calibration",
         "epsilon", "eps_b", "log2_f", "mixing", "delta_mode", "delta", "delta_max",
         "n_blocks", "seed", "model", "per_table", "threads", "output")


def load_config(args):
    cfg = SweepConfig.from_json(args.config) if args.config else SweepConfig()
    return cfg.replace(**{k: getattr(args, k) for k in _KEYS})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(rows, columns, path):
    fh = open(path, "w", encoding="utf-8", newline="") if path else sys.stdout
    try:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(columns)
        for r in rows:
            wr.writerow([_fmt(r[c]) for c in columns])
    finally:
        if path:
            fh.close()


def _run(args):
    cfg = load_config(args)
    if args.command == "sweep":
        write_rows(run_sweep(cfg), SWEEP_COLUMNS, cfg.output)
        return EXIT_OK
    if args.command == "tune-delta":
        cfg = cfg.replace(delta_mode="tuned")
        write_rows(run_tune(cfg), TUNE_COLUMNS, cfg.output)
        return EXIT_OK
    if args.command == "calibrate":
        rows = calibrate_rows(cfg)
        for r in rows:
            print(f"# {r['avg_snr_db']:g} dB  R={r['rate']:g}  threshold {r['threshold_db']:.2f} dB",
                  file=sys.stderr)
        write_rows(rows, ("avg_snr_db", "rate", "threshold_db"), cfg.output)
        return EXIT_OK
    if args.command == "oracle-check":
        rows = oracle_rows(cfg)
        write_rows(rows, ("scheme", "mc", "ci_halfwidth", "exact", "abs_diff", "pass"),
                   cfg.output)
        return EXIT_OK if all(r["pass"] for r in rows) else EXIT_VALIDATION
    if args.command == "export-mi":
        table = infotheory.mi_table(cfg.constellation_key)
        if cfg.output:
            with open(cfg.output, "w", encoding="utf-8", newline="") as fh:
                table.to_csv(fh)
        else:
            table.to_csv(sys.stdout)
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, ConfigurationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TableValidationError, CalibrationError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
