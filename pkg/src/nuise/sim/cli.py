"""Command-line interface: ``nuise simulate | estimate | report``.

Exit codes: 0 success, 1 bad input (configuration, log or directory), 2
runtime failure.
"""
import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .logio import (
    LogFormatError,
    estimate_columns,
    log_columns,
    log_rows,
    read_json,
    read_log,
    recorded_stream,
    write_log,
)
from .metrics import MonteCarloError, build_series, run_monte_carlo
from .simulate import make_bank, replay

__all__ = ["main", "build_parser"]

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2


def _fmt(x):
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return "-"
    return f"{x:.6g}" if isinstance(x, float) else str(x)


def _print_table(title, rows, out):
    print(f"\n{title}", file=out)
    if not rows:
        print("  (none)", file=out)
        return
    width = max(len(k) for k, _ in rows)
    print(f"  {'':<{width}}  {'mean':>12} {'stderr':>12} {'n':>6}", file=out)
    for k, s in rows:
        print(f"  {k:<{width}}  {_fmt(s.get('mean')):>12} {_fmt(s.get('stderr')):>12} {_fmt(s.get('n')):>6}",
              file=out)


def print_summary(report, out=None):
    """Human-readable tables from a report dictionary (as stored in ``report.json``)."""
    out = sys.stdout if out is None else out
    n_abort = sum(report["aborted"])
    print(f"trials: {len(report['seeds'])} (aborted: {n_abort}), seeds {report['seeds'][0]}..{report['seeds'][-1]}",
          file=out)
    for key, title in [
        ("state_rmse", "state RMSE"),
        ("anomaly_rmse", "anomaly-estimate RMSE"),
        ("detection_rate", "detection rate"),
        ("detection_delay", "detection delay (steps)"),
        ("false_positive_rate", "false-positive rate (injection-free steps)"),
    ]:
        _print_table(title, list(report[key].items()), out)
    _print_table("mode identification", [("accuracy", report["mode_id_accuracy"])], out)


def _cmd_simulate(args):
    cfg = load_config(args.config)
    report = run_monte_carlo(cfg, args.out)
    print_summary(read_json(Path(args.out) / "report.json"))
    logging.getLogger(__name__).info("wrote %d trial logs to %s", len(report.seeds), args.out)
    return EXIT_OK


def _cmd_estimate(args):
    cfg = load_config(args.config)
    cols, rows = read_log(args.log)
    bank = make_bank(cfg, np.zeros(3))
    expected = log_columns([str(m) for m in bank.mode_ids], cfg.sensors)
    if cols != expected:
        raise LogFormatError(f"{args.log}: columns do not match the configuration's sensors and modes")
    x0, stream = recorded_stream(rows, cfg.sensors)
    logs = replay(cfg, x0, stream)
    mode_ids = [str(m) for m in bank.mode_ids]
    if args.out:
        write_log(args.out, logs, mode_ids, cfg.sensors)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(expected)
        w.writerows(log_rows(logs, mode_ids, cfg.sensors))
    if args.check:
        est = estimate_columns(mode_ids, cfg.sensors)
        idx = [expected.index(c) for c in est]
        mismatches = 0
        for rec, new in zip(rows, log_rows(logs, mode_ids, cfg.sensors)):
            if any(rec[c] != new[i] for c, i in zip(est, idx)):
                mismatches += 1
        if mismatches:
            print(f"replay differs from the log on {mismatches} rows", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"replay matches the log on all {len(rows)} rows", file=sys.stderr)
    return EXIT_OK


def _cmd_report(args):
    src = Path(args.input)
    if not src.is_dir():
        raise LogFormatError(f"{src}: not a directory")
    logs = sorted(src.glob("trial_*.csv"))
    if not logs:
        raise LogFormatError(f"{src}: no trial logs found")
    report_path = src / "report.json"
    if not report_path.exists():
        raise LogFormatError(f"{src}: report.json is missing")
    print_summary(read_json(report_path))
    header, series = build_series(logs)
    out = Path(args.series) if args.series else src / "series.csv"
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([repr(v) if isinstance(v, float) else v for v in row] for row in series)
    print(f"\nseries: {out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="nuise", description="NUISE mode-bank simulation and replay.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress and warnings")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run Monte-Carlo trials and write logs plus report.json")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=_cmd_simulate)

    e = sub.add_parser("estimate", help="replay a recorded (u, z) stream through the mode bank")
    e.add_argument("--log", required=True, help="trial CSV written by simulate")
    e.add_argument("--config", required=True)
    e.add_argument("--out", help="write the replayed log here instead of stdout")
    e.add_argument("--check", action="store_true",
                   help="fail unless the replayed estimates equal the logged ones exactly")
    e.set_defaults(func=_cmd_estimate)

    r = sub.add_parser("report", help="summary tables and plot-ready series for a simulate directory")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--series", help="series CSV path (default: <in>/series.csv)")
    r.set_defaults(func=_cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, LogFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except MonteCarloError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, ArithmeticError, np.linalg.LinAlgError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
