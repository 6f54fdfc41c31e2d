"""Command-line runner: ``lasg run``, ``lasg compare`` and ``lasg validate``.

Exit codes: 0 success, 2 configuration or input error, 3 run aborted on a
numerical failure (partial metrics are still written), 4 I/O error.
"""
import argparse
import csv
import math
import os
import sys

from lasg.comm_rules import validate_config
from lasg.config import load_config
from lasg.engine import simulate
from lasg.errors import ConfigError, NumericalError, ParseError
from lasg.metrics import (bits_to_target, loss_at_bits, loss_at_round, read_metrics,
                          uploads_to_target)
from lasg.models import logistic_smoothness

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_IO = 0, 2, 3, 4

SUMMARY_COLUMNS = ("run", "variant", "rounds", "final_loss", "total_uploads", "total_downloads",
                   "total_bits_up", "total_bits_down", "grad_evals")
CURVE_COLUMNS = ("k", "loss", "cum_uploads", "cum_downloads", "cum_bits_up", "cum_bits_down",
                 "cum_grad_evals")
# keys that must agree for two runs to be comparable
DATA_KEYS = ("dataset", "synthetic_kind", "n", "dim", "scale", "flip", "data_seed", "seed",
             "partition", "workers", "alpha", "partition_seed", "model", "l2", "hidden_dim")


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _prepare(config_path):
    cfg = load_config(config_path)
    data = cfg.load_data()
    shards = cfg.shards(data)
    model = cfg.model_spec(data)
    run_cfg = cfg.run_config(model)
    return cfg, shards, run_cfg


def theorem_warnings(run_cfg, shards):
    """Convergence-theorem warnings; L is the largest per-worker smoothness constant."""
    if run_cfg.smoothness is not None:
        L = max(run_cfg.smoothness)
    elif run_cfg.model.kind == "logistic":
        N = sum(len(s) for s in shards)
        L = max(logistic_smoothness(s.X, len(s) / N, run_cfg.model.l2, run_cfg.model.num_classes)
                for s in shards)
    else:
        L = math.inf  # unknown: only the stepsize bound can be checked
    return validate_config(run_cfg.rule, run_cfg.schedule, L, quantized=run_cfg.quantized)


def _write_csv(path, columns, rows, append=False):
    new = not (append and os.path.exists(path) and os.path.getsize(path) > 0)
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        if new:
            writer.writeheader()
        writer.writerows(rows)


def write_outputs(log, out_dir, run_name, summary_path=None):
    os.makedirs(out_dir, exist_ok=True)
    log.write(os.path.join(out_dir, "metrics.jsonl"))
    row = dict(log.summary(), run=run_name)
    _write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_COLUMNS, [row])
    curve = [r for r in log.records if "loss" in r]
    _write_csv(os.path.join(out_dir, "curve.csv"), CURVE_COLUMNS, curve)
    if summary_path:
        _write_csv(summary_path, SUMMARY_COLUMNS, [row], append=True)


def cmd_run(args):
    try:
        cfg, shards, run_cfg = _prepare(args.config)
    except (ConfigError, ParseError) as exc:
        _err(exc)
        return EXIT_CONFIG
    except OSError as exc:
        _err(exc)
        return EXIT_IO
    out_dir = args.out or cfg.output
    if out_dir is None:
        _err("no output directory: pass --out or set key 'output'")
        return EXIT_CONFIG
    for msg in theorem_warnings(run_cfg, shards):
        print(f"warning: {msg}", file=sys.stderr)
    run_name = os.path.splitext(os.path.basename(args.config))[0]
    status = EXIT_OK
    try:
        log = simulate(run_cfg, shards, meta={"config": cfg.echo()})
    except NumericalError as exc:
        _err(f"run aborted: {exc}")
        log = exc.log
        status = EXIT_ABORT
    try:
        write_outputs(log, out_dir, run_name, args.summary)
    except OSError as exc:
        _err(exc)
        return EXIT_IO
    if status == EXIT_OK:
        s = log.summary()
        print(f"{s['variant']}: final loss {s['final_loss']:.6g}, {s['total_uploads']} uploads, "
              f"{s['total_bits_up']} bits up -> {out_dir}")
    return status


def cmd_validate(args):
    try:
        cfg, shards, run_cfg = _prepare(args.config)
    except (ConfigError, ParseError) as exc:
        _err(exc)
        return EXIT_CONFIG
    except OSError as exc:
        _err(exc)
        return EXIT_IO
    warnings = theorem_warnings(run_cfg, shards)
    for msg in warnings:
        print(f"warning: {msg}")
    print(f"config ok: {cfg.variant}, M={cfg.workers}, K={cfg.rounds}, "
          f"{len(warnings)} theorem warning(s)")
    return EXIT_OK


def _metrics_path(path):
    return os.path.join(path, "metrics.jsonl") if os.path.isdir(path) else path


def _fmt(value, beyond=False):
    if value is None:
        text = "-"
    elif isinstance(value, float):
        text = f"{value:.6g}"
    else:
        text = str(value)
    return text + ("*" if beyond else "")


def _table(header, rows):
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
             for r in [header, *rows]]
    return "\n".join(lines)


def _pick_baseline(runs, explicit):
    if explicit:
        return next(r for r in runs if r["path"] == explicit)
    for label in ("SyncSGD", "QSGD"):
        for r in runs:
            if r["summary"]["variant"] == label:
                return r
    return None


def cmd_compare(args):
    runs = []
    try:
        paths = [_metrics_path(p) for p in args.files]
        baseline_path = _metrics_path(args.baseline) if args.baseline else None
        if baseline_path and baseline_path not in paths:
            paths.append(baseline_path)
        for path in paths:
            records, summary = read_metrics(path)
            runs.append({"path": path, "records": records, "summary": summary})
    except (OSError, ValueError) as exc:
        _err(exc)
        return EXIT_IO

    ref = runs[0]["summary"].get("config", {})
    for r in runs[1:]:
        other = r["summary"].get("config", {})
        diff = [k for k in DATA_KEYS if ref.get(k) != other.get(k)]
        if diff:
            print(f"warning: {runs[0]['path']} and {r['path']} differ in {', '.join(diff)}; "
                  "comparison may be meaningless", file=sys.stderr)

    base = _pick_baseline(runs, baseline_path)
    target = args.target
    if target is None and base is not None and base["summary"]["final_loss"] is not None:
        target = base["summary"]["final_loss"] * (1 + args.tolerance)

    labels = [r["summary"]["variant"] for r in runs]
    if len(set(labels)) < len(labels):
        labels = [f"{l} ({r['path']})" for l, r in zip(labels, runs)]
    header = ["variant", "rounds", "final_loss", "uploads", "bits_up", "grad_evals"]
    header += [f"loss@k={n}" for n in args.rounds] + [f"loss@bits={b}" for b in args.bits]
    header += ["uploads_to_target", "bits_to_target", "upload_savings"]
    base_uploads = None
    if base is not None and target is not None:
        base_uploads = uploads_to_target(base["records"], target)
    marked = False
    rows = []
    for label, r in zip(labels, runs):
        s, rec = r["summary"], r["records"]
        row = [label, s["rounds"], _fmt(s["final_loss"]), s["total_uploads"], s["total_bits_up"],
               s["grad_evals"]]
        for n in args.rounds:
            value, beyond = loss_at_round(rec, n)
            marked |= beyond
            row.append(_fmt(value, beyond))
        for b in args.bits:
            value, beyond = loss_at_bits(rec, b)
            marked |= beyond
            row.append(_fmt(value, beyond))
        ups = uploads_to_target(rec, target) if target is not None else None
        bits = bits_to_target(rec, target) if target is not None else None
        savings = None
        if base_uploads is not None and ups:
            savings = base_uploads / ups
        row += [_fmt(ups), _fmt(bits), "-" if savings is None else f"{savings:.2f}x"]
        rows.append(row)
    print(_table(header, rows))
    if target is not None:
        src = "given" if args.target is not None else f"baseline final loss +{args.tolerance:.0%}"
        print(f"target loss {target:.6g} ({src})")
    if base is None:
        print("no SyncSGD/QSGD baseline among the files; savings not computed")
    if marked:
        print("* budget beyond the end of the run: last available value shown")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="lasg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment config")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides key 'output')")
    p.add_argument("--summary", help="also append the summary row to this CSV file")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="compare metrics files")
    p.add_argument("files", nargs="+", help="metrics.jsonl files or run directories")
    p.add_argument("--rounds", type=int, action="append", default=[], metavar="N",
                   help="report loss at round N (repeatable)")
    p.add_argument("--bits", type=int, action="append", default=[], metavar="B",
                   help="report loss at an upload-bit budget B (repeatable)")
    p.add_argument("--target", type=float, help="target loss for savings ratios")
    p.add_argument("--tolerance", type=float, default=0.02,
                   help="default target = baseline final loss * (1 + tolerance)")
    p.add_argument("--baseline", help="baseline metrics file (default: the SyncSGD/QSGD file)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate", help="check a config and its theorem constraints")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
