"""Command line: ``bench run``, ``bench verify``, ``bench report``."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from pathlib import Path

from ..errors import ConfigError
from .runner import CONFIG_FILE, INTERVALS, REPORT_FILE, RunConfig, find_runs, run_experiment, verify_run


def expand_config(doc: dict, variant: str | None = None, seed: int | None = None) -> list[tuple[str, RunConfig]]:
    """Expand a config document into runs.

    ``variants`` lists variants to compare and ``sweep`` maps a field to a list
    of values (``workload.<name>`` addresses workload fields). A list-valued
    ``logging_enabled`` is shorthand for sweeping it. Each combination is one
    run, named by its sub-directory.
    """
    doc = dict(doc)
    variants = doc.pop("variants", None) or [doc.get("variant", "SmSa-X")]
    if variant is not None:
        variants = [variant]
    sweep = dict(doc.pop("sweep", None) or {})
    if isinstance(doc.get("logging_enabled"), list):
        sweep["logging_enabled"] = doc.pop("logging_enabled")
    axes = list(sweep.items())
    runs = []
    for v in variants:
        for values in itertools.product(*(vals for _, vals in axes)):
            d = dict(doc, variant=v, workload=dict(doc.get("workload", {"type": "smallbank"})))
            parts = [v]
            for (name, _), val in zip(axes, values):
                if name.startswith("workload."):
                    d["workload"][name.split(".", 1)[1]] = val
                else:
                    d[name] = val
                parts.append(f"{name.rsplit('.', 1)[-1]}={val}")
            if seed is not None:
                d["seed"] = seed
            runs.append(("/".join(parts), RunConfig.from_dict(d)))
    return runs


def cmd_run(args) -> int:
    doc = json.loads(Path(args.config).read_text())
    runs = expand_config(doc, args.variant, args.seed)
    out = Path(args.out)
    for sub, cfg in runs:
        run_dir = out if len(runs) == 1 else out / sub
        report = run_experiment(cfg, run_dir)
        print(f"{sub}: {report.committed} committed, {report.throughput:.1f} txn/s, "
              f"abort rate {report.abort_rate:.3f}, log bytes {report.log_bytes}")
    return 0


def cmd_verify(args) -> int:
    runs = find_runs(args.out)
    if not runs:
        print(f"no runs found under {args.out}", file=sys.stderr)
        return 2
    failed = 0
    for run_dir in runs:
        problems = verify_run(run_dir)
        bad = {k: v for k, v in problems.items() if v}
        status = "ok" if not bad else "FAILED"
        print(f"{run_dir}: {status}")
        for k, v in bad.items():
            failed += 1
            for line in v[:10]:
                print(f"  {k}: {line}")
    return 1 if failed else 0


def _load(run_dir: Path) -> tuple[dict, dict]:
    return json.loads((run_dir / REPORT_FILE).read_text()), json.loads((run_dir / CONFIG_FILE).read_text())


def _write(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_report(args) -> int:
    out = Path(args.out)
    runs = find_runs(out)
    if not runs:
        print(f"no runs found under {out}", file=sys.stderr)
        return 2
    loaded = [(d, *_load(d)) for d in runs]

    def point(d: Path, cfg: dict) -> tuple:
        # the sweep point: run path without its leading variant component
        rel = d.relative_to(out).parts if d != out else ()
        return cfg.get("name", ""), cfg["workload"]["type"], rel[1:]

    # NonTxn baseline per sweep point
    baseline = {point(d, cfg): rep["throughput"] for d, rep, cfg in loaded if rep["variant"] == "NonTxn"}
    throughput, latency, logging_rows = [], [], []
    for d, rep, cfg in loaded:
        run = str(d.relative_to(out)) if d != out else "."
        base = baseline.get(point(d, cfg))
        throughput.append({
            "run": run, "name": cfg.get("name", ""), "variant": rep["variant"], "workload": rep["workload"],
            "logging": rep["logging_enabled"], "throughput": rep["throughput"],
            "throughput_pact": rep["throughput_pact"], "throughput_act": rep["throughput_act"],
            "abort_rate": rep["abort_rate"], "overlap_rate": rep["overlap_rate"],
            "relative_to_nontxn": rep["throughput"] / base if base else "",
        })
        lat = {"run": run, "variant": rep["variant"]}
        for k in INTERVALS + ("total",):
            lat[k] = rep["latency_mean_ns"].get(k, 0.0)
        latency.append(lat)
        logging_rows.append({"run": run, "variant": rep["variant"], "log_mode": rep["log_mode"],
                             "logging": rep["logging_enabled"], "log_bytes": rep["log_bytes"],
                             "log_records": rep["log_records"], "committed": rep["committed"]})
    _write(out / "throughput.csv", throughput)
    _write(out / "latency.csv", latency)
    _write(out / "logging.csv", logging_rows)
    for row in throughput:
        rel = row["relative_to_nontxn"]
        rel = f"{rel:.2f}x" if rel != "" else "-"
        print(f"{row['run']:<28} {row['variant']:<8} {row['throughput']:>10.1f} txn/s  abort {row['abort_rate']:.3f}  rel {rel}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="Run and inspect actor transaction benchmarks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--variant")
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("verify", help="replay logs and check invariants for every run under --out")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_verify)
    rp = sub.add_parser("report", help="write CSV tables for every run under --out")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except AssertionError as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
