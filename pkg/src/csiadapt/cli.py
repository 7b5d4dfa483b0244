"""Command-line experiment runner.

Subcommands: train-baseline, inject-shift, run-closed-loop, eval,
gradcheck, synccheck, protofuzz, report. Exit codes: 0 success,
1 property/acceptance failure, 2 configuration error.

Configuration precedence: file (--config) < environment (CSIADAPT_*,
double underscore for dots) < --set key=value flags.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .checks import gradcheck_report, protofuzz_report, synccheck_report
from .config import ConfigError, ExperimentConfig, flatten_config, load_config
from .experiments import make_profile, run_closed_loop, shift_spec_from, train_baseline
from .gru import load_checkpoint
from .orchestrator import evaluate
from .reports import (
    MetricsTable,
    events_to_jsonl,
    read_metrics_json,
    write_latency_json,
    write_metrics_csv,
    write_metrics_json,
)
from .simulator import apply_domain_shift

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="dotted-key config file")
    parser.add_argument(
        "--set",
        dest="sets",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config value (repeatable)",
    )
    parser.add_argument("--out", help="output directory (overrides run.out_dir)")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.sets)
    if getattr(args, "out", None):
        cfg = replace(cfg, run=replace(cfg.run, out_dir=args.out))
    return cfg


def _out_dir(cfg: ExperimentConfig) -> str:
    os.makedirs(cfg.run.out_dir, exist_ok=True)
    return cfg.run.out_dir


def _checkpoint_path(cfg: ExperimentConfig, seed: int) -> str:
    return os.path.join(cfg.run.out_dir, f"baseline_seed{seed}.ckpt")


def _dump_resolved_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(flatten_config(cfg), fh, sort_keys=True, indent=2, default=str)
        fh.write("\n")


def cmd_train_baseline(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    tables = []
    for seed in cfg.run.seeds:
        result = train_baseline(cfg, seed)
        with open(_checkpoint_path(cfg, seed), "wb") as fh:
            fh.write(result.checkpoint)
        tables.append(result.table)
        print(f"seed {seed}: baseline overall {100 * result.table.overall:.2f}%")
    write_metrics_csv(os.path.join(out, "metrics_baseline.csv"), tables)
    write_metrics_json(os.path.join(out, "metrics_baseline.json"), tables)
    _dump_resolved_config(cfg, os.path.join(out, "config_resolved.json"))
    mean = float(np.mean([t.overall for t in tables]))
    print(f"baseline mean over {len(tables)} seeds: {100 * mean:.2f}%")
    return EXIT_OK


def cmd_inject_shift(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    profile = make_profile(cfg)
    spec = shift_spec_from(cfg)
    shifted = profile if spec is None else apply_domain_shift(profile, spec)
    doc = {
        "preset": cfg.shift.preset,
        "attenuation_db": shifted.attenuation_db,
        "phase_offset": shifted.phase_offset,
        "snr_db": shifted.snr_db,
        "taps": [[d, g.real, g.imag] for d, g in shifted.taps],
        "subcarrier_gains": list(shifted.subcarrier_gains),
    }
    path = os.path.join(out, "shifted_profile.json")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"shifted profile written to {path}")
    return EXIT_OK


def cmd_run_closed_loop(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    all_tables = []
    statuses = {}
    aborted = []
    for seed in cfg.run.seeds:
        ckpt_path = _checkpoint_path(cfg, seed)
        if not os.path.exists(ckpt_path):
            print(f"error: baseline checkpoint missing: {ckpt_path} (run train-baseline first)", file=sys.stderr)
            return EXIT_CONFIG
        with open(ckpt_path, "rb") as fh:
            params = load_checkpoint(fh.read())
        result = run_closed_loop(cfg, seed, params)
        statuses[str(seed)] = result.status
        if result.status.startswith("aborted"):
            aborted.append(seed)
        for table in result.tables.values():
            all_tables.append(table)
        with open(os.path.join(out, f"events_seed{seed}.jsonl"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(events_to_jsonl(result.events))
        write_latency_json(os.path.join(out, f"latency_seed{seed}.json"), result.latency)
        shifted = result.tables["shifted"].overall
        recovered = result.tables.get("recovered")
        rec_txt = f"recovered {100 * recovered.overall:.2f}%" if recovered else "no recovery"
        print(f"seed {seed}: {result.status}; shifted {100 * shifted:.2f}%, {rec_txt}")
    for phase in ("shifted", "recovered"):
        tables = [t for t in all_tables if t.phase == phase]
        if tables:
            write_metrics_csv(os.path.join(out, f"metrics_{phase}.csv"), tables)
            write_metrics_json(
                os.path.join(out, f"metrics_{phase}.json"), tables, extra={"statuses": statuses}
            )
    _dump_resolved_config(cfg, os.path.join(out, "config_resolved.json"))
    if aborted:
        print(f"aborted cycles for seeds {aborted} (reported, see statuses)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    with open(args.checkpoint, "rb") as fh:
        params = load_checkpoint(fh.read())
    from .orchestrator import SimEnvironment
    from .experiments import derive_seed

    env = SimEnvironment(
        make_profile(cfg),
        rate_hz=cfg.sim.rate_hz,
        window=cfg.sim.window,
        segment_s=cfg.sim.segment_s,
        seed=derive_seed(cfg.run.seeds[0], 911),
    )
    if args.shifted:
        spec = shift_spec_from(cfg)
        if spec is not None:
            env.inject_shift(spec)
    x, y = env.eval_dataset(cfg.run.eval_windows_per_class, salt=2)
    result = evaluate(params, x, y)
    table = MetricsTable(
        "shifted" if args.shifted else "baseline",
        cfg.run.seeds[0],
        tuple(result.per_class),
        result.overall,
    )
    for row in table.rows():
        print(f"{row['class']:>12}: {row['accuracy_pct']:.2f}%")
    if args.json_out:
        write_metrics_json(args.json_out, [table])
    return EXIT_OK


def _run_check(report: dict, out_path: str | None) -> int:
    if out_path:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
            fh.write("\n")
    status = "PASS" if report["passed"] else "FAIL"
    print(f"{report['check']}: {status} ({report.get('runtime_s', 0.0):.1f}s)")
    if not report["passed"]:
        print(json.dumps(report, sort_keys=True, indent=2))
    return EXIT_OK if report["passed"] else EXIT_FAILURE


def cmd_gradcheck(args) -> int:
    return _run_check(gradcheck_report(seed=args.seed), args.json_out)


def cmd_synccheck(args) -> int:
    return _run_check(synccheck_report(trials=args.trials, seed=args.seed), args.json_out)


def cmd_protofuzz(args) -> int:
    return _run_check(protofuzz_report(cases=args.cases, seed=args.seed), args.json_out)


def cmd_report(args) -> int:
    cfg = _load(args)
    out = cfg.run.out_dir
    phases = ["baseline", "shifted", "recovered"]
    print(f"{'phase':<10} {'seed':>4} {'overall %':>10}")
    rows = []
    for phase in phases:
        path = os.path.join(out, f"metrics_{phase}.json")
        if not os.path.exists(path):
            continue
        doc = read_metrics_json(path)
        for table in doc["tables"]:
            rows.append((phase, table["seed"], table["overall"]))
            print(f"{phase:<10} {table['seed']:>4} {100 * table['overall']:>10.2f}")
    if not rows:
        print(f"no metrics files under {out}")
        return EXIT_FAILURE
    summary = {}
    for phase in phases:
        vals = [o for p, _s, o in rows if p == phase]
        if vals:
            summary[phase] = float(np.mean(vals))
    print("means:", ", ".join(f"{p}={100 * v:.2f}%" for p, v in summary.items()))
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"overall_mean": summary}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csiadapt",
        description="Closed-loop CSI activity-recognition adaptation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-baseline", help="train and evaluate the in-domain student")
    _add_common(p)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("inject-shift", help="write the shifted channel profile")
    _add_common(p)
    p.set_defaults(func=cmd_inject_shift)

    p = sub.add_parser("run-closed-loop", help="shift, trigger, adapt, re-evaluate")
    _add_common(p)
    p.set_defaults(func=cmd_run_closed_loop)

    p = sub.add_parser("eval", help="evaluate a checkpoint on generated data")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shifted", action="store_true", help="evaluate under the configured shift")
    p.add_argument("--json-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json-out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synccheck", help="pairing vs brute-force oracle")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--json-out")
    p.set_defaults(func=cmd_synccheck)

    p = sub.add_parser("protofuzz", help="wire-protocol fuzz and round-trips")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=10_000)
    p.add_argument("--json-out")
    p.set_defaults(func=cmd_protofuzz)

    p = sub.add_parser("report", help="summarize metrics files in the output dir")
    _add_common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
