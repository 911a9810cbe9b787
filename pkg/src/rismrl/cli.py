"""Command-line entry point: ``rismrl {run,train,report,validate-config}``.

Failures print a one-line JSON object ``{"error": ..., "message": ...}`` on
stderr and exit with status 2 (usage errors exit with argparse's status 2
as well).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import harness
from .channel import SystemConfig, desk_config, table1_config


def _load_spec(args) -> harness.ExperimentSpec:
    base = table1_config() if args.preset == "table1" else desk_config()
    if args.spec:
        spec = harness.ExperimentSpec.load(args.spec, base)
    else:
        spec = harness.preset_spec(args.preset)
    if args.seed is not None:
        spec = dataclasses.replace(spec, master_seed=args.seed)
    return spec


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_validate(args) -> int:
    if args.spec:
        text = Path(args.spec).read_text()
        data = json.loads(text)
        if "sweep" in data:
            print(_load_spec(args).to_json())
        else:
            print(SystemConfig.from_dict(data).to_json())
    else:
        print(_load_spec(args).to_json())
    return 0


def cmd_train(args) -> int:
    spec = _load_spec(args)
    paths = harness.train_agents(spec, args.out, log=_log)
    for p in paths:
        print(p)
    return 0


def cmd_run(args) -> int:
    spec = _load_spec(args)
    if args.train_inline:
        harness.train_agents(spec, args.out, log=_log)
    rows = harness.run_sweep(spec, args.out, threads=args.threads, log=_log)
    print(harness.format_table(rows))
    print(Path(args.out) / f"results_{spec.name}.csv")
    return 0


def cmd_report(args) -> int:
    spec = _load_spec(args)
    src = Path(args.out) / f"results_{spec.name}.csv"
    rows = harness.read_report(src)
    dest = harness.write_report(rows, Path(args.out) / f"report_{spec.name}.csv")
    print(harness.format_table(rows))
    print(dest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rismrl", description="RIS downlink design experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    verbs = {
        "run": (cmd_run, "evaluate a sweep and write results_<name>.csv"),
        "train": (cmd_train, "train the learning methods of a sweep"),
        "report": (cmd_report, "re-emit a results CSV as a plot-ready report and table"),
        "validate-config": (cmd_validate, "check a spec or system config and print it normalized"),
    }
    for name, (fn, help_text) in verbs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--spec", help="ExperimentSpec (or SystemConfig) JSON file")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", default="runs", help="run directory (default: runs)")
        p.add_argument("--preset", choices=("desk", "table1"), default="desk",
                       help="base configuration when the spec has none, or the default sweep")
        p.add_argument("--threads", type=int, default=1, help="worker threads for classical methods")
        if name == "run":
            p.add_argument("--train-inline", action="store_true",
                           help="train learning methods before evaluating")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # report every failure as machine-readable JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
