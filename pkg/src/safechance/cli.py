"""Command-line entry point: ``safechance {generate,train,eval,calibrate,conformal,report,all}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from . import harness
from .config import PIPELINES, ConfigError, load

EXIT_OK, EXIT_CONFIG, EXIT_MISSING = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="safechance", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="roll out and write the four data splits")
    for name in ("train", "eval", "calibrate", "conformal"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--pipeline", choices=PIPELINES, required=True)
        p.add_argument("--k", type=int, required=True, help="prediction horizon")
        p.add_argument("--m", type=int, help="window length (first configured when omitted)")
        if name == "eval":
            p.add_argument("--adapted", action="store_true", help="add raw vs test-time-adapted evaluator rows")
    sub.add_parser("report", parents=[common], help="join result rows into report.csv/json and f1_vs_k.csv")
    sub.add_parser("all", parents=[common], help="generate, then train/eval/calibrate/conformal every pipeline")
    return parser


def _config(args):
    cfg = load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    return dataclasses.replace(cfg, **changes).validate() if changes else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "generate":
            out = harness.cmd_generate(cfg)
            print(json.dumps({s: d["seed_range"] for s, d in out["splits"].items()}))
        elif args.command == "train":
            for d in harness.cmd_train(cfg, args.pipeline, args.k, args.m):
                print(d)
        elif args.command == "eval":
            rows = harness.cmd_eval(cfg, args.pipeline, args.k, args.adapted, args.m)
            for r in rows:
                print(f"{r['pipeline']} k={r['k']} {r['set']}/{r['variant']}: f1={r['f1']:.4f}")
        elif args.command == "calibrate":
            r = harness.cmd_calibrate(cfg, args.pipeline, args.k, args.m)["rows"][0]
            print(f"{r['calibrator']}: ece {r['ece_pre']:.4f} -> {r['ece_post']:.4f}")
        elif args.command == "conformal":
            r = harness.cmd_conformal(cfg, args.pipeline, args.k, args.m)["rows"][0]
            print(f"coverage {r['coverage_mean']:.4f} +- {r['coverage_std']:.4f}, "
                  f"bound {r['bound_mean']:.4f} +- {r['bound_std']:.4f}")
        elif args.command == "report":
            print(f"{len(harness.cmd_report(cfg))} rows")
        else:
            print(f"{len(harness.cmd_all(cfg))} rows")
    except harness.MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
