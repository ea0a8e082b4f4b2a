"""Command-line entry point: ``xdistill {gen-data,train-teacher,distill,eval,explain}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .biasdata import SPLITS
from .distill import DISTILL_METHODS
from .exceptions import ContractError, DimensionError, FormatError, NumericFaultError, XDistillError

EXIT_CODES = {ContractError: 3, DimensionError: 4, NumericFaultError: 5, FormatError: 6}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xdistill", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--method", choices=DISTILL_METHODS)
    common.add_argument("--dataset", metavar="DIR", help="dataset directory")
    for name, help_ in [("gen-data", "generate a biased dataset"),
                        ("train-teacher", "train a teacher by ERM"),
                        ("distill", "distill a student from a teacher"),
                        ("eval", "evaluate a model on the three test splits"),
                        ("explain", "export heatmaps for selected samples")]:
        p = sub.add_parser(name, parents=[common], help=help_)
        if name == "distill":
            p.add_argument("--teacher", metavar="DIR", help="teacher checkpoint directory")
        if name in ("eval", "explain"):
            p.add_argument("--model", metavar="DIR", help="model checkpoint directory")
        if name == "eval":
            p.add_argument("--inputs", choices=("images", "debiased"), default="images")
        if name == "explain":
            p.add_argument("--samples", type=int, nargs="+", metavar="ID")
            p.add_argument("--class", dest="target", type=int, metavar="K")
            p.add_argument("--split", choices=SPLITS)
            p.add_argument("--format", choices=("png", "pgm"))
    return parser


def run(args) -> dict:
    cfg = harness.load_config(args.config, seed=args.seed, out=args.out, method=args.method,
                              dataset=args.dataset, teacher_checkpoint=getattr(args, "teacher", None),
                              model=getattr(args, "model", None))
    if args.command == "explain":
        e = cfg.explain
        if args.samples is not None:
            e.samples = args.samples
        if args.target is not None:
            e.target = args.target
        if args.split is not None:
            e.split = args.split
        if args.format is not None:
            e.format = args.format
        written = harness.cmd_explain(cfg)
        return {"command": "explain", "out": cfg.out, "heatmaps": written}
    if args.command == "gen-data":
        path = harness.cmd_gen_data(cfg)
        return {"command": "gen-data", "out": str(path)}
    if args.command == "train-teacher":
        report = harness.cmd_train_teacher(cfg)
    elif args.command == "distill":
        report = harness.cmd_distill(cfg)
    else:
        report = harness.cmd_eval(cfg, args.inputs)
    return {"command": args.command, "out": cfg.out, "metrics": report.to_dict()}


def _fail(kind: str, message: str, code: int, command=None) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "command": command}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", str(exc), 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except XDistillError as exc:
        code = next((c for t, c in EXIT_CODES.items() if isinstance(exc, t)), 1)
        return _fail(type(exc).__name__, str(exc), code, args.command)
    except OSError as exc:
        return _fail("IOError", str(exc), 7, args.command)
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
