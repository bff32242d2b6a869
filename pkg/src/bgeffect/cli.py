"""``bgeffect`` command line: gen, train, eval, attribute, stats, experiment.

Values come from the built-in defaults, then ``--config <file.json>``, then
any flag named after a config key (``--epochs 5``, ``--ratio-denominator
absolute``). Exit codes: 0 ok, 1 usage, 2 validation, 3 runtime.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing

from . import io, nn, scene
from .harness import (ExperimentConfig, ValidationError, cmd_attribute, cmd_eval, cmd_experiment, cmd_gen,
                      cmd_stats, cmd_train)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3

HELP = {
    "config": "JSON file with config keys",
    "seed": "master seed (u64)",
    "out": "output directory",
    "jobs": "parallel worker processes",
    "dry_run": "print the plan with derived seeds and stop",
    "force": "redo steps whose artifacts already exist",
    "allow_partial": "emit tables even when factorial cells are missing",
    "subsets": "also write the CMC/CMT/CMR shape subsets",
    "ratio_denominator": "positive (default) or absolute",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _field_types():
    hints = typing.get_type_hints(ExperimentConfig)
    out = {}
    for f in dataclasses.fields(ExperimentConfig):
        default = f.default
        if isinstance(default, bool):
            out[f.name] = ("bool", None)
        elif isinstance(default, tuple):
            out[f.name] = ("list", type(default[0]) if default else str)
        elif default is None:
            out[f.name] = ("scalar", int)  # n_both, cam_layer
        else:
            out[f.name] = ("scalar", type(default))
    assert set(out) == set(hints)
    return out


def _config_flags() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    g = p.add_argument_group("config keys")
    g.add_argument("--config", default=argparse.SUPPRESS, help=HELP["config"])
    for name, (kind, typ) in _field_types().items():
        flag = "--" + name.replace("_", "-")
        kw = {"dest": name, "default": argparse.SUPPRESS, "help": HELP.get(name)}
        if kind == "bool":
            g.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif kind == "list":
            g.add_argument(flag, nargs="+", type=typ, **kw)
        else:
            g.add_argument(flag, type=typ, **kw)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _config_flags()
    parser = _Parser(prog="bgeffect", description="Background-attention experiments on synthetic signs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen", parents=[common], help="generate the factorial datasets")

    p = sub.add_parser("train", parents=[common], help="train every seed on one dataset")
    p.add_argument("--dataset", required=True, help="manifest.json")

    p = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True, nargs="+", help="one or more manifest.json")
    p.add_argument("--report", help="write the report JSON here")

    p = sub.add_parser("attribute", parents=[common], help="attribution dumps and pixel ratios")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", required=True, choices=["ks", "gradcam"])
    p.add_argument("--fraction", type=float, help="share of each class's test images (default eval_fraction)")
    p.add_argument("--dump", help="ratio JSONL path (maps go next to it)")

    p = sub.add_parser("stats", parents=[common], help="tables and the permutation report")
    p.add_argument("--accuracy", nargs="*", default=[], help="eval report JSON files")
    p.add_argument("--ratios", nargs="*", default=[], help="ratio JSONL dumps")

    sub.add_parser("experiment", parents=[common], help="full pipeline with resume")
    return parser


def resolve_config(ns: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(ns.config) if getattr(ns, "config", None) else ExperimentConfig()
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    overrides = {k: v for k, v in vars(ns).items() if k in names}
    return cfg.replace(**overrides) if overrides else cfg


def _print_json(obj):
    print(json.dumps(obj, indent=1, default=str))


def run(ns: argparse.Namespace) -> int:
    cfg = resolve_config(ns).validate()
    cmd = ns.command
    if cfg.dry_run and cmd != "experiment":
        from .harness import build_plan
        _print_json(build_plan(cfg))
        return EXIT_OK
    if cmd == "gen":
        for p in cmd_gen(cfg):
            print(p)
    elif cmd == "train":
        for p in cmd_train(ns.dataset, cfg):
            print(p)
    elif cmd == "eval":
        _print_json(cmd_eval(ns.model, ns.dataset, out_path=ns.report))
    elif cmd == "attribute":
        path = cmd_attribute(ns.model, ns.dataset, cfg, ns.method, ns.fraction, out_path=ns.dump)
        rows = io.read_jsonl(path)
        kept = [r["ratio"] for r in rows if r["ratio"] is not None]
        print(path)
        print(f"{len(rows)} images, {len(rows) - len(kept)} excluded"
              + (f", mean ratio {sum(kept) / len(kept):.4f}" if kept else ""))
    elif cmd == "stats":
        for k, p in sorted(cmd_stats(cfg, ns.accuracy, ns.ratios).items()):
            print(f"{k}: {p}")
    elif cmd == "experiment":
        result = cmd_experiment(cfg)
        if cfg.dry_run:
            _print_json(result)
        else:
            for k, p in result.items():
                print(f"{k}: {p}")
    return EXIT_OK


VALIDATION_ERRORS = (ValidationError, io.DatasetError, io.UnsupportedFormat, nn.ShapeMismatch,
                     FileNotFoundError, ValueError, TypeError)
RUNTIME_ERRORS = (nn.TrainingDiverged, nn.NonFiniteError, scene.GenerationError, RuntimeError, OSError,
                  ArithmeticError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as err:
        print(f"bgeffect: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return run(ns)
    except UsageError as err:
        print(f"bgeffect: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except VALIDATION_ERRORS as err:
        print(f"bgeffect: invalid input: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except RUNTIME_ERRORS as err:
        print(f"bgeffect: failed: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
