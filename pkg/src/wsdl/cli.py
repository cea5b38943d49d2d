"""Command-line entry point: gen-data | train | infer | eval | bench.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures. All
randomness is governed by the seed (flag > config file > default). The
effective configuration is echoed into every output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import backbone as bb
from . import evaluate as ev
from . import pipeline as pl
from . import synthdata as sd
from .config import RunConfig, load_run_config


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(self._usage_exit(message))

    def _usage_exit(self, message) -> int:
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        return 1


def _add_common(p: _Parser, *names):
    if "data" in names:
        p.add_argument("--data", required=True, help="dataset root (holds train/ and test/)")
    if "out" in names:
        p.add_argument("--out", required=True, help="output directory")
    if "model" in names:
        p.add_argument("--model", required=True, help="trained model directory")
    p.add_argument("--seed", type=int, default=None, help="seed overriding config and defaults")
    p.add_argument("--config", default=None, help="key = value configuration file")
    p.add_argument("--levels", default=None,
                   help="comma list of attention tap levels (e.g. late,cam)")


def build_parser() -> _Parser:
    parser = _Parser(prog="wsdl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _add_common(p, "out")
    p.set_defaults(handler=_cmd_gen_data)

    p = sub.add_parser("train", help="train stage-wise on a dataset")
    _add_common(p, "data", "out")
    p.add_argument("--stage", choices=("maen", "rpn", "heads", "all"), default="all",
                   help="which training stage to run (later stages load earlier checkpoints)")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("infer", help="classify and localize images")
    _add_common(p, "model")
    p.add_argument("--image", action="append", default=None, help="PPM image (repeatable)")
    p.add_argument("--data", default=None, help="dataset root; infers the test split")
    p.set_defaults(handler=_cmd_infer)

    p = sub.add_parser("eval", help="evaluate a trained model on the test split")
    _add_common(p, "data", "model", "out")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("bench", help="shared-pathway vs separate-network throughput")
    _add_common(p, "data", "model")
    p.add_argument("--mode", choices=("shared", "separate", "both"), default="both")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(handler=_cmd_bench)
    return parser


def _build_config(args) -> RunConfig:
    config = load_run_config(args.config) if args.config else RunConfig.default()
    if args.seed is not None:
        config.set_key("seed", str(args.seed))
    if getattr(args, "levels", None):
        config.set_key("tap_levels", args.levels)
    config.sync_derived()
    return config


def _echo_config(config: RunConfig, out_dir, name="run_config.txt"):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(config.to_lines())


def _cmd_gen_data(args) -> int:
    config = _build_config(args)
    sd.generate_dataset(config.gen, args.out)
    _echo_config(config, args.out)
    print(f"wrote {config.gen.train_count} train / {config.gen.test_count} test images to {args.out}")
    return 0


def _open_log(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    log_file = open(os.path.join(out_dir, "train_log.txt"), "a", encoding="utf-8", newline="\n")

    def log(line):
        print(line)
        log_file.write(line + "\n")
        log_file.flush()

    return log, log_file


def _cmd_train(args) -> int:
    config = _build_config(args)
    view = sd.TrainView(os.path.join(args.data, "train"))
    config.set_key("num_classes", str(view.num_classes))
    config.sync_derived()

    log, log_file = _open_log(args.out)
    try:
        if args.stage == "all":
            model = pl.train_stagewise(view, config, log)
            pl.save_model(model, args.out)
        elif args.stage == "maen":
            ckpt = pl.train_maen(view, config, log)
            bb.save_checkpoint(ckpt, os.path.join(args.out, "maen.ckpt"))
        elif args.stage == "rpn":
            maen = bb.load_checkpoint(os.path.join(args.out, "maen.ckpt"))
            ckpt = pl.train_rpn(view, config, maen, log)
            bb.save_checkpoint(ckpt, os.path.join(args.out, "dln.ckpt"))
        else:  # heads
            maen = bb.load_checkpoint(os.path.join(args.out, "maen.ckpt"))
            dln = bb.load_checkpoint(os.path.join(args.out, "dln.ckpt"))
            heads = pl.train_heads(view, config, maen, dln, log)
            for level, ckpt in heads.items():
                bb.save_checkpoint(ckpt, os.path.join(args.out, f"head_{level}.ckpt"))
    finally:
        log_file.close()
    _echo_config(config, args.out, name="model_config.txt")
    return 0


def _prediction_json(name, pred) -> str:
    doc = {
        "file": name,
        "predicted_class": pred.predicted_class,
        "fused_scores": [float(v) for v in pred.fused],
        "levels": {
            level: {
                "box": list(lp.box.as_array()),
                "scores": [float(v) for v in lp.scores],
            }
            for level, lp in pred.per_level.items()
        },
    }
    return json.dumps(doc, sort_keys=True)


def _cmd_infer(args) -> int:
    model = pl.load_model(args.model)
    inputs = []
    if args.image:
        inputs = [(path, sd.image_to_float(sd.read_ppm(path))) for path in args.image]
    elif args.data:
        test_dir = os.path.join(args.data, "test")
        view = sd.TrainView(test_dir)
        inputs = list(zip(view.filenames, view.images))
    else:
        print("infer needs --image or --data", file=sys.stderr)
        return 1
    for name, image in inputs:
        print(_prediction_json(name, pl.infer(image, model)))
    return 0


def _cmd_eval(args) -> int:
    model = pl.load_model(args.model)
    report = ev.evaluate_model(model, os.path.join(args.data, "test"))
    ev.write_report(report, args.out)
    _echo_config(model.config, args.out)
    print(report.to_json(), end="")
    return 0


def _cmd_bench(args) -> int:
    model = pl.load_model(args.model)
    view = sd.TrainView(os.path.join(args.data, "test"))
    modes = ("shared", "separate") if args.mode == "both" else (args.mode,)
    result = {}
    for mode in modes:
        result[mode] = ev.bench(model, view.images, mode, repeats=args.repeats)
    if len(modes) == 2:
        result["ratio"] = result["shared"] / result["separate"]
    print(json.dumps(result, sort_keys=True))
    return 0


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "handler", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.handler(args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
