"""Command-line entry point ``golo``.

Exit codes: 0 success, 1 failed checks, 2 configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from golo import config as config_io
from golo.errors import ConfigError, GoloError

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3


def _load_config(path, overrides) -> config_io.Config:
    cfg = config_io.load(path) if path else config_io.Config()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        config_io.apply_override(cfg, key.strip(), value)
    return cfg.validate()


def _emit(payload: dict, path=None) -> None:
    text = json.dumps(payload, indent=2)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_train(args) -> int:
    from golo.train import train

    cfg = _load_config(args.config, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    result = train(cfg, cfg.out_dir, resume=args.resume, max_steps=args.steps, progress_every=100)
    _emit({"steps": result.steps, "log": str(result.log_path), "checkpoint": str(result.checkpoint_path),
           "last": result.last})
    return EXIT_OK


def cmd_eval(args) -> int:
    from golo.data import load_dataset
    from golo.evaluate import evaluate_model
    from golo.train import load_model

    model, _ = load_model(args.ckpt)
    _, scenes = load_dataset(args.data)
    if not scenes:
        raise ConfigError(f"dataset {args.data} has no images")
    _emit(evaluate_model(model, scenes, score_thresh=args.score_thresh).as_dict(), args.report)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from golo.data import make_dataset, save_dataset

    cfg = _load_config(args.spec, args.set)
    seed = cfg.val_seed if args.seed is None else args.seed
    scenes = make_dataset(seed, cfg.data, args.count)
    manifest = save_dataset(args.out, scenes)
    _emit({"out": args.out, "images": len(manifest["images"]), "annotations": len(manifest["annotations"]),
           "seed": seed})
    return EXIT_OK


def cmd_check(args) -> int:
    from golo.checks import run_checks

    result = run_checks(args.suite)
    _emit(result, args.report)
    return EXIT_OK if result["passed"] else EXIT_CHECK_FAILED


def cmd_gradcheck(args) -> int:
    from golo.checks import run_gradcheck

    result = run_gradcheck(args.module)
    _emit(result, args.report)
    return EXIT_OK if result["passed"] else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="golo", description="Two-stage query detector toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory for the log and checkpoint")
    p.add_argument("--steps", type=int, help="stop after this many steps (schedule still uses total_steps)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--score-thresh", type=float, default=0.0)
    p.add_argument("--report", help="also write the JSON result here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--spec", help="config file whose [data] section describes the scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, help="number of images (default data.num_images)")
    p.add_argument("--seed", type=int, help="root seed (default val_seed)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("check", help="run property suites")
    p.add_argument("--suite", default="all", choices=["oracle", "gradcheck", "invariants", "all"])
    p.add_argument("--report", help="also write the JSON report here")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("gradcheck", help="finite-difference check of one module in 64-bit mode")
    p.add_argument("--module", default="all", choices=["tensor", "qgfe", "adaptive_mixing", "loss", "all"])
    p.add_argument("--report")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GoloError, OSError, ValueError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
