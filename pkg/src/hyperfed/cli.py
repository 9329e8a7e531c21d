"""Command line entry point: ``hyperfed run|sweep|calibrate``.

Exit codes: 0 on success, 2 for configuration errors (the message names the
offending key), 3 for runtime failures (the message names the module).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

import yaml

from .config import load_config, parse_config, set_dotted
from .errors import ConfigError, HyperFedError
from .experiment import calibrate_checkpoint, execute, parse_axis, sweep

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("hyperfed")


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError("expected key=value", key=item)
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    if args.seed is not None:
        out["seed"] = args.seed
    if args.out_dir is not None:
        out["output.dir"] = args.out_dir
    if args.threads is not None:
        out["output.threads"] = args.threads
    return out


def _read_raw(path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", key=str(path)) from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}", key=str(path)) from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping", key=str(path))
    return raw or {}


def cmd_run(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    summary, _ = execute(cfg)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    raw = _read_raw(args.config)
    overrides = _overrides(args)
    for key, value in overrides.items():
        set_dotted(raw, key, value)
    parse_config(raw)  # fail fast on a broken base config
    try:
        axes = [parse_axis(a) for a in args.axis]
    except ValueError as exc:
        raise ConfigError(str(exc), key="--axis") from None
    out_dir = args.out_dir or parse_config(raw).output.dir
    rows, comparison = sweep(raw, axes, out_dir)
    for row in comparison:
        print(json.dumps(row, sort_keys=True, ensure_ascii=False))
    failed = sum(r["status"] != "ok" for r in rows)
    if failed:
        log.warning("%d of %d sweep cells failed", failed, len(rows))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    lambdas = args.lambdas or [cfg.calibration.lam]
    for row in calibrate_checkpoint(args.checkpoint, cfg, lambdas):
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out-dir", help="override output.dir")
    common.add_argument("--threads", type=int, help="client-parallel worker threads")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a dotted config key, e.g. train.rounds=5 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hyperfed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run one federated experiment")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="run the cross product of one or more axes")
    p.add_argument("config")
    p.add_argument("--axis", action="append", required=True, metavar="NAME=V1,V2",
                   help="alpha, seed, strategy, method (a preset name) or any dotted key; repeatable")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate", parents=[common], help="closed-form head calibration of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.add_argument("--lambda", dest="lambdas", type=float, action="append", metavar="X",
                   help="ridge strength; repeat for a grid (default: calibration.lambda)")
    p.set_defaults(func=cmd_calibrate)
    return parser


def _origin(exc: BaseException) -> str:
    frames = traceback.extract_tb(exc.__traceback__)
    for frame in reversed(frames):
        path = Path(frame.filename)
        if path.parent.name == "hyperfed":
            return f"hyperfed.{path.stem}"
    return "hyperfed"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HyperFedError, OSError, ArithmeticError) as exc:
        print(f"runtime error in {_origin(exc)}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
