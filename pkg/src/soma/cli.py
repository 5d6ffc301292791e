"""Command-line entry points: ``soma train | evaluate | register | make-data``.

Relative run directories resolve under ``$SOMA_RUN_ROOT`` (default ``runs``).
Exit codes: 0 success, 1 usage or configuration problem, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import RunConfig, load_config, load_preset, parse
from .data import generate_mini_dataset
from .errors import ConfigurationError, SomaError
from .training import evaluate, load_checkpoint, register_files, train

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad arguments; the contract reserves 2 for
    runtime failures, so usage problems are remapped to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _run_root() -> Path:
    return Path(os.environ.get("SOMA_RUN_ROOT", "runs"))


def _resolve_run_dir(value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else _run_root() / path


def _load_run_config(value: str) -> RunConfig:
    path = Path(value)
    if path.exists():
        return load_config(path)
    if "/" not in value and "\\" not in value:
        return load_preset(value)
    raise ConfigurationError(f"config file not found: {value}")


def _config_for(args, checkpoint_state: dict | None = None) -> RunConfig:
    if args.config is not None:
        cfg = _load_run_config(args.config)
    elif checkpoint_state is not None:
        cfg = parse(checkpoint_state["config"])
    else:
        raise ConfigurationError("no config given and none recoverable")
    if getattr(args, "data_root", None):
        cfg = cfg.with_overrides(data_root=args.data_root)
    return cfg


def build_parser() -> _Parser:
    parser = _Parser(prog="soma",
                     description="Dense SAR-optical registration toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--config", required=True,
                         help="config file path or preset name (desk, paper)")
    p_train.add_argument("--run-dir", default="run",
                         help="output directory (relative paths go under "
                              "$SOMA_RUN_ROOT)")
    p_train.add_argument("--resume", default=None, help="checkpoint to resume")
    p_train.add_argument("--max-steps", type=int, default=None,
                         help="stop after this many optimizer steps")
    p_train.add_argument("--data-root", default=None,
                         help="override the configured dataset root")

    p_eval = sub.add_parser("evaluate", help="score a split")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--split", default="test", choices=("val", "test"))
    p_eval.add_argument("--config", default=None,
                        help="defaults to the config stored in the checkpoint")
    p_eval.add_argument("--run-dir", default=None,
                        help="where to write metrics.csv (default: next to "
                             "the checkpoint)")
    p_eval.add_argument("--method", default="soma",
                        help="row name in metrics.csv")
    p_eval.add_argument("--data-root", default=None)

    p_reg = sub.add_parser("register", help="align one optical/SAR pair")
    p_reg.add_argument("--ckpt", required=True)
    p_reg.add_argument("--optical", required=True)
    p_reg.add_argument("--sar", required=True)
    p_reg.add_argument("--out", required=True)
    p_reg.add_argument("--config", default=None,
                       help="defaults to the config stored in the checkpoint")

    p_data = sub.add_parser("make-data", help="write a synthetic mini-dataset")
    p_data.add_argument("--root", required=True)
    p_data.add_argument("--train", type=int, default=8)
    p_data.add_argument("--val", type=int, default=4)
    p_data.add_argument("--test", type=int, default=4)
    p_data.add_argument("--size", type=int, default=128)
    p_data.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_train(args) -> int:
    cfg = _config_for(args)
    run_dir = _resolve_run_dir(args.run_dir)
    _, history = train(cfg, run_dir, max_steps=args.max_steps,
                       resume=args.resume)
    last = history[-1] if history else None
    if last is not None:
        print(f"trained {len(history)} steps, final total loss "
              f"{last['total']:.6f} -> {run_dir}")
    else:
        print(f"nothing left to train -> {run_dir}")
    return 0


def _cmd_evaluate(args) -> int:
    state = load_checkpoint(args.ckpt)
    cfg = _config_for(args, state)
    run_dir = (_resolve_run_dir(args.run_dir) if args.run_dir
               else Path(args.ckpt).resolve().parent)
    records, path = evaluate(cfg, run_dir, checkpoint=args.ckpt,
                             split=args.split, method=args.method)
    print(f"evaluated {len(records)} pairs -> {path}")
    return 0


def _cmd_register(args) -> int:
    state = load_checkpoint(args.ckpt)
    cfg = _config_for(args, state)
    raster, field = register_files(cfg, args.ckpt, args.optical, args.sar,
                                   args.out)
    print(f"wrote {raster} and {field}")
    return 0


def _cmd_make_data(args) -> int:
    counts = {"train": args.train, "val": args.val, "test": args.test}
    generate_mini_dataset(args.root, counts=counts, size=args.size,
                          seed=args.seed)
    print(f"wrote mini-dataset under {args.root}")
    return 0


_COMMANDS = {"train": _cmd_train, "evaluate": _cmd_evaluate,
             "register": _cmd_register, "make-data": _cmd_make_data}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"soma: configuration error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (SomaError, OSError) as exc:
        print(f"soma: error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
