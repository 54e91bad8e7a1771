"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 file or format error,
4 numeric error.
"""

import argparse
import os
import sys

from . import runner, tasks
from .errors import ConfigError, ContractError, FormatError, NumericError


def _cmd_gen(args):
    ds = tasks.generate(args.task, args.seed, args.n, source=args.source)
    tasks.save_dataset(ds, args.out)
    print(f"wrote {args.task} dataset ({len(ds)} samples) to {args.out}")


def _cmd_pretrain(args):
    result = runner.pretrain(runner.load_config(args.config, required=("task", "data", "out")))
    log = result["log"]
    print(f"pretrained checkpoint {result['checkpoint']} sha256={result['sha256']}")
    print(f"loss {log[0]['loss']:.6g} -> {log[-1]['loss']:.6g}")


def _cmd_train(args):
    row = runner.finetune(runner.load_config(args.config))
    print(runner.csv_text([row], [k for k in row if k not in ("model", "log")]), end="")


def _cmd_eval(args):
    rows = runner.evaluate(args.ckpt, args.data, args.split, args.dry_threshold)
    text = runner.csv_text(rows, runner.METRIC_COLUMNS)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")


def _cmd_compare(args):
    rows, text = runner.compare(args.configs, args.out)
    print(text, end="")
    return 1 if any(r.get("error") for r in rows) and args.strict else 0


def _cmd_mask_stats(args):
    path = os.path.join(args.run, "mask_stats.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path} not found (only selective runs record mask statistics)")
    with open(path, encoding="utf-8") as fh:
        print(fh.read(), end="")


def build_parser():
    parser = argparse.ArgumentParser(prog="gridpeft", description="Parameter-efficient fine-tuning lab for gridded fields.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--task", required=True, choices=tasks.TASKS)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100, help="number of samples")
    p.add_argument("--source", action="store_true", help="generate the pretraining variant")
    p.set_defaults(fn=_cmd_gen)

    p = sub.add_parser("pretrain", help="train a backbone on a source dataset")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune a pretrained backbone")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--dry-threshold", type=float, default=runner.DRY_THRESHOLD)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("compare", help="run several configurations and merge their results")
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--out")
    p.add_argument("--strict", action="store_true", help="exit 1 if any row failed")
    p.set_defaults(fn=_cmd_compare)

    p = sub.add_parser("mask-stats", help="print the selection statistics of a run")
    p.add_argument("--run", required=True)
    p.set_defaults(fn=_cmd_mask_stats)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args) or 0
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
