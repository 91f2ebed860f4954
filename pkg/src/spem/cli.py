"""Command-line entry point: ``spem <command> [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .backbone import build, load_checkpoint, param_count
from .errors import ConfigError
from .experiments import (SCALES, ExperimentSpec, gradcheck_cmd, gradcheck_passed, lambda_sweep, load_data,
                          parse_spec_text, reweight_ablation, run_experiment, run_suite)
from .gradcheck import SELECTORS, TOLERANCE
from .training import evaluate, write_history

REWEIGHT_CHOICES = ["ours", "a", "b", "c", "d", "e", "f", "g", "none"]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-dir", help="directory holding the CIFAR binary files")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--seed", type=int, action="append", help="run seed; repeat for several")
    p.add_argument("--scale", choices=sorted(SCALES), default="desk")
    p.add_argument("--epochs", type=int)
    p.add_argument("--depth-n", type=int, help="blocks per stage (depth 9n+2)")
    p.add_argument("--dataset", choices=["cifar10", "cifar100", "synthetic"], default="cifar10")
    p.add_argument("--attention", choices=["none", "se", "spem"], default="spem")
    p.add_argument("--pooling", default="adaptive", help="gap, fixed:<c> or adaptive")
    p.add_argument("--reweight", choices=REWEIGHT_CHOICES, default="ours")
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--train-subset", type=int)
    p.add_argument("--test-subset", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")


def _spec_from_args(args, name: str) -> ExperimentSpec:
    return ExperimentSpec(
        name=name, scale=args.scale, dataset=args.dataset, attention=args.attention, pooling=args.pooling,
        reweight=args.reweight, eta=args.eta, lr=args.lr, batch_size=args.batch_size, dtype=args.dtype,
        seeds=args.seed or [0], depth_n=args.depth_n, epochs=args.epochs,
        train_subset=args.train_subset, test_subset=args.test_subset)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spem", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    _common(p)
    p.add_argument("--name", default="train")

    p = sub.add_parser("suite", help="run every spec in a spec file")
    p.add_argument("spec_file")
    _common(p)

    p = sub.add_parser("sweep-lambda", help="fixed-mix constants plus the adaptive mix")
    _common(p)
    p.add_argument("--name", default="sweep")
    p.add_argument("--lambdas", default="0.1,0.3,0.5,0.7,0.9",
                   help="comma-separated constants; empty for adaptive only")

    p = sub.add_parser("ablate-reweight", help="every reweighting variant")
    _common(p)
    p.add_argument("--name", default="ablate")

    p = sub.add_parser("gradcheck", help="finite-difference check of a module")
    p.add_argument("selector", help=", ".join(SELECTORS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=3)

    p = sub.add_parser("audit-params", help="parameter counts of a configuration")
    _common(p)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data-dir")
    p.add_argument("--dataset", choices=["cifar10", "cifar100", "synthetic"], default="cifar10")
    p.add_argument("--test-subset", type=int)
    return parser


def _run_suite(specs, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_suite(specs, out / "metrics.csv", data_dir=args.data_dir, history_dir=out)
    for r in rows:
        print(",".join(r.to_csv_row()))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "gradcheck":
            if args.selector not in SELECTORS:
                parser.error(f"unknown selector {args.selector!r}; choose from {', '.join(SELECTORS)}")
            report = gradcheck_cmd(args.selector, args.seed, args.trials)
            for group, err in report.items():
                print(f"{args.selector}\t{group}\t{err:.3e}\t{'ok' if err < TOLERANCE else 'FAIL'}")
            return 0 if gradcheck_passed(report) else 1

        if args.command == "audit-params":
            spec = _spec_from_args(args, "audit").resolved()
            counts = param_count(build(spec.network_config()))
            print(f"depth\t{spec.network_config().depth}")
            print(f"total\t{counts.total}")
            print(f"backbone\t{counts.backbone}")
            print(f"attention\t{counts.attention}")
            return 0

        if args.command == "eval":
            net = load_checkpoint(args.checkpoint)
            spec = ExperimentSpec(name="eval", dataset=args.dataset, scale="paper",
                                  num_classes=net.config.num_classes, test_subset=args.test_subset)
            _, test_set = load_data(spec.resolved(), args.data_dir)
            print(f"top1\t{evaluate(net, test_set)!r}")
            return 0

        if args.command == "train":
            spec = _spec_from_args(args, args.name)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            for seed in spec.seeds:
                row, history = run_experiment(spec, seed, args.data_dir, out / f"{spec.name}-seed{seed}.ckpt")
                with open(out / f"{spec.name}-seed{seed}.csv", "w", newline="") as fh:
                    write_history(history, fh)
                write_history(history, sys.stdout)
                print(",".join(row.to_csv_row()))
            return 0

        if args.command == "suite":
            specs = parse_spec_text(Path(args.spec_file).read_text())
            return _run_suite(specs, args)

        if args.command == "sweep-lambda":
            lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
            return _run_suite(lambda_sweep(_spec_from_args(args, args.name), lambdas), args)

        if args.command == "ablate-reweight":
            base = dataclasses.replace(_spec_from_args(args, args.name), attention="spem")
            return _run_suite(reweight_ablation(base), args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
