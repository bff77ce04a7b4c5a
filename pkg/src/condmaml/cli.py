"""Command line entry point: ``cond-maml {train,eval,demo-quadratic,trace}``.

Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .tasks import EpisodeError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cond-maml", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="meta-train and write metrics and checkpoints")
    t.add_argument("--config", required=True, help="key=value config file")
    t.add_argument("--output-dir", help="override output_dir from the config")

    e = sub.add_parser("eval", help="per-step accuracy with 95%% CIs")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=600)
    e.add_argument("--steps", type=_int_list, default=[1, 2, 3, 4, 5])
    e.add_argument("--n-way", type=int)
    e.add_argument("--k-shot", type=int)
    e.add_argument("--q-queries", type=int)
    e.add_argument("--alpha", type=float, help="inner learning rate (default: training value)")
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="write report CSV here instead of stdout")

    d = sub.add_parser("demo-quadratic", help="gradient descent on a rotated 2-D quadratic")
    d.add_argument("--kappa", type=_float_list, default=[1.0, 50.0])
    d.add_argument("--lr", type=float, default=0.5)
    d.add_argument("--steps", type=int, default=10)
    d.add_argument("--out")

    r = sub.add_parser("trace", help="condition numbers along the inner loop")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--episodes", type=int, default=8)
    r.add_argument("--K", type=int)
    r.add_argument("--alpha", type=float)
    r.add_argument("--subset", default="cls", help="comma-separated parameter groups")
    r.add_argument("--full", action="store_true", help="also report κ w.r.t. all parameters")
    r.add_argument("--split", default="val", choices=["train", "val", "test"])
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out")
    return p


def _emit(text: str, path) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _source_from_checkpoint(ckpt: harness.Checkpoint, seed: int) -> harness.TaskSource:
    spec = ckpt.meta.get("task_source")
    if not spec:
        raise harness.CheckpointError("checkpoint carries no task source description")
    return harness.TaskSource(spec, seed)


def cmd_train(args) -> int:
    cfg = harness.load_config(args.config)
    if args.output_dir:
        cfg = harness.dataclasses.replace(cfg, output_dir=args.output_dir)
    result = harness.train(cfg)
    print(json.dumps({"output_dir": str(result.output_dir), "best_val_acc": result.best_accuracy}))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = harness.load_checkpoint(args.checkpoint)
    src = _source_from_checkpoint(ckpt, args.seed)
    spec = src.spec
    alpha = args.alpha if args.alpha is not None else ckpt.meta.get("alpha", 0.01)
    report = harness.evaluate(
        ckpt,
        src,
        args.n_way or spec["n_way"],
        args.k_shot or spec["k_shot"],
        args.q_queries or spec["q_queries"],
        args.episodes,
        args.steps,
        alpha,
        args.split,
    )
    _emit(harness.write_rows(report.rows()), args.out)
    return EXIT_OK


def cmd_demo(args) -> int:
    rows = harness.demo_quadratic(args.kappa, args.lr, args.steps)
    _emit(harness.write_rows(rows), args.out)
    return EXIT_OK


def cmd_trace(args) -> int:
    ckpt = harness.load_checkpoint(args.checkpoint)
    src = _source_from_checkpoint(ckpt, args.seed)
    K = args.K or ckpt.meta.get("K", 5)
    alpha = args.alpha if args.alpha is not None else ckpt.meta.get("alpha", 0.01)
    groups = tuple(g.strip() for g in args.subset.split(",") if g.strip())
    params = ckpt.params()
    rows = []
    for i in range(args.episodes):
        tr = harness.trace_condition(params, src.episode(args.split, i), K, alpha, groups, args.full)
        row = {"episode": i, "cond_loss": tr.cond_loss}
        row.update({f"kappa_subset_{k}": v for k, v in enumerate(tr.kappa_subset)})
        if tr.kappa_full is not None:
            row.update({f"kappa_full_{k}": v for k, v in enumerate(tr.kappa_full)})
        rows.append(row)
    _emit(harness.write_rows(rows), args.out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "demo-quadratic": cmd_demo, "trace": cmd_trace}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (harness.ConfigError, EpisodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ArithmeticError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, harness.CheckpointError) as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
