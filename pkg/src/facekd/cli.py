"""Command-line entry point.

Subcommands: gen-data, pretrain-teacher, distill, eval, perf, sweep.
Unknown flags or config keys exit with status 2; missing files with status 3.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import distill as D
from . import pipeline as P
from .checkpoint import IntegrityError
from .config import UsageError, load_config, serialize_config
from .data import generate_dataset, load_dataset, train_eval_split, write_dataset

EXIT_USAGE = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(sub):
    sub.add_argument("--config", default=None, help="config file (key=value lines)")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override one config key")


def build_parser() -> _Parser:
    parser = _Parser(prog="facekd")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="render the synthetic face dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")

    p = subs.add_parser("pretrain-teacher", help="train the teacher from scratch")
    _add_common(p)
    p.add_argument("--data", default=None, help="dataset directory (else in-memory)")
    p.add_argument("--out", required=True, help="checkpoint path")

    p = subs.add_parser("distill", help="distill the teacher into the student")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--teacher", default=None, help="pretrained teacher checkpoint")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", default=None, help="JSONL training metrics path")

    p = subs.add_parser("eval", help="held-out classification + verification")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", required=True)

    p = subs.add_parser("perf", help="receptive-field maps + alignment score")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True, help="directory for map CSVs")

    p = subs.add_parser("sweep", help="ablation grid; emits a result CSV")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--teacher", default=None)
    p.add_argument("--axis", required=True, choices=("prompts", "centers", "facial"))
    p.add_argument("--out", required=True, help="result CSV path")

    return parser


def _dataset(args, cfg):
    spec = P.face_spec(cfg)
    if args.data is not None:
        ds = load_dataset(args.data, spec)
    else:
        ds = generate_dataset(spec)
    return train_eval_split(ds, cfg["data.eval_per_identity"])


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, getattr(args, "set", []))

        if args.command == "gen-data":
            write_dataset(P.face_spec(cfg), args.out)
            print(serialize_config(cfg), end="")
            print(f"wrote dataset to {args.out}")

        elif args.command == "pretrain-teacher":
            train, _ = _dataset(args, cfg)
            P.pretrain_teacher(cfg, train, ckpt_path=args.out)
            print(f"wrote teacher checkpoint to {args.out}")

        elif args.command == "distill":
            train, _ = _dataset(args, cfg)
            P.distill_run(cfg, train, teacher_ckpt=args.teacher,
                          ckpt_path=args.out, metrics_path=args.metrics)
            print(f"wrote checkpoint to {args.out}")

        elif args.command == "eval":
            _, eval_ds = _dataset(args, cfg)
            ckpt_cfg, model, _ = P.load_model_from_checkpoint(args.checkpoint)
            metrics = P.evaluate(model, eval_ds, seed=ckpt_cfg["seed"])
            print(json.dumps(metrics, indent=2))

        elif args.command == "perf":
            _, eval_ds = _dataset(args, cfg)
            ckpt_cfg, model, _ = P.load_model_from_checkpoint(args.checkpoint)
            n = min(ckpt_cfg["perf.samples"], len(eval_ds))
            images = eval_ds.images[:n]
            lms = eval_ds.landmarks[:n]
            pm_t, pm_s = P.perf_maps(model, images, lms)
            out = Path(args.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            D.write_perf_csv(out / "teacher.csv", pm_t)
            D.write_perf_csv(out / "student.csv", pm_s)
            score = D.perf_alignment_score(pm_t, pm_s)
            print(json.dumps({"alignment_score": score,
                              "samples": int(n)}, indent=2))

        elif args.command == "sweep":
            train, eval_ds = _dataset(args, cfg)
            rows = P.sweep(cfg, train, eval_ds, args.axis,
                           teacher_ckpt=args.teacher, out_csv=args.out)
            for row in rows:
                print(json.dumps(row))

        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IntegrityError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
