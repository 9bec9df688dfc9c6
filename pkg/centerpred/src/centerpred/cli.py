"""``centerpred train`` and ``centerpred predict``."""

from __future__ import annotations

import argparse
import sys

from .losses import LossSchedule
from .predict import predict_dataset
from .training import TrainConfig, load_checkpoint, train

USAGE_ERROR = 1
DATA_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(USAGE_ERROR)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="centerpred",
                description="Learned seed-point initialization from one projection.")
    sub = p.add_subparsers(dest="command")

    t = sub.add_parser("train", help="fit the predictor on a dataset")
    t.add_argument("--manifest", required=True,
                   help="dataset directory (holds dataset.json)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--steps", type=int, default=TrainConfig.steps)
    t.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    t.add_argument("--lr", type=float, default=TrainConfig.lr)
    t.add_argument("--seed", type=int, default=TrainConfig.seed)
    t.add_argument("--point-scale", type=float,
                   default=LossSchedule.point_weight_scale,
                   help="step count where the point-matching term turns on")

    r = sub.add_parser("predict", help="emit seed-point files for a dataset")
    r.add_argument("--manifest", required=True,
                   help="dataset directory (holds dataset.json)")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--view", type=int, default=0,
                   help="which scheduled view feeds the network")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return USAGE_ERROR
    try:
        if args.command == "train":
            cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size,
                              lr=args.lr, seed=args.seed,
                              schedule=LossSchedule(point_weight_scale=args.point_scale))
            path = train(args.manifest, args.out, cfg)
            print(f"checkpoint written to {path}")
        else:
            model, ckpt = load_checkpoint(args.checkpoint)
            written = predict_dataset(model, ckpt, args.manifest, args.out,
                                      args.view)
            print(f"wrote {len(written)} seed-point files to {args.out}")
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
