"""Command-line entry point.

Verbs: generate-synthetic, train-vae, train-diffusion, segment,
sweep-samples, evaluate. Every command validates its config before any long
computation and is deterministic given config plus seed.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import DEVICE_ENV, ConfigError, load_config
from . import experiments


def _add_common(parser: argparse.ArgumentParser, needs_config: bool = True) -> None:
    if needs_config:
        parser.add_argument("--config", required=True, help="experiment config YAML")
        parser.add_argument("--output-dir", default=None,
                            help="workspace directory (default: inference.output_dir)")
        parser.add_argument("--device", default=None, help="cpu or cuda")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medseglatdiff",
        description="Latent-diffusion mask ensembles: train, segment, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-synthetic", help="materialize the synthetic dataset")
    _add_common(p)

    p = sub.add_parser("train-vae", help="train the image or mask autoencoder")
    _add_common(p)
    p.add_argument("--target", choices=("image", "mask"), required=True)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("train-diffusion", help="train the conditional denoiser")
    _add_common(p)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("segment", help="produce masks, confidence maps, results CSV")
    _add_common(p)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--images", nargs="*", default=None, help="segment these files instead of a split")
    p.add_argument("--n", type=int, default=None, help="ensemble sample count")
    p.add_argument("--five-fold", action="store_true",
                   help="average confidence over inference.fold_checkpoints")
    p.add_argument("--save-samples", action="store_true")

    p = sub.add_parser("sweep-samples", help="Dice versus ensemble size, with plot")
    _add_common(p)
    p.add_argument("--n-list", default="1,2,3,4,5", help="comma-separated sample counts")

    p = sub.add_parser("evaluate", help="score prediction masks against ground truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--out", default="evaluation.csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, FileNotFoundError, ValueError,
            experiments.EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "evaluate":
        report = experiments.cmd_evaluate(args.predictions, args.ground_truth, args.out)
        print(f"evaluated {len(report.per_sample)} pairs: "
              f"dice={report.dice:.4f} iou={report.iou:.4f} -> {args.out}")
        return 0

    if args.device:
        os.environ[DEVICE_ENV] = args.device
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.training.seed = args.seed
        cfg.inference.seed = args.seed
    out_dir = args.output_dir or cfg.inference.output_dir

    if args.command == "generate-synthetic":
        manifest = experiments.cmd_generate_synthetic(cfg, out_dir)
        print(f"wrote {manifest}")
    elif args.command == "train-vae":
        ckpt = experiments.cmd_train_vae(cfg, args.target, out_dir, resume=args.resume)
        print(f"wrote {ckpt}")
    elif args.command == "train-diffusion":
        ckpt = experiments.cmd_train_diffusion(cfg, out_dir, resume=args.resume)
        print(f"wrote {ckpt}")
    elif args.command == "segment":
        csv_path = experiments.cmd_segment(
            cfg, out_dir, split=args.split, image_paths=args.images, n=args.n,
            seed=args.seed, five_fold=args.five_fold or None,
            save_samples=args.save_samples or None)
        print(f"wrote {csv_path}")
    elif args.command == "sweep-samples":
        n_list = [int(v) for v in args.n_list.split(",") if v.strip()]
        csv_path = experiments.cmd_sweep_samples(cfg, out_dir, n_list, seed=args.seed)
        print(f"wrote {csv_path}")
    else:
        raise ValueError(f"unknown command {args.command!r}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
