"""Command-line entry point for the learned correction.

Same conventions as the main toolkit CLI: exit 0 on success, 1 on
invalid arguments or inputs, 2 on runtime failure; diagnostics go to
stderr.
"""

from __future__ import annotations

import argparse
import sys

from .artifact import load_artifact
from .config import TrainConfig
from .infer import infer_split
from .train import train_coarse, train_diffusion

__all__ = ["main"]


def _config_from_args(args: argparse.Namespace, artifact_path: str) -> TrainConfig:
    return TrainConfig(
        manifest_path=args.manifest,
        artifact_path=artifact_path,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        crop=args.crop,
        mask_weight=args.mask_weight,
        diffusion_steps=args.steps,
        strength=args.strength,
        seed=args.seed,
    )


def _cmd_train_coarse(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args, args.out)
    art = train_coarse(cfg)
    losses = art.coarse_losses or []
    print(f"coarse stage: {len(losses)} epochs, "
          f"final loss {losses[-1]:.6f}, artifact {args.out}")
    return 0


def _cmd_train_diffusion(args: argparse.Namespace) -> int:
    coarse = load_artifact(args.coarse)
    cfg = _config_from_args(args, args.out)
    art = train_diffusion(cfg, coarse)
    losses = art.diffusion_losses or []
    print(f"diffusion stage: {len(losses)} epochs, "
          f"final loss {losses[-1]:.6f}, artifact {args.out}")
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    art = load_artifact(args.artifact)
    if args.strength is not None and not 0.0 <= args.strength <= 1.0:
        raise ValueError(f"strength must be in [0, 1], got {args.strength}")
    ids = None
    if args.ids:
        ids = [s.strip() for s in args.ids.split(",") if s.strip()]
    written = infer_split(art, args.manifest, args.out, split=args.split,
                          strength=args.strength, seed=args.seed,
                          sample_ids=ids)
    print(f"corrected {len(written)} sample(s) under {args.out}")
    return 0


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="artifact output path")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--crop", type=int, default=0)
    p.add_argument("--mask-weight", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=50,
                   help="diffusion schedule length T")
    p.add_argument("--strength", type=float, default=0.1,
                   help="default refinement strength stored with the model")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epiwarp-neural",
        description="learned distortion correction on epiwarp datasets",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train-coarse", help="train the coarse corrector")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train_coarse)

    p = sub.add_parser("train-diffusion",
                       help="train the denoiser on a frozen coarse stage")
    _add_train_flags(p)
    p.add_argument("--coarse", required=True,
                   help="coarse-stage artifact to build on")
    p.set_defaults(func=_cmd_train_diffusion)

    p = sub.add_parser("infer", help="correct a manifest split")
    p.add_argument("--artifact", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test",
                   choices=["train", "val", "test"])
    p.add_argument("--strength", type=float, default=None,
                   help="override the strength stored in the artifact")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ids", help="comma-separated sample ids (default: all)")
    p.set_defaults(func=_cmd_infer)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
