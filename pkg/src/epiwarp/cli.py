"""Command-line entry point.

One subcommand per pipeline stage; every subcommand writes results only
under its ``--out`` directory and sends diagnostics to stderr.  Exit
codes: 0 success, 1 invalid arguments/config/input, 2 runtime failure.
Config files are JSON; ``--set key=value`` overrides (dotted keys reach
into nested objects, values parsed as JSON with a plain-string
fallback), and dedicated flags win over both.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any

from .correct import (
    RestoreOptions,
    estimate_field_dual_pe,
    restore_dual_pe,
    unwarp_fieldmap,
)
from .dwi import DwiParams, compute_adc, generate_phantom, random_phantom_spec
from .forward import EpiParams
from .imgio import export_png, load_pair, read_image, write_image
from .pipeline import VALID_METHODS, BenchmarkConfig, make_dataset, run_benchmark

__all__ = ["main"]


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("EPIWARP_JOBS", "1")))
    except ValueError:
        return 1


def _parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ValueError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def _apply_override(cfg: dict, path: list[str], value: Any) -> None:
    node = cfg
    for part in path[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = {}
        node = node[part]
    node[path[-1]] = value


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, val in extra.items():
        if key in out and isinstance(out[key], dict) and isinstance(val, dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = val
    return out


def _load_config(args: argparse.Namespace) -> BenchmarkConfig:
    cfg_dict = BenchmarkConfig().to_dict()
    if getattr(args, "config", None):
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise ValueError(f"config file {cfg_path} does not exist")
        cfg_dict = _deep_merge(cfg_dict, json.loads(cfg_path.read_text()))
    for item in getattr(args, "set", None) or []:
        path, value = _parse_override(item)
        _apply_override(cfg_dict, path, value)
    if getattr(args, "seed", None) is not None:
        cfg_dict["seed"] = args.seed
    return BenchmarkConfig.from_dict(cfg_dict)


def _restore_options(args: argparse.Namespace) -> RestoreOptions:
    opts = RestoreOptions()
    if getattr(args, "lambda_smooth", None) is not None:
        opts = replace(opts, lambda_smooth=args.lambda_smooth)
    if getattr(args, "invertibility_eps", None) is not None:
        opts = replace(opts, invertibility_eps=args.invertibility_eps)
    return opts


# --------------------------------------------------------------------------
# subcommand handlers
# --------------------------------------------------------------------------


def _cmd_phantom(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sidx in range(args.slices):
        spec = random_phantom_spec(
            seed=args.seed, size=args.size,
            noise_sigma=args.noise_sigma, slice_index=sidx,
        )
        images = generate_phantom(spec)
        dest = out if args.slices == 1 else out / f"slice_{sidx:02d}"
        dest.mkdir(parents=True, exist_ok=True)
        for name, img in images.items():
            write_image(img, dest / name)
            if args.png:
                export_png(img, dest / f"{name}.png")
    print(f"wrote {args.slices} slice(s) under {out}")
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    cfg = BenchmarkConfig.from_dict({
        **cfg.to_dict(),
        "n_phantoms": 1,
        "slices_per_phantom": 1,
        "split_fractions": [0.0, 0.0, 1.0],
    })
    manifest = make_dataset(cfg, args.out)
    print(f"wrote {len(manifest.samples)} paired sample(s) under {args.out}")
    return 0


def _cmd_make_dataset(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    manifest = make_dataset(cfg, args.out, jobs=args.jobs)
    counts: dict[str, int] = {}
    for s in manifest.samples:
        counts[s.split] = counts.get(s.split, 0) + 1
    print(f"wrote {len(manifest.samples)} samples under {args.out} "
          f"(splits: {counts})")
    return 0


def _cmd_correct(args: argparse.Namespace) -> int:
    opts = _restore_options(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dwi_params = DwiParams()

    sample = load_pair(args.in_dir)
    for role in ("distorted/b50", "distorted/b1400"):
        if role not in sample:
            raise ValueError(f"sample {args.in_dir} lacks {role}")

    if args.method == "fugue-ideal":
        if "truth/vdm_px" not in sample:
            raise ValueError(f"sample {args.in_dir} lacks truth/vdm_px")
        vdm = sample["truth/vdm_px"]
        u50 = unwarp_fieldmap(sample["distorted/b50"], vdm, opts)
        u1400 = unwarp_fieldmap(sample["distorted/b1400"], vdm, opts)
        write_image(u50.restored, out / "b50")
        write_image(u1400.restored, out / "b1400")
        write_image(compute_adc(u50.restored, u1400.restored, dwi_params),
                    out / "adc")
        write_image(u50.confidence_mask, out / "confidence_b50")
        write_image(u1400.confidence_mask, out / "confidence_b1400")
    else:
        if not args.in_minus:
            raise ValueError(f"method {args.method} needs --in-minus "
                             "(the opposite-polarity sample)")
        other = load_pair(args.in_minus)
        params_a = _read_epi_params(args.in_dir)
        params_b = _read_epi_params(args.in_minus)
        if params_a.s_pe == params_b.s_pe:
            raise ValueError("--in and --in-minus have the same PE polarity")
        plus_dir, plus, minus = (
            (args.in_dir, sample, other) if params_a.s_pe > 0
            else (args.in_minus, other, sample)
        )
        if args.method == "topup-ideal":
            if "truth/vdm_px" not in plus:
                raise ValueError(f"sample {plus_dir} lacks truth/vdm_px")
            vdm = plus["truth/vdm_px"]
        else:  # topup-default
            est = estimate_field_dual_pe(
                plus["distorted/b50"], minus["distorted/b50"],
                params_a if params_a.s_pe > 0 else params_b, opts,
            )
            vdm = est.vdm
            write_image(vdm, out / "vdm_est")
            if not est.converged:
                print("warning: field estimate did not converge", file=sys.stderr)
        b50 = restore_dual_pe(plus["distorted/b50"], minus["distorted/b50"],
                              vdm, opts)
        b1400 = restore_dual_pe(plus["distorted/b1400"],
                                minus["distorted/b1400"], vdm, opts)
        write_image(b50, out / "b50")
        write_image(b1400, out / "b1400")
        write_image(compute_adc(b50, b1400, dwi_params), out / "adc")

    print(f"restored images written under {out}")
    return 0


def _read_epi_params(sample_dir: str | Path) -> EpiParams:
    params_path = Path(sample_dir) / "params.json"
    if not params_path.exists():
        raise ValueError(f"{params_path} does not exist")
    doc = json.loads(params_path.read_text())
    return EpiParams.from_dict(doc["epi_params"])


def _cmd_evaluate(args: argparse.Namespace) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    out = Path(args.out)
    report = run_benchmark(
        args.manifest, methods, out,
        opts=_restore_options(args),
        neural_dir=args.neural_dir,
        split=args.split,
        no_reference=args.no_reference,
        jobs=args.jobs,
    )
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    for line in report.summary_lines("nmse") + report.summary_lines("psnr_db"):
        print(line)
    if report.failures:
        print(f"{len(report.failures)} per-sample failure(s); see report.json",
              file=sys.stderr)
    return 0


def _cmd_export_png(args: argparse.Namespace) -> int:
    img = read_image(args.in_path)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_png(img, out)
    print(f"wrote {out} (8-bit preview, not for quantitative use)")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epiwarp",
        description="Simulate PE-axis EPI distortion on synthetic DWI and "
                    "benchmark classical corrections.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic pelvic slice")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--slices", type=int, default=1)
    p.add_argument("--noise-sigma", type=float, default=0.02)
    p.add_argument("--png", action="store_true",
                   help="also write 8-bit previews")
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("simulate",
                       help="one phantom slice distorted across the PE grid")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config (dataset schema)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("make-dataset", help="synthesize a full paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config (dataset schema)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=_default_jobs())
    p.set_defaults(func=_cmd_make_dataset)

    p = sub.add_parser("correct", help="restore one paired sample")
    p.add_argument("--method", required=True,
                   choices=["fugue-ideal", "topup-ideal", "topup-default"])
    p.add_argument("--in", dest="in_dir", required=True,
                   help="paired-sample directory")
    p.add_argument("--in-minus", dest="in_minus",
                   help="opposite-polarity sample (dual-PE methods)")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda-smooth", type=float, default=None)
    p.add_argument("--invertibility-eps", type=float, default=None)
    p.set_defaults(func=_cmd_correct)

    p = sub.add_parser("evaluate", help="score methods against a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--methods", required=True,
                   help=f"comma-separated subset of {','.join(VALID_METHODS)}")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--neural-dir",
                   help="directory of model-corrected samples to score")
    p.add_argument("--no-reference", action="store_true",
                   help="write restored images only, compute no metrics")
    p.add_argument("--lambda-smooth", type=float, default=None)
    p.add_argument("--invertibility-eps", type=float, default=None)
    p.add_argument("--jobs", type=int, default=_default_jobs())
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("export-png", help="lossy 8-bit preview of a raster")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_png)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
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
