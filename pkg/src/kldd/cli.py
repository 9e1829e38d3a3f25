"""Command line front end.

Subcommands: gen-data, train, segment, eval, viz-rf. This module keeps
its top-level imports stdlib-only; numpy-touching modules load inside
the handlers, after the KLDD_THREADS cap has been written into the BLAS
environment variables.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
error (argparse also exits 2 on malformed flags).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import ConfigError, DataError, NumericError

_BLAS_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")

# Flag spellings for every run-config key. Values stay raw strings here;
# the config layer parses and validates them.
_CONFIG_FLAGS = (
    ("base-channels", "feature channels at the first level"),
    ("depth", "number of resolution levels"),
    ("channel-multipliers", "comma-separated per-level channel multipliers"),
    ("time-embed-dim", "width of the sinusoidal step embedding"),
    ("ld-enabled", "true/false: deformable line convolutions in the extractor"),
    ("kalman-enabled", "true/false: smoothed offset chains (false: cumulative)"),
    ("fusion-enabled", "true/false: attention fusion of condition features"),
    ("max-offset", "tanh bound on predicted tap offsets"),
    ("kalman-r", "measurement noise of the offset chain"),
    ("kalman-p0", "initial variance of the offset chain"),
    ("kalman-x0", "initial relative position of the offset chain"),
    ("T", "number of diffusion steps"),
    ("lr", "Adam learning rate"),
    ("weight-decay", "L2 penalty folded into the gradients"),
    ("epochs", "training epochs"),
    ("batch", "training batch size"),
    ("seed", "run seed"),
    ("cldice-weight", "weight of the centerline term in the loss"),
    ("patch", "square patch size"),
    ("ensemble", "diffusion samples averaged per patch"),
    ("threshold", "probability cut for the binary mask"),
    ("data-dir", "dataset root"),
    ("out-dir", "run output folder"),
)
_SEGMENT_FLAGS = ("ensemble", "threshold", "seed", "patch")


def _apply_thread_cap() -> None:
    cap = os.environ.get("KLDD_THREADS")
    if cap is None or cap == "":
        return
    if not cap.isdigit() or int(cap) < 1:
        raise ConfigError(f"KLDD_THREADS must be a positive integer, got {cap!r}")
    for var in _BLAS_VARS:
        os.environ[var] = cap


def _add_config_flags(parser: argparse.ArgumentParser, names=None) -> None:
    for flag, help_text in _CONFIG_FLAGS:
        if names is not None and flag not in names:
            continue
        parser.add_argument(f"--{flag}", default=None, metavar="V", help=help_text)


def _collect_overrides(args: argparse.Namespace) -> dict[str, str]:
    out = {}
    for flag, _ in _CONFIG_FLAGS:
        dest = flag.replace("-", "_")
        value = getattr(args, dest, None)
        if value is not None:
            out[dest] = value
    return out


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kldd",
        description="Diffusion-based segmentation of thin curvilinear structures.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic vessel dataset")
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--n-train", type=int, default=20, help="training images")
    p.add_argument("--n-val", type=int, default=4, help="validation images")
    p.add_argument("--size", type=int, default=64, help="square image size")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--n-curves", type=int, default=4, help="curves per image")
    p.set_defaults(handler=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    _add_config_flags(p)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("segment", help="sample masks for a folder of images")
    p.add_argument("--checkpoint", required=True, help="trained model file")
    p.add_argument("--input", required=True, help="folder of input images")
    p.add_argument("--out", required=True, help="folder for prob/mask outputs")
    _add_config_flags(p, names=_SEGMENT_FLAGS)
    p.set_defaults(handler=_cmd_segment)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="folder of *_mask.png predictions")
    p.add_argument("--gt", required=True, help="ground-truth folder (or its parent)")
    p.add_argument("--out", default=None,
                   help="folder for metrics.csv and metrics.png (default: --pred)")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("viz-rf", help="plot deformable tap positions on an image")
    p.add_argument("--checkpoint", required=True, help="trained model file")
    p.add_argument("--image", required=True, help="image to probe")
    p.add_argument("--position", action="append", required=True, metavar="R,C",
                   help="pixel to probe, repeatable")
    p.add_argument("--out", required=True, help="folder for taps.csv and overlay.png")
    p.set_defaults(handler=_cmd_viz_rf)

    return parser


def _cmd_gen_data(args: argparse.Namespace) -> int:
    from . import run

    info = run.gen_dataset(args.out, args.n_train, args.n_val,
                           size=args.size, seed=args.seed, n_curves=args.n_curves)
    print(f"wrote {info['n_train']} train + {info['n_val']} val pairs under {info['out_dir']}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    from . import config as config_mod
    from . import report, run

    overrides = _collect_overrides(args)
    if args.resume is not None:
        result = run.train(resume=args.resume, overrides=overrides)
    else:
        cfg = config_mod.load_config(args.config) if args.config else config_mod.RunConfig()
        if overrides:
            cfg = config_mod.apply_overrides(cfg, overrides)
        result = run.train(cfg)
    fig_path = Path(result["loss_csv"]).with_name("loss.png")
    report.save_loss_figure(result["loss_csv"], fig_path)
    print(f"trained {result['steps']} steps")
    print(f"loss log: {result['loss_csv']}")
    print(f"loss figure: {fig_path}")
    print(f"checkpoint: {result['final']}")
    return 0


def _cmd_segment(args: argparse.Namespace) -> int:
    from . import run

    results = run.segment(args.checkpoint, args.input, args.out,
                          overrides=_collect_overrides(args))
    for item in results:
        print(f"{item['id']}: {item['mask']}")
    print(f"segmented {len(results)} images into {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    from . import run

    out_dir = Path(args.out) if args.out else Path(args.pred)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_image, aggregate = run.evaluate(
        args.pred, args.gt,
        out_csv=out_dir / "metrics.csv",
        fig_png=out_dir / "metrics.png",
    )
    for name, rep in per_image:
        print(f"{name}: dice={rep.dice:.4f} cl_dice={rep.cl_dice:.4f} auc={rep.auc:.4f}")
    agg = aggregate.to_dict()
    print("aggregate: " + " ".join(f"{k}={v:.4f}" for k, v in agg.items()))
    print(f"metrics: {out_dir / 'metrics.csv'}")
    return 0


def _parse_position(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError(f"position must look like R,C, got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise ConfigError(f"position must be two integers, got {text!r}") from exc


def _cmd_viz_rf(args: argparse.Namespace) -> int:
    from . import run

    positions = [_parse_position(p) for p in args.position]
    info = run.viz_rf(args.checkpoint, args.image, positions, args.out)
    print(f"wrote {info['rows']} tap rows to {info['csv']}")
    print(f"overlay: {info['overlay']}")
    return 0


def main(argv=None) -> int:
    try:
        _apply_thread_cap()
        args = _build_parser().parse_args(argv)
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
