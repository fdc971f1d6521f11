"""``leformer`` command line: synth, train, eval, predict, complexity, gradcheck.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import config as C
from .complexity import (REPORTED_ENCODER_ABLATION, ComplexityError, compare_configs, comparison_records, count_macs, encoder_ablations,
                         format_comparison, ptl_sweep, ptl_sweep_reported, report_csv)
from .data import DataError, SynthSpec, generate_synthetic, load_dataset, read_image, write_mask, write_mask_overlay
from .gradcheck import model_gradcheck
from .model import LEFormer
from .tensor import ShapeError
from .train import (CheckpointError, TrainError, evaluate, load_checkpoint, predict_mask, restore_training,
                    save_checkpoint, train, training_extras)

log = logging.getLogger("leformer")

CHECKPOINT_NAME = "checkpoint.lefckpt"
CONFIG_NAME = "config.txt"
LOG_NAME = "train.log"
SEED_ENV = "LEFORMER_SEED"


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# config resolution
# ----------------------------------------------------------------------------

def _add_config_flags(p):
    p.add_argument("--config", type=Path, help="key = value run configuration file")
    p.add_argument("--preset", choices=("full", "desk"), default=None,
                   help="starting configuration before --config and --set (default: full; desk = width 1/8, lr 3e-3)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key, e.g. train.total_iters=300 (repeatable)")


def resolve_config(args, fallback: Path | None = None) -> C.RunConfig:
    """preset -> config file (or ``fallback`` file) -> $LEFORMER_SEED -> --set flags."""
    base = C.desk_preset() if args.preset == "desk" else C.RunConfig()
    path = args.config or (fallback if fallback is not None and fallback.is_file() else None)
    try:
        cfg = C.load(path, base) if path else base
        env_seed = os.environ.get(SEED_ENV)
        if env_seed is not None:
            cfg = C.apply(cfg, [("train.seed", env_seed)])
        pairs = []
        for item in args.overrides:
            if "=" not in item:
                raise C.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            pairs.append((k.strip(), v.strip()))
        return C.apply(cfg, pairs)
    except C.ConfigError as exc:
        raise UsageError(str(exc)) from exc
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {exc.filename}") from exc


def _input_size(text: str) -> tuple:
    parts = text.lower().split("x")
    try:
        vals = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"input size must look like 256 or 256x512, got {text!r}")
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) <= 0:
        raise argparse.ArgumentTypeError(f"invalid input size {text!r}")
    return vals


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _load_model(args) -> tuple:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    cfg = resolve_config(args, ckpt.parent / CONFIG_NAME)
    model = LEFormer(cfg.model, seed=cfg.train.seed)
    load_checkpoint(model.params, ckpt)
    return cfg, model


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else int(os.environ.get(SEED_ENV, 0))
    try:
        spec = SynthSpec(count=args.count, size=args.size, blobs=tuple(args.blobs), radius=tuple(args.radius),
                         noise=args.noise, speckle=args.speckle, seed=seed, fmt=args.format)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    summary = generate_synthetic(spec, args.out)
    print(f"wrote {summary['count']} image/mask pairs of {spec.size}x{spec.size} to {args.out}")
    print(f"foreground fraction {summary['fg_fraction']:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.data is not None:
        cfg.data.root = str(args.data)
    if not cfg.data.root:
        raise UsageError("no dataset given; pass --data or set data.root")
    train_set = load_dataset(cfg.data.root, "train", cfg.data.split_ratio)
    test_set = load_dataset(cfg.data.root, "test", cfg.data.split_ratio)
    if not train_set:
        raise DataError(f"{cfg.data.root}: training split is empty")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = LEFormer(cfg.model, seed=cfg.train.seed)
    start, state, rng_state = 0, None, None
    if args.resume:
        extras = load_checkpoint(model.params, args.resume)
        start, state, rng_state = restore_training(extras, cfg.train)
        if start >= cfg.train.total_iters:
            raise UsageError(f"checkpoint is already at iteration {start}; raise train.total_iters to continue")
        print(f"resuming from iteration {start}")
    C.dump(cfg, out / CONFIG_NAME)
    report = train(model, train_set, cfg.train, eval_set=test_set or None, log_path=out / LOG_NAME,
                   state=state, start_iter=start, rng_state=rng_state)
    save_checkpoint(model.params, out / CHECKPOINT_NAME, training_extras(report))
    print(f"trained iterations {start + 1}..{report.end_iter}; final loss {report.losses[-1]:.4f}")
    print(f"checkpoint {out / CHECKPOINT_NAME}")
    if report.final_metrics is not None:
        print(f"test split ({len(test_set)} images)")
        print(report.final_metrics.format_table())
        (out / "metrics.csv").write_text(report_csv([report.final_metrics.as_record("test")]), encoding="utf-8")
    return 0


def cmd_eval(args) -> int:
    cfg, model = _load_model(args)
    root = args.data if args.data is not None else cfg.data.root
    if not root:
        raise UsageError("no dataset given; pass --data")
    samples = load_dataset(root, args.split, cfg.data.split_ratio)
    if not samples:
        raise DataError(f"{root}: split {args.split!r} is empty")
    metrics = evaluate(model, samples, cfg.model.num_classes)
    print(f"{args.split} split ({len(samples)} images)")
    print(metrics.format_table())
    text = report_csv([metrics.as_record(args.split)])
    print(text, end="")
    if args.csv:
        Path(args.csv).write_text(text, encoding="utf-8")
    return 0


def cmd_predict(args) -> int:
    _, model = _load_model(args)
    image = read_image(args.image)
    pred = predict_mask(model, image)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mask(out, pred)
    # the overlay is RGB, so a greyscale .pgm mask gets a .ppm overlay
    suffix = ".ppm" if out.suffix.lower() == ".pgm" else out.suffix
    overlay = Path(args.overlay) if args.overlay else out.with_name(out.stem + "_overlay" + suffix)
    write_mask_overlay(image, pred, overlay)
    print(f"mask {out}  overlay {overlay}  foreground fraction {float(pred.mean()):.4f}")
    return 0


def cmd_complexity(args) -> int:
    cfg = resolve_config(args)
    try:
        rep = count_macs(cfg.model, args.input_size)
    except ComplexityError as exc:
        raise UsageError(str(exc)) from exc
    print(rep.format_table(min_macs=args.min_macs))
    records = [{"name": "model", "params": rep.total_params, "macs_g": f"{rep.total_macs / 1e9:.6f}"}]
    if args.paper_table:
        rows = compare_configs(ptl_sweep(cfg.model), args.input_size, ptl_sweep_reported())
        print()
        print("PTL stage sweep")
        print(format_comparison(rows))
        records += comparison_records(rows)
    if args.ablation:
        rows = compare_configs(encoder_ablations(cfg.model), args.input_size, REPORTED_ENCODER_ABLATION)
        print()
        print("encoder ablation")
        print(format_comparison(rows))
        records += comparison_records(rows)
    if args.csv:
        Path(args.csv).write_text(report_csv(records), encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    if args.size % 32:
        raise UsageError(f"--size must be a multiple of 32, got {args.size}")
    rows = model_gradcheck(cfg.model, n_samples=args.samples, seed=cfg.train.seed, size=args.size)
    worst = max(r[4] for r in rows)
    if args.verbose:
        for name, idx, a, n, rel in rows:
            print(f"{name}[{idx}]  analytic {a:+.6e}  numeric {n:+.6e}  rel {rel:.2e}")
    status = "ok" if worst < args.tol else "FAILED"
    print(f"{len(rows)} sampled parameters, max rel-err {worst:.3e} (tolerance {args.tol:g}) {status}")
    return 0 if worst < args.tol else 1


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leformer", description="Lake segmentation network toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic lake dataset")
    p.add_argument("--out", required=True, type=Path, help="output directory (images/ and masks/ are created)")
    p.add_argument("--count", type=int, default=100, help="number of image/mask pairs (default 100)")
    p.add_argument("--size", type=int, default=64, help="image side length in pixels (default 64)")
    p.add_argument("--seed", type=int, default=None, help=f"generator seed (default ${SEED_ENV} or 0)")
    p.add_argument("--blobs", type=int, nargs=2, default=(1, 4), metavar=("MIN", "MAX"), help="lakes per image")
    p.add_argument("--radius", type=float, nargs=2, default=(0.08, 0.22), metavar=("MIN", "MAX"),
                   help="lake radius as a fraction of the image size")
    p.add_argument("--noise", type=float, default=0.06, help="Gaussian pixel noise std")
    p.add_argument("--speckle", type=float, default=0.01, help="fraction of inverted speckle pixels")
    p.add_argument("--format", choices=("png", "pnm"), default="png", help="file format (pnm needs no Pillow)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write checkpoint, effective config and log")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, help="dataset directory with images/ and masks/")
    p.add_argument("--out", required=True, type=Path, help="run directory")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from (iteration numbering continues)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report OA / F1 / IoU of a checkpoint on a dataset")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True, type=Path, help="checkpoint file; its run config is read from the same directory")
    p.add_argument("--data", type=Path, help="dataset directory (default: data.root of the config)")
    p.add_argument("--split", choices=("train", "test", "all"), default="test", help="dataset split (default test)")
    p.add_argument("--csv", type=Path, help="also write the metrics CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image and write the mask and an overlay")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True, type=Path, help="checkpoint file")
    p.add_argument("--image", required=True, type=Path, help="input image")
    p.add_argument("--out", required=True, type=Path, help="output mask path")
    p.add_argument("--overlay", type=Path, help="overlay image path (default <out>_overlay, .ppm for a .pgm mask)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("complexity", help="print parameter and MAC counts")
    _add_config_flags(p)
    p.add_argument("--input-size", type=_input_size, default=(256, 256), help="N or HxW, multiples of 32 (default 256)")
    p.add_argument("--paper-table", action="store_true", help="also print the PTL stage sweep with reported figures")
    p.add_argument("--ablation", action="store_true", help="also print the encoder ablation with reported figures")
    p.add_argument("--min-macs", type=int, default=0, help="hide parameter-free rows below this many MACs")
    p.add_argument("--csv", type=Path, help="write the totals as CSV")
    p.set_defaults(func=cmd_complexity)

    p = sub.add_parser("gradcheck", help="float64 finite-difference check of the end-to-end loss")
    _add_config_flags(p)
    p.add_argument("--samples", type=_positive, default=20, help="number of sampled parameters (default 20)")
    p.add_argument("--size", type=int, default=32, help="input side length, a multiple of 32 (default 32)")
    p.add_argument("--tol", type=float, default=1e-4, help="maximum relative error (default 1e-4)")
    p.set_defaults(func=cmd_gradcheck, preset="desk")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "count", 1) < 1:
        parser.error("--count must be at least 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"leformer {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, TrainError, ShapeError, OSError, ValueError) as exc:
        print(f"leformer {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
