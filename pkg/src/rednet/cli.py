"""Command-line entry point.

Subcommands: gen-data, train, infer, eval, plot-data. Every run with an
output directory echoes its effective settings to ``config.resolved`` there,
all randomness funnels through --seed, and the default --threads 1 keeps
outputs byte-identical across reruns.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation, training
from .checkpoint import load_model
from .model import build_model, default_config

log = logging.getLogger("rednet")


def _setup_logging() -> None:
    level = os.environ.get("REDNET_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(message)s")


def _write_resolved(out_dir: Path, settings: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={v}" for k, v in sorted(settings.items())]
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n")


def _parse_overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise training.ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.n <= 0:
        raise ValueError(f"--n must be positive, got {args.n}")
    if args.size < 16:
        raise ValueError(f"--size must be at least 16, got {args.size}")
    out = Path(args.out)
    manifest = data_mod.synth_dataset(args.n, args.size, args.seed, out, max_dist=args.max_dist)
    _write_resolved(out, {"command": "gen-data", "n": args.n, "size": args.size,
                          "seed": args.seed, "max_dist": args.max_dist})
    print(f"wrote {len(manifest.entries)} image/gt pairs under {out}")
    print(f"manifest: {out / 'manifest.txt'}")
    return 0


def cmd_train(args) -> int:
    overrides = _parse_overrides(args.set)
    if args.lr is not None:
        overrides["lr"] = str(args.lr)
    if args.epochs is not None:
        overrides["epochs"] = str(args.epochs)
    if args.batch_size is not None:
        overrides["batch_size"] = str(args.batch_size)
    if args.steps is not None:
        overrides["max_steps"] = str(args.steps)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg = training.make_train_config(args.preset, args.config, overrides)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(training.config_to_text(cfg))

    manifest = data_mod.load_manifest(args.manifest)
    if args.resume:
        params, _, meta = load_model(args.resume)
        log.info("resuming from %s", args.resume)
    else:
        params = build_model(
            default_config(cfg.width_multiplier, cfg.recursion), cfg.seed, dtype=cfg.dtype()
        )
    result = training.train(params, manifest, cfg, out_dir=out, resume=args.resume)
    last = result.records[-1].total if result.records else float("nan")
    print(f"trained {len(result.records)} steps; final loss {last:.6g}")
    print(f"loss curve: {result.loss_csv}")
    print(f"checkpoints: {', '.join(str(c) for c in result.checkpoints[-2:])}")
    return 0


def cmd_infer(args) -> int:
    params, _, meta = load_model(args.checkpoint)
    recursion = args.recursion if args.recursion is not None else params.config.recursion
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out, {"command": "infer", "checkpoint": args.checkpoint,
                          "recursion": recursion, "images": ",".join(args.images)})
    for image_path in args.images:
        img = data_mod.load_image(image_path)
        maps = evaluation.infer_edge_maps(img, params, recursion)
        stem = Path(image_path).stem
        for l, m in enumerate(maps):
            data_mod.save_image(out / f"{stem}_l{l}.png", m)
        data_mod.save_image(out / f"{stem}_final.png", maps[-1])
        print(f"{image_path}: wrote {len(maps)} iteration maps + final to {out}")
    return 0


def cmd_eval(args) -> int:
    manifest = data_mod.load_manifest(args.manifest)
    max_dist = args.max_dist if args.max_dist is not None else manifest.max_dist
    out = Path(args.out)
    _write_resolved(out, {"command": "eval", "manifest": args.manifest,
                          "checkpoint": args.checkpoint or "", "edge_dir": args.edge_dir or "",
                          "max_dist": max_dist, "threads": args.threads})
    if args.checkpoint:
        params, _, _ = load_model(args.checkpoint)
        recursion = args.recursion if args.recursion is not None else params.config.recursion
        scores = evaluation.evaluate(
            manifest, params, recursion, max_dist=max_dist, out_dir=out, threads=args.threads
        )
    elif args.edge_dir:
        scores = evaluation.evaluate_edge_maps(manifest, args.edge_dir, max_dist=max_dist, out_dir=out)
    else:
        raise ValueError("eval needs either --checkpoint or --edge-dir")
    print(f"ODS {scores.ods:.4f} (t={scores.ods_threshold:.2f})  OIS {scores.ois:.4f}  AP {scores.ap:.4f}")
    print(f"reports under {out}")
    return 0


def cmd_plot_data(args) -> int:
    rows = []
    labels = args.labels.split(",") if args.labels else None
    if labels and len(labels) != len(args.curves):
        raise ValueError(f"{len(labels)} labels for {len(args.curves)} curves")
    for i, curve_path in enumerate(args.curves):
        path = Path(curve_path)
        if not path.exists():
            raise FileNotFoundError(f"pr curve not found: {path}")
        label = labels[i] if labels else path.stem
        lines = path.read_text().splitlines()
        if len(lines) < 2:
            raise ValueError(f"{path} contains no data rows")
        for line in lines[1:]:
            rows.append(f"{label},{line}")
    text = "label,threshold,precision,recall,f\n" + "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {len(rows)} rows to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rednet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset with exact ground truth")
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--size", type=int, default=64, help="square image size in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-dist", type=float, default=0.0075, help="match tolerance for the manifest")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=sorted(training.PRESETS), default=None)
    p.add_argument("--config", default=None, help="key=value settings file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="stop after this many optimizer steps")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="training checkpoint to continue from")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write per-iteration edge maps for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("-L", "--recursion", type=int, default=None)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="run the boundary benchmark")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--edge-dir", default=None, help="directory of precomputed edge maps")
    p.add_argument("--max-dist", type=float, default=None, help="defaults to the manifest header")
    p.add_argument("-L", "--recursion", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot-data", help="merge PR curves into one long-form table")
    p.add_argument("curves", nargs="+", help="pr_curve.csv files")
    p.add_argument("--labels", default=None, help="comma-separated curve labels")
    p.add_argument("--out", default=None, help="output CSV (stdout if omitted)")
    p.set_defaults(func=cmd_plot_data)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
