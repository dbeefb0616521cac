"""Command line entry point: ``unept {train,eval,infer,gradcheck,bench-attention,gen-data}``.

Exit status is 0 on success, 1 when an input breaks a contract (bad config,
incompatible checkpoint, malformed image, failed gradient check, non-finite
loss) and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config, save_config
from .data import NetpbmError, load_ppm, save_pgm, save_ppm, write_dataset
from .diagnostics import (
    BENCH_HEADER,
    GRAD_TOL,
    MODULES,
    bench_attention,
    format_gradcheck,
    run_gradcheck,
)
from .trainer import IncompatibleCheckpoint, evaluate, load_data, load_model, predict, train
from .training import NonFiniteLossError

# class k is drawn with PALETTE[k % 16]
PALETTE = np.array([
    [0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25],
    [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240],
    [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128],
    [220, 190, 255], [170, 110, 40], [255, 250, 200], [128, 0, 0],
], dtype=float) / 255.0

LEVEL_COLORS = np.array([[1.0, 0.1, 0.1], [0.1, 1.0, 0.1], [0.2, 0.4, 1.0], [1.0, 1.0, 0.1]])


class ContractViolation(Exception):
    pass


CONTRACT_ERRORS = (ContractViolation, ConfigError, CheckpointError, IncompatibleCheckpoint,
                   NetpbmError, NonFiniteLossError, FileNotFoundError, KeyError, ValueError)


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        changes["out_dir"] = str(args.out)
    if getattr(args, "dataset", None) is not None:
        changes["dataset"] = str(args.dataset)
    return cfg.replace(**changes) if changes else cfg


def overlay(image: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    colors = PALETTE[np.asarray(labels) % len(PALETTE)].transpose(2, 0, 1)
    return (1 - alpha) * image + alpha * colors


def mark_samples(image: np.ndarray, trace, query: int, strides) -> tuple:
    """Paint every sampled location of ``query`` onto a dimmed copy of the
    image, coloured by scale. Returns (canvas, number of points)."""
    canvas = 0.4 * image.copy()
    _, h, w = image.shape
    coords = trace.coords[:, query]          # M, L, N, 2 in each level's pixels
    count = 0
    for level in range(coords.shape[1]):
        s = strides[level]
        pts = (coords[:, level].reshape(-1, 2) + 0.5) * s - 0.5
        ys = np.clip(np.rint(pts[:, 0]).astype(int), 0, h - 1)
        xs = np.clip(np.rint(pts[:, 1]).astype(int), 0, w - 1)
        canvas[:, ys, xs] = LEVEL_COLORS[level % len(LEVEL_COLORS)][:, None]
        count += len(pts)
    return canvas, count


# -- commands ------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.txt", cfg)
    started = time.perf_counter()
    log = (lambda s: print(s, flush=True)) if not args.quiet else None
    result = train(cfg, out, resume=args.resume, log=log)
    last = result.rows[-1] if result.rows else {}
    print(f"trained {len(result.rows)} steps in {time.perf_counter() - started:.1f}s; "
          f"checkpoints in {out}" + (f"; val mIoU {last['miou']:.4f}" if "miou" in last else ""))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    model, step = load_model(cfg, args.checkpoint)
    train_set, val_set = load_data(cfg)
    samples = train_set if args.split == "train" else val_set
    report = evaluate(model, samples, cfg.num_classes, refine=args.refine, threshold=cfg.refine_threshold)
    print(f"checkpoint step {step}, {len(samples)} {args.split} samples")
    for key, value in report.as_dict().items():
        print(f"{key} {value:.6f}")
    return 0


def cmd_infer(args) -> int:
    cfg = _config(args)
    image = load_ppm(args.image)
    _, h, w = image.shape
    if h % 32 or w % 32:
        raise ContractViolation(f"image is {h}x{w}; both sides must be multiples of 32")
    model, _ = load_model(cfg, args.checkpoint)
    want_trace = args.viz_samples is not None
    pred = predict(model, image, cfg.refine_threshold, trace=want_trace)
    labels = pred.refined if args.refine else pred.coarse
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_pgm(out / "prediction.pgm", labels)
    save_ppm(out / "overlay.ppm", overlay(image, labels))
    print(f"wrote {out / 'prediction.pgm'} and {out / 'overlay.ppm'}")
    if want_trace:
        y, x = args.viz_samples
        if not (0 <= y < h and 0 <= x < w):
            raise ContractViolation(f"query pixel ({y}, {x}) outside the {h}x{w} image")
        stride = cfg.strides[0]
        query = (y // stride) * (w // stride) + x // stride
        canvas, count = mark_samples(image, pred.output.traces[-1], query, cfg.strides)
        save_ppm(out / "sample_points.ppm", canvas)
        print(f"wrote {out / 'sample_points.ppm'} with {count} sampled locations")
    return 0


def cmd_gradcheck(args) -> int:
    started = time.perf_counter()
    reports = run_gradcheck(args.module, seed=args.seed or 0)
    print(format_gradcheck(reports))
    print(f"elapsed {time.perf_counter() - started:.1f}s")
    return 0 if all(r.passed(GRAD_TOL) for r in reports) else 1


def cmd_bench(args) -> int:
    cfg = _config(args)
    rows = bench_attention(args.sizes, cfg.d_model, cfg.n_heads, cfg.d_head, cfg.n_points,
                           cfg.n_levels, repeats=args.repeats, block=args.block, seed=cfg.seed)
    text = "\n".join([BENCH_HEADER] + [r.csv() for r in rows]) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    spec = cfg.scene_spec()
    out = Path(args.out or cfg.out_dir)
    counts = {"train": args.train if args.train is not None else cfg.train_samples,
              "val": args.val if args.val is not None else cfg.val_samples}
    write_dataset(out, spec, counts, gamma=cfg.gamma)
    print(f"wrote {counts['train']} train and {counts['val']} val scenes to {out}")
    return 0


# -- parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unept", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory (overrides out_dir)"):
        p.add_argument("--config", type=Path, help="run configuration file")
        p.add_argument("--seed", type=_u64, help="override the configured seed")
        p.add_argument("--out", type=Path, help=out_help)
        return p

    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--resume", type=Path, help="continue from this checkpoint")
    p.add_argument("--quiet", action="store_true", help="no per-step log lines")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="score a checkpoint"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, help="dataset directory (overrides the config)")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--refine", type=_on_off, default=True, metavar="on|off")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("infer", help="segment one image"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--refine", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--viz-samples", type=int, nargs=2, metavar=("Y", "X"),
                   help="also draw the sampled locations for this query pixel")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--config", type=Path, help="accepted for symmetry; the suites use fixed small shapes")
    p.add_argument("--module", choices=("all",) + MODULES, default="all")
    p.add_argument("--seed", type=_u64)
    p.set_defaults(func=cmd_gradcheck)

    p = common(sub.add_parser("bench-attention", help="dense vs sampled attention timing"),
               out_help="also write the CSV to this file")
    p.add_argument("--sizes", type=int, nargs="+", default=[4096, 8192, 16384])
    p.add_argument("--repeats", type=int, default=5, help="timed rounds; each size reports the median")
    p.add_argument("--block", type=int, default=2 ** 21, help="floats in the largest per-block buffer")
    p.set_defaults(func=cmd_bench)

    p = common(sub.add_parser("gen-data", help="write a synthetic dataset directory"))
    p.add_argument("--train", type=int, help="number of training scenes")
    p.add_argument("--val", type=int, help="number of validation scenes")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CONTRACT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
