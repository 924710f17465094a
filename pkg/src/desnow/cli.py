"""Command-line entry point: synth, train, infer, filter, eval, render."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .formats import read_labels, write_labels
from .geom import SensorConfig, unproject
from .losses import SCHEDULES
from .metrics import Metrics, evaluate
from .model import load_checkpoint, save_checkpoint
from .postprocess import classify
from .pipeline import (
    Detector,
    filter_labels,
    fit_detector,
    load_split,
    parse_shift,
    read_manifest,
    write_dataset,
)
from .render import BevConfig, render_bev, render_heatmap
from .synth import NoiseLevel, synthesize_dataset
from .training import MODES, TrainConfig, train, write_history_csv

logger = logging.getLogger("desnow")

PRED_MANIFEST = "predictions.json"
METRIC_FIELDS = ["method", "level", "scans", "IoU", "Precision", "Recall", "TP", "FP", "FN", "TN"]


def _count_range(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("expected a:b") from None
    if not 0 <= a <= b:
        raise argparse.ArgumentTypeError("need 0 <= a <= b")
    return a, b


def _threshold(text: str):
    if text == "auto":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("threshold is 'auto' or a number") from None


def cmd_synth(args) -> int:
    sensor = SensorConfig.with_cols(args.rows, args.cols, max_range=args.max_range)
    a, b = args.noise_count_range
    if b >= 1:
        a, b = int(a), int(b)
    scans = synthesize_dataset(args.scenes, sensor, seed=args.seed, noise_count_range=(a, b))
    manifest = write_dataset(Path(args.out), scans, sensor, args.seed)
    levels = {}
    for e in manifest["scans"]:
        levels[e["noise_level"]] = levels.get(e["noise_level"], 0) + 1
    print(f"wrote {len(scans)} scans to {args.out}; noise levels {levels}")
    return 0


def labeled_subset(ids: list[str], fraction: float, seed: int) -> list[str]:
    """Deterministic labeled subset of the training ids; at least one scan when fraction > 0."""
    if fraction <= 0:
        return []
    n = min(len(ids), max(1, int(np.floor(fraction * len(ids) + 0.5))))
    pick = np.random.default_rng(np.random.SeedSequence([seed, 2])).choice(len(ids), size=n, replace=False)
    return [ids[i] for i in sorted(pick)]


def cmd_train(args) -> int:
    entries, images, _ = load_split(args.data, "train")
    if not images:
        raise SystemExit("training split is empty")
    cfg = TrainConfig(
        blank_ratio=args.blank_ratio, hypotheses=args.hypotheses, lr=args.lr, steps=args.steps,
        batch_size=args.batch_size, mode=args.mode, schedule=args.schedule, range_scale=args.range_scale,
        seed=args.seed, flip=not args.no_flip, width=args.width, n_blocks=args.blocks,
        n_encoder_blocks=args.encoder_blocks, log_every=args.log_every,
    )
    labels = None
    labeled_ids: list[str] = []
    if args.mode in ("semi", "sup"):
        labeled_ids = labeled_subset([e["id"] for e in entries], args.labeled_fraction, args.seed)
        keep = set(labeled_ids)
        labels = [im.labels if e["id"] in keep else None for e, im in zip(entries, images)]
    model, history = train(images, cfg, labels)
    save_checkpoint(args.out, model, step=cfg.steps,
                    extra={"train": {k: v for k, v in vars(args).items() if k != "func"},
                           "labeled_ids": labeled_ids})
    if args.log:
        write_history_csv(args.log, history)
    print(f"saved {args.out} after {cfg.steps} steps")
    return 0


def cmd_infer(args) -> int:
    model, _ = load_checkpoint(args.model)
    shift = parse_shift(args.shift)
    if args.threshold == "auto":
        _, val_imgs, _ = load_split(args.data, "val")
        if not val_imgs:
            raise SystemExit("automatic threshold needs a validation split")
        det = fit_detector(model, val_imgs, [im.labels for im in val_imgs], shift, args.source)
    else:
        det = Detector(model, args.threshold, shift, args.source)
    entries, images, _ = load_split(args.data, None if args.split == "all" else args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for e, im in zip(entries, images):
        scores = det.scores(im)
        write_labels(out / f"{e['id']}.pred", classify(scores, det.threshold, im.valid))
        np.save(out / f"{e['id']}.score.npy", scores)
    meta = {"method": args.name or f"model-{args.shift}", "threshold": det.threshold, "shift": args.shift,
            "source": args.source, "model": str(args.model), "scans": [e["id"] for e in entries]}
    (out / PRED_MANIFEST).write_text(json.dumps(meta, indent=1, sort_keys=True))
    print(f"threshold {det.threshold!r}; wrote {len(entries)} predictions to {out}")
    return 0


def cmd_filter(args) -> int:
    entries, images, sensor = load_split(args.data, None if args.split == "all" else args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for e, im in zip(entries, images):
        write_labels(out / f"{e['id']}.pred", filter_labels(im, sensor, args.method))
    meta = {"method": args.name or args.method.upper(), "scans": [e["id"] for e in entries]}
    (out / PRED_MANIFEST).write_text(json.dumps(meta, indent=1, sort_keys=True))
    print(f"wrote {len(entries)} {args.method} predictions to {out}")
    return 0


def metric_rows(method: str, per_scan: list[tuple[str, Metrics]], by_level: bool) -> list[dict]:
    groups = [("All", [m for _, m in per_scan])]
    if by_level:
        for level in NoiseLevel:
            ms = [m for lvl, m in per_scan if lvl == level.value]
            if ms:
                groups.append((level.value, ms))
    rows = []
    for name, ms in groups:
        total = sum(ms[1:], ms[0])
        rows.append({"method": method, "level": name, "scans": len(ms), **total.row()})
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'Method':<16} {'Level':<8} {'IoU':>7} {'Precision':>10} {'Recall':>7}"]
    for r in rows:
        pct = lambda v: "   n/a" if v != v else f"{100 * v:6.2f}"
        lines.append(f"{r['method']:<16} {r['level']:<8} {pct(r['IoU']):>7} {pct(r['Precision']):>10} {pct(r['Recall']):>7}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    meta = json.loads((pred_dir / PRED_MANIFEST).read_text())
    manifest = read_manifest(args.gt)
    by_id = {e["id"]: e for e in manifest["scans"]}
    shape = tuple(SensorConfig.from_dict(manifest["sensor"]).shape)
    _, images, _ = load_split(args.gt)
    gt_of = {e["id"]: im.labels for e, im in zip(manifest["scans"], images)}
    per_scan = []
    for sid in meta["scans"]:
        pred = read_labels(pred_dir / f"{sid}.pred", shape)
        per_scan.append((by_id[sid]["noise_level"], evaluate(pred, gt_of[sid])))
    if not per_scan:
        raise SystemExit("no predictions to evaluate")
    rows = metric_rows(args.method or meta["method"], per_scan, args.by_noise_level)
    print(format_table(rows))
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return 0


def cmd_render(args) -> int:
    entries, images, sensor = load_split(args.data)
    idx = next((i for i, e in enumerate(entries) if e["id"] == args.scan), None)
    if idx is None:
        raise SystemExit(f"scan {args.scan} not in {args.data}")
    img = images[idx]
    pred = read_labels(Path(args.pred) / f"{args.scan}.pred", img.shape) if args.pred else None
    if args.style == "bev":
        cloud = unproject(img, sensor)
        rows, cols = np.nonzero(img.valid)
        p = pred[rows, cols] if pred is not None else None
        g = img.labels[rows, cols] if pred is not None else None
        out = render_bev(cloud, p, g, BevConfig(resolution=args.resolution, extent=args.extent))
    else:
        if args.values == "difficulty":
            if not args.pred:
                raise SystemExit("--values difficulty needs --pred with saved scores")
            values = np.load(Path(args.pred) / f"{args.scan}.score.npy")
        else:
            values = img.rng
        out = render_heatmap(values, img.valid)
    out.save(args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="desnow", description="Self-supervised LiDAR snow removal toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a procedural snow dataset")
    s.add_argument("--scenes", type=int, required=True)
    s.add_argument("--noise-count-range", type=_count_range, default=(0.03, 0.10),
                   help="a:b noise points per scan; values below 1 are fractions of the pixel count")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--rows", type=int, default=32)
    s.add_argument("--cols", type=int, default=512)
    s.add_argument("--max-range", type=float, default=80.0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train reconstruction and difficulty networks")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="training-history CSV")
    t.add_argument("--mode", choices=MODES, default="self")
    t.add_argument("--hypotheses", type=int, default=3)
    t.add_argument("--blank-ratio", type=float, default=0.5)
    t.add_argument("--schedule", choices=SCHEDULES, default="smooth")
    t.add_argument("--labeled-fraction", type=float, default=0.1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--lr", type=float, default=2e-3)
    t.add_argument("--batch-size", type=int, default=1)
    t.add_argument("--width", type=int, default=32)
    t.add_argument("--blocks", type=int, default=6)
    t.add_argument("--encoder-blocks", type=int, default=4)
    t.add_argument("--range-scale", type=float, default=100.0)
    t.add_argument("--no-flip", action="store_true")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="score and classify scans with a trained model")
    i.add_argument("--model", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--shift", default="p20", help="p<N>, min or none")
    i.add_argument("--threshold", type=_threshold, default="auto")
    i.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    i.add_argument("--source", choices=("difficulty", "classifier"), default="difficulty")
    i.add_argument("--name", help="method name used in reports")
    i.set_defaults(func=cmd_infer)

    f = sub.add_parser("filter", help="run the ROR or DROR baseline")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--method", choices=("ror", "dror"), default="dror")
    f.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    f.add_argument("--name")
    f.set_defaults(func=cmd_filter)

    e = sub.add_parser("eval", help="compare predictions with ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True, help="dataset directory")
    e.add_argument("--by-noise-level", action="store_true")
    e.add_argument("--csv")
    e.add_argument("--method")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="draw a scan as a BEV outcome map or range heatmap")
    r.add_argument("--data", required=True)
    r.add_argument("--scan", required=True)
    r.add_argument("--pred")
    r.add_argument("--style", choices=("bev", "range"), default="bev")
    r.add_argument("--values", choices=("range", "difficulty"), default="range")
    r.add_argument("--resolution", type=float, default=0.2)
    r.add_argument("--extent", type=float, default=40.0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
