"""Operator surface: data generation, training, evaluation, cost reports and
selector-attention heatmap export.

Exit codes: 0 success, 2 configuration error, 3 data/integrity error,
4 I/O error. MULTILANE_THREADS caps internal parallelism (0 = deterministic
sequential, the default).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from .backbone import ViTConfig, random_init
from .checkpoint import load_checkpoint, save_checkpoint
from .costs import cost_table, format_csv, format_table
from .errors import (ArchiveError, ConfigError, IntegrityError, MultilaneError,
                     ProtocolError, ShapeError)
from .metrics import EvalReport, avg_map
from .protocol import load_dataset, make_benchmark, save_dataset, synth_generate
from .summarizer import attention_map
from .training import LearnerState, TrainConfig, evaluate, run_incremental


def _writeln(path, text):
    with open(path, "w") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    dataset = synth_generate(
        seed=args.seed, num_classes=args.classes, num_images=args.images,
        max_objects=args.max_objects, tail_exponent=args.tail,
        image_size=args.image_size, cell=args.cell, channels=args.channels,
        noise=args.noise, sign_flip_prob=args.sign_flip, copies=args.copies,
        distractor_prob=args.distractor_prob)
    save_dataset(args.out, dataset)
    print(f"wrote {args.out}.mlta and {args.out}.json "
          f"({args.images} images, {args.classes} classes)")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

DEFAULT_MODEL = {
    "image_size": 32, "patch_size": 8, "channels": 3, "depth": 4,
    "dim": 64, "heads": 4, "mlp_ratio": 4, "prompted_layers": [1, 2],
}

ABLATIONS = {
    "no_norm": {"no_norm": True},
    "querykey": {"querykey": True},
    "no_dr": {"no_drop_replace": True},
    "tome": {"use_tome": True},
}


def resolve_run_config(raw: dict, args) -> dict:
    """Merge config-file contents with CLI overrides and fill defaults.

    Raises ConfigError on anything malformed; nothing is written before this
    passes.
    """
    cfg = {
        "model": {**DEFAULT_MODEL, **raw.get("model", {})},
        "train": dict(raw.get("train", {})),
        "data": dict(raw.get("data", {})),
        "benchmark": dict(raw.get("benchmark", {})),
        "backbone_seed": raw.get("backbone_seed", 0),
        "backbone_std": raw.get("backbone_std", 0.02),
        "out": raw.get("out", "run_out"),
    }
    if args.out is not None:
        cfg["out"] = args.out
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    for name in args.ablate or []:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation '{name}', choose from {sorted(ABLATIONS)}")
        cfg["train"].update(ABLATIONS[name])

    try:
        model = dict(cfg["model"])
        model["prompted_layers"] = tuple(model["prompted_layers"])
        vit = ViTConfig(**model)
    except TypeError as exc:
        raise ConfigError(f"model section: {exc}") from exc
    try:
        train_raw = dict(cfg["train"])
        if "betas" in train_raw:
            train_raw["betas"] = tuple(train_raw["betas"])
        train = TrainConfig(**train_raw)
    except TypeError as exc:
        raise ConfigError(f"train section: {exc}") from exc
    train.validate()

    data = cfg["data"]
    if not (("train" in data and "test" in data) or "generate" in data):
        raise ConfigError("data section needs either train/test dataset prefixes or a generate block")
    if "generate" in data:
        gen = data["generate"]
        for field in ("classes", "train_images", "test_images"):
            if field not in gen:
                raise ConfigError(f"data.generate lacks '{field}'")
        if gen.get("image_size", vit.image_size) != vit.image_size:
            raise ConfigError("generated image size must match the model input size")
    bench = cfg["benchmark"]
    for field in ("base", "increment"):
        if field not in bench:
            raise ConfigError(f"benchmark section lacks '{field}'")
    cfg["_vit"] = vit
    cfg["_train"] = train
    return cfg


def _load_or_generate(cfg, vit: ViTConfig):
    data = cfg["data"]
    if "generate" in data:
        g = dict(data["generate"])
        seed = g.get("seed", 0)
        common = dict(
            num_classes=g["classes"], max_objects=g.get("max_objects", 4),
            tail_exponent=g.get("tail", 0.0), image_size=vit.image_size,
            cell=g.get("cell", vit.patch_size), channels=vit.channels,
            noise=g.get("noise", 0.02), stamp_seed=seed,
            sign_flip_prob=g.get("sign_flip", 0.0), copies=g.get("copies", 1),
            distractor_prob=g.get("distractor_prob", 0.0))
        train = synth_generate(seed=seed, num_images=g["train_images"], **common)
        test = synth_generate(seed=seed + 1, num_images=g["test_images"], **common)
        return train, test
    train = load_dataset(data["train"])
    test = load_dataset(data["test"])
    if train.num_classes != test.num_classes:
        raise IntegrityError(
            f"train has {train.num_classes} classes, test {test.num_classes}")
    return train, test


def cmd_train(args) -> int:
    with open(args.config) as fh:
        raw = json.load(fh)
    cfg = resolve_run_config(raw, args)
    vit: ViTConfig = cfg.pop("_vit")
    train_cfg: TrainConfig = cfg.pop("_train")

    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    effective = {k: v for k, v in cfg.items() if not k.startswith("_")}
    effective["train"] = asdict(train_cfg)
    effective["model"] = {**asdict(vit), "prompted_layers": list(vit.prompted_layers)}
    _writeln(os.path.join(out_dir, "effective_config.json"),
             json.dumps(effective, indent=2, sort_keys=True) + "\n")

    train_ds, test_ds = _load_or_generate(cfg, vit)
    bench = make_benchmark(
        total_classes=train_ds.num_classes,
        base=cfg["benchmark"]["base"], increment=cfg["benchmark"]["increment"],
        class_order_seed=cfg["benchmark"].get("class_order_seed"),
        train=train_ds, test=test_ds)
    weights = random_init(vit, seed=cfg["backbone_seed"], std=cfg["backbone_std"])

    state, history = run_incremental(bench, train_cfg, weights)

    log_lines = [json.dumps(entry, sort_keys=True) for entry in state.log]
    _writeln(os.path.join(out_dir, "train_log.jsonl"), "\n".join(log_lines) + "\n")
    _writeln(os.path.join(out_dir, "reports.json"),
             json.dumps({"steps": [r.to_dict() for r in history],
                         "avg_map": avg_map(history),
                         "final_map": history[-1].map},
                        indent=2, sort_keys=True) + "\n")
    csv = [EvalReport.csv_header] + [r.to_csv_row() for r in history]
    _writeln(os.path.join(out_dir, "reports.csv"), "\n".join(csv) + "\n")
    save_checkpoint(os.path.join(out_dir, "checkpoint"), state)
    print(f"trained {bench.num_tasks} task(s): "
          f"final mAP {history[-1].map:.4f}, Avg. mAP {avg_map(history):.4f}")
    print(f"outputs in {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# macs
# ---------------------------------------------------------------------------

def cmd_macs(args) -> int:
    cfg = ViTConfig(image_size=args.image, patch_size=args.patch, channels=args.channels,
                    depth=args.depth, dim=args.dim, heads=args.heads,
                    mlp_ratio=args.ratio,
                    prompted_layers=tuple(range(1, min(5, args.depth) + 1)))
    rows = cost_table(cfg, tasks=args.tasks, num_selectors=args.selectors,
                      prompt_len=args.prompts, classes_per_task=args.classes_per_task)
    print(format_table(rows))
    csv = format_csv(rows)
    print()
    print(csv, end="")
    if args.csv:
        _writeln(args.csv, csv)
    return 0


# ---------------------------------------------------------------------------
# heatmap
# ---------------------------------------------------------------------------

def _pgm_bytes(grid_map: np.ndarray, upscale: int = 16) -> bytes:
    lo, hi = float(grid_map.min()), float(grid_map.max())
    span = hi - lo if hi > lo else 1.0
    levels = np.round((grid_map - lo) / span * 255.0).astype(np.uint8)
    big = np.repeat(np.repeat(levels, upscale, axis=0), upscale, axis=1)
    header = f"P5\n{big.shape[1]} {big.shape[0]}\n255\n".encode("ascii")
    return header + big.tobytes()


def cmd_heatmap(args) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    if not 0 <= args.image_index < len(dataset):
        raise ConfigError(f"image index {args.image_index} outside dataset of {len(dataset)}")
    if not 1 <= args.task <= len(state.pathways):
        raise ConfigError(f"task {args.task} outside 1..{len(state.pathways)}")
    cfg = state.weights.config
    if not 1 <= args.layer <= cfg.depth:
        raise ConfigError(f"layer {args.layer} outside 1..{cfg.depth}")
    pathway = state.pathways[args.task - 1]
    if pathway.selectors is None:
        raise ConfigError(f"task {args.task} was trained without selectors (token merging)")

    from .backbone import frozen_forward
    taps = frozen_forward(dataset.image(args.image_index), state.weights)
    alpha = attention_map(pathway.selectors, taps.taps[args.layer - 1])

    lines = [",".join(repr(float(x)) for x in row) for row in alpha]
    _writeln(f"{args.out}.csv", "\n".join(lines) + "\n")

    patch_attn = alpha[:, 1:].mean(axis=0).reshape(cfg.grid, cfg.grid)
    with open(f"{args.out}.pgm", "wb") as fh:
        fh.write(_pgm_bytes(patch_attn))
    print(f"wrote {args.out}.csv and {args.out}.pgm "
          f"({cfg.grid * 16}x{cfg.grid * 16} grid)")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    seen = [c for p in state.pathways for c in p.class_ids]
    if max(seen, default=-1) >= dataset.num_classes:
        raise IntegrityError(
            f"checkpoint classes reach {max(seen)} but dataset has {dataset.num_classes}")
    report = evaluate(state, dataset, seen, step=len(state.pathways), cil=args.cil)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _writeln(os.path.join(args.out, "report.json"),
                 json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        _writeln(os.path.join(args.out, "report.csv"),
                 EvalReport.csv_header + "\n" + report.to_csv_row() + "\n")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="multilane",
        description="Per-task pathway learner over a frozen transformer, with "
                    "summarized-token attention and analytical cost accounting.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", formatter_class=fmt,
                       help="generate a synthetic multi-label dataset")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.add_argument("--classes", type=int, default=10, help="number of classes")
    g.add_argument("--images", type=int, default=200, help="number of images")
    g.add_argument("--tail", type=float, default=0.0, help="long-tail exponent")
    g.add_argument("--max-objects", type=int, default=4, help="max positives per image")
    g.add_argument("--image-size", type=int, default=32, help="square image size")
    g.add_argument("--cell", type=int, default=8, help="stamp cell size in pixels")
    g.add_argument("--channels", type=int, default=3, help="image channels")
    g.add_argument("--noise", type=float, default=0.02, help="background noise level")
    g.add_argument("--sign-flip", type=float, default=0.0,
                   help="probability an occurrence is stamped contrast-inverted")
    g.add_argument("--copies", type=int, default=1, help="cells stamped per occurrence")
    g.add_argument("--distractor-prob", type=float, default=0.0,
                   help="per absent class, chance of one unlabeled clutter stamp")
    g.add_argument("--out", required=True, help="output path prefix")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", formatter_class=fmt,
                       help="run the incremental protocol from a JSON config")
    t.add_argument("--config", required=True, help="JSON run configuration")
    t.add_argument("--seed", type=int, default=None, help="override train.seed")
    t.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    t.add_argument("--out", default=None, help="override output directory")
    t.add_argument("--ablate", action="append", default=None,
                   choices=sorted(ABLATIONS),
                   help="enable an ablation (repeatable)")
    t.set_defaults(fn=cmd_train)

    m = sub.add_parser("macs", formatter_class=fmt,
                       help="analytical MAC/parameter report")
    m.add_argument("--depth", type=int, default=12, help="transformer blocks")
    m.add_argument("--dim", type=int, default=768, help="embedding width")
    m.add_argument("--heads", type=int, default=12, help="attention heads")
    m.add_argument("--ratio", type=int, default=4, help="MLP expansion factor")
    m.add_argument("--image", type=int, default=224, help="input image size")
    m.add_argument("--patch", type=int, default=16, help="patch size")
    m.add_argument("--channels", type=int, default=3, help="image channels")
    m.add_argument("--tasks", type=int, default=0, help="number of task pathways")
    m.add_argument("--selectors", type=int, default=20, help="selectors per task")
    m.add_argument("--prompts", type=int, default=20, help="prompt rows per prompted layer")
    m.add_argument("--classes-per-task", type=int, default=10, help="head width per task")
    m.add_argument("--csv", default=None, help="also write the CSV block to this path")
    m.set_defaults(fn=cmd_macs)

    h = sub.add_parser("heatmap", formatter_class=fmt,
                       help="export selector attention for one image")
    h.add_argument("--checkpoint", required=True, help="checkpoint path prefix")
    h.add_argument("--data", required=True, help="dataset path prefix")
    h.add_argument("--image-index", type=int, default=0, help="image to visualize")
    h.add_argument("--task", type=int, default=1, help="task pathway (1-based)")
    h.add_argument("--layer", type=int, default=1, help="tap layer (1-based)")
    h.add_argument("--out", required=True, help="output path prefix (.csv/.pgm)")
    h.set_defaults(fn=cmd_heatmap)

    e = sub.add_parser("eval", formatter_class=fmt,
                       help="re-evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True, help="checkpoint path prefix")
    e.add_argument("--data", required=True, help="dataset path prefix")
    e.add_argument("--cil", action="store_true", default=False,
                   help="single-label mode: report argmax accuracy")
    e.add_argument("--out", default=None, help="also write report files here")
    e.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ShapeError, ProtocolError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (IntegrityError, ArchiveError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    except MultilaneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
