"""Command-line workflow: gen | validate | train | infer | eval | bench.

Configuration is a JSON object with flat dotted keys (`model.embed_dim`,
`train.learning_rate`, `data.num_images`, `eval.kind`, ...) plus repeatable
`--set key=value` overrides. Unknown keys are rejected by name. Exit codes:
0 success, 1 validation/eval failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .annotations import ParseError, ValidationError, parse_dataset, read_pgm, validate
from .evaluation import evaluate, measure_fps, write_report
from .model import (ModelConfig, infer, load_checkpoint, read_predictions,
                    write_predictions)
from .synthetic import SyntheticConfig, generate_synthetic, write_synthetic
from .training import TrainConfig, train


EVAL_DEFAULTS = {
    "eval.kind": "mask",
    "eval.score_threshold": 0.05,
    "eval.max_detections": 100,
}


def _known_keys() -> Dict[str, type]:
    keys: Dict[str, type] = {}
    for prefix, cls in (("model", ModelConfig), ("train", TrainConfig),
                        ("data", SyntheticConfig)):
        for f in dataclasses.fields(cls):
            keys[f"{prefix}.{f.name}"] = f
    for k in EVAL_DEFAULTS:
        keys[k] = None
    return keys


class ConfigError(ValueError):
    pass


def load_run_config(config_path: Optional[str],
                    overrides: List[str]) -> Dict[str, object]:
    merged: Dict[str, object] = {}
    if config_path:
        doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        merged.update(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, value = item.split("=", 1)
        try:
            merged[key] = json.loads(value)
        except json.JSONDecodeError:
            merged[key] = value
    known = _known_keys()
    for key in merged:
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'")
    return merged


def _build(cls, prefix: str, merged: Dict[str, object]):
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}.{f.name}"
        if key in merged:
            val = merged[key]
            if f.name == "loss_weights" or f.name == "cost_weights":
                val = dict(val)
            kwargs[f.name] = val
    return cls(**kwargs)


def _load_images(aset, images_dir: str) -> Dict[int, np.ndarray]:
    base = Path(images_dir)
    return {im.id: read_pgm(base / im.file_name) for im in aset.images}


def _cmd_gen(args) -> int:
    merged = load_run_config(args.config, args.set or [])
    cfg = _build(SyntheticConfig, "data", merged)
    aset, rendered = generate_synthetic(cfg)
    ann_path = write_synthetic(aset, rendered, args.out)
    print(f"wrote {len(aset.images)} images and {ann_path}", file=sys.stderr)
    return 0


def _cmd_validate(args) -> int:
    try:
        parse_dataset(args.annotations)
    except ValidationError as e:
        for d in e.diagnostics:
            print(d, file=sys.stderr)
        return 1
    except ParseError as e:
        print(str(e), file=sys.stderr)
        return 1
    print("dataset is valid", file=sys.stderr)
    return 0


def _cmd_train(args) -> int:
    merged = load_run_config(args.config, args.set or [])
    model_cfg = _build(ModelConfig, "model", merged)
    train_cfg = _build(TrainConfig, "train", merged)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.annotations:
        aset = parse_dataset(args.annotations)
        images = _load_images(aset, args.images)
    else:
        aset, images = generate_synthetic(_build(SyntheticConfig, "data", merged))
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")  # truncate; train() appends
    result = train(aset, images, train_cfg, model_cfg,
                   checkpoint_path=out / "checkpoint.gsa2",
                   metrics_path=metrics_path,
                   resume_from=args.resume)
    print(f"trained {result.step} steps; final loss "
          f"{result.metrics[-1].total:.4f}", file=sys.stderr)
    return 0


def _cmd_infer(args) -> int:
    merged = load_run_config(args.config, args.set or [])
    cfg, params, _ = load_checkpoint(args.ckpt)
    aset = parse_dataset(args.annotations)
    images = _load_images(aset, args.images)
    threshold = float(merged.get("eval.score_threshold",
                                 EVAL_DEFAULTS["eval.score_threshold"]))
    max_det = int(merged.get("eval.max_detections",
                             EVAL_DEFAULTS["eval.max_detections"]))
    preds = {im.id: infer(images[im.id], params, cfg,
                          score_threshold=threshold, max_detections=max_det)
             for im in aset.images}
    write_predictions(args.out, preds)
    n = sum(len(v) for v in preds.values())
    print(f"wrote {n} predictions for {len(preds)} images", file=sys.stderr)
    return 0


def _cmd_eval(args) -> int:
    merged = load_run_config(args.config, args.set or [])
    try:
        gt = parse_dataset(args.annotations)
        preds = read_predictions(args.pred)
        kind = str(merged.get("eval.kind", EVAL_DEFAULTS["eval.kind"]))
        max_det = int(merged.get("eval.max_detections",
                                 EVAL_DEFAULTS["eval.max_detections"]))
        report = evaluate(gt, preds, kind=kind, max_per_image=max_det)
    except (ValidationError, ParseError, ValueError) as e:
        print(str(e), file=sys.stderr)
        return 1
    write_report(report, args.out)
    print(f"ap={report.ap:.4f} ap50={report.ap50:.4f}", file=sys.stderr)
    return 0


def _cmd_bench(args) -> int:
    cfg, params, _ = load_checkpoint(args.ckpt)
    image_paths = sorted(Path(args.images).glob("*.pgm"))
    if not image_paths:
        print(f"no .pgm images under {args.images}", file=sys.stderr)
        return 1
    images = [read_pgm(p) for p in image_paths]
    stats = measure_fps(lambda img: infer(img, params, cfg),
                        images, repeats=args.repeats)
    print(json.dumps(stats))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attrseg",
        description="Synthesize, validate, train, infer, evaluate, benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="JSON config with flat dotted keys")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    add_config(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_gen)

    p = sub.add_parser("validate", help="validate an annotation file")
    p.add_argument("annotations", help="annotation JSON path")
    p.set_defaults(fn=_cmd_validate)

    p = sub.add_parser("train", help="train a model")
    add_config(p)
    p.add_argument("--out", required=True, help="output directory for "
                   "checkpoint.gsa2 and metrics.jsonl")
    p.add_argument("--ann", dest="annotations", help="annotation JSON "
                   "(default: synthesize from data.* config)")
    p.add_argument("--images", help="image directory for --ann")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("infer", help="run inference, write predictions JSON")
    add_config(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ann", dest="annotations", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    add_config(p)
    p.add_argument("--ann", dest="annotations", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("bench", help="measure inference FPS")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(fn=_cmd_bench)
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0,) else 0
    try:
        return args.fn(args)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return 2
    except (ValidationError, ParseError) as e:
        print(str(e), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
