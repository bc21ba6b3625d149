"""Command line entry point: ``segdoctor {train,evaluate,ablate,diagnose}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .adapter import load_checkpoint
from .core import ConfigError, DataError, NumericError, ValidationError
from .diagnosis import decompose_errors, emit_report, summary_dict
from .training import DataSpec, ablate, build_datasets, evaluate, format_ablation, load_config, predict, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("segdoctor")


def _dataset_for(checkpoint_manifest: dict, data: str, split: str):
    k = checkpoint_manifest["num_classes"]
    if data == "synth":
        saved = checkpoint_manifest.get("dataset")
        spec = DataSpec(**saved) if saved and saved.get("kind") == "synthetic" else DataSpec(num_classes=k)
        train_set, val_set = build_datasets(spec)
    else:
        spec = DataSpec(kind="voc", path=data, num_classes=k, train_split=split, val_split=split)
        train_set, val_set = build_datasets(spec)
    return train_set if split == "train" else val_set


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.epochs:
        cfg = replace(cfg, epochs=args.epochs)
    report = train(cfg)
    print(json.dumps({"out_dir": cfg.out_dir, "miou": report.miou, "boundary_f": report.boundary_f}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, _, manifest = load_checkpoint(args.checkpoint)
    dataset = _dataset_for(manifest, args.data, args.split)
    report = evaluate(model, dataset, manifest["num_classes"], band=args.band)
    print(json.dumps({"miou": report.miou, "per_class_iou": report.per_class_iou,
                      "boundary_f": report.boundary_f, "band": args.band}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    seeds = args.seeds if args.seeds else [cfg.treatment.seed]
    if args.epochs:
        cfg = replace(cfg, epochs=args.epochs)
    out = args.out or str(Path(cfg.out_dir) / "ablation")
    payload = ablate(cfg, seeds, out)
    print(format_ablation(payload), end="")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    model, _, manifest = load_checkpoint(args.checkpoint)
    dataset = _dataset_for(manifest, args.data, args.split)
    n = len(dataset) if args.limit is None else min(args.limit, len(dataset))
    if n < 1:
        raise DataError(f"no images to diagnose in split {args.split!r}")
    images, preds, gts = [], [], []
    model.eval()
    with torch.no_grad():
        for i in range(n):
            image, mask = dataset[i]
            preds.append(predict(model, image[None])[0].numpy())
            gts.append(mask.numpy())
            images.append(image.numpy())
    decomps = [decompose_errors(p, g, args.band, manifest["num_classes"]) for p, g in zip(preds, gts)]
    merged = decomps[0]
    for d in decomps[1:]:
        merged.per_image += d.per_image
        merged.error_maps += d.error_maps
        merged.category_confusion = merged.category_confusion + d.category_confusion
    merged.boundary_f = float(sum(d.boundary_f for d in decomps) / len(decomps))
    emit_report(merged, images, args.out)
    print(json.dumps(summary_dict(merged)["totals"]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segdoctor", description="Treat segmentation models with category and boundary penalties.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fine-tune a model with the configured treatments")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override out_dir")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="mIoU and boundary-F of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="VOC-layout directory or 'synth'")
    p.add_argument("--split", default="val")
    p.add_argument("--band", type=int, default=2)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="baseline / +category / +boundary / +both comparison")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("diagnose", help="split errors into boundary and category errors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="VOC-layout directory or 'synth'")
    p.add_argument("--split", default="val")
    p.add_argument("--band", type=int, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
