"""Treatment fine-tuning: combined objective, SGD loop, evaluation and ablation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from torch.utils.data import DataLoader

from .adapter import TappedModel, attach, infer_taps, load_checkpoint, reference_unet, save_checkpoint
from .category import CentroidTracker, category_loss, compute_centroids
from .core import (
    IGNORE_INDEX,
    ConfigError,
    LabelMap,
    NumericError,
    TreatmentConfig,
    checked_keys,
    downsample_labels,
)
from .data import SHAPE_TYPES, Augmented, load_voc_dir, synth_dataset
from .diagnosis import boundary_f_score
from .metrics import confusion_matrix, iou_per_class, mean_iou
from .superpixel import build_head, superpixel_treatment

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ABLATION_VARIANTS = {
    "baseline": (False, False),
    "+category": (True, False),
    "+boundary": (False, True),
    "+category&boundary": (True, True),
}


@dataclass
class DataSpec:
    kind: str = "synthetic"
    path: Optional[str] = None
    train_split: str = "train"
    val_split: str = "val"
    num_classes: int = 3
    num_train: int = 200
    num_val: int = 50
    size: Tuple[int, int] = (64, 64)
    shape_types: Tuple[str, ...] = SHAPE_TYPES
    max_shapes: int = 4
    seed: int = 0

    def __post_init__(self):
        self.size = tuple(int(v) for v in self.size)
        self.shape_types = tuple(self.shape_types)
        if self.kind not in ("synthetic", "voc"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'voc', got {self.kind!r}")
        if self.kind == "voc" and not self.path:
            raise ConfigError("data.path is required for VOC datasets")
        if self.num_classes < 2:
            raise ConfigError(f"data.num_classes must be >= 2, got {self.num_classes}")


@dataclass
class RunConfig:
    treatment: TreatmentConfig = field(default_factory=TreatmentConfig)
    data: DataSpec = field(default_factory=DataSpec)
    epochs: int = 20
    device: str = "cpu"
    out_dir: str = "runs/default"
    enable_category: bool = True
    enable_boundary: bool = True
    band: int = 2
    init_checkpoint: Optional[str] = None
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    eval_batch_size: int = 8

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.band < 1:
            raise ConfigError(f"band must be >= 1, got {self.band}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["treatment"] = self.treatment.to_dict()
        d["data"]["size"] = list(self.data.size)
        d["data"]["shape_types"] = list(self.data.shape_types)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = checked_keys(cls, d, "config")
        try:
            d["treatment"] = TreatmentConfig.from_dict(d.get("treatment", {}))
            d["data"] = DataSpec(**checked_keys(DataSpec, d.get("data", {}), "data"))
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return RunConfig.from_dict(raw or {})


@dataclass
class MetricsReport:
    per_class_iou: List[Optional[float]]
    miou: float
    boundary_f: float
    confusion: np.ndarray = field(repr=False, default=None)
    loss_curve: List[dict] = field(default_factory=list)


def total_loss(ce, sim, sp, alpha: float, beta: float):
    """Cross-entropy plus weighted category and superpixel penalties.

    ``sim`` or ``sp`` may be None for a disabled treatment. A non-finite
    component raises NumericError naming it.
    """
    for name, value in (("ce", ce), ("sim", sim), ("sp", sp)):
        if value is None:
            continue
        finite = bool(torch.isfinite(value).all()) if torch.is_tensor(value) else math.isfinite(value)
        if not finite:
            raise NumericError(f"loss component {name!r} is not finite ({float(value)})")
    out = ce
    if sim is not None:
        out = out + alpha * sim
    if sp is not None:
        out = out + beta * sp
    return out


def _seed(seed: int, stream: int) -> int:
    # independent streams for model init, head init, data order and augmentation
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def build_datasets(spec: DataSpec):
    if spec.kind == "synthetic":
        common = dict(size=spec.size, num_classes=spec.num_classes, shape_types=spec.shape_types,
                      max_shapes=spec.max_shapes)
        train = synth_dataset(spec.num_train, seed=[spec.seed, 0], **common)
        val = synth_dataset(spec.num_val, seed=[spec.seed, 1], **common)
        return train, val
    train = load_voc_dir(spec.path, spec.train_split, spec.num_classes)
    val = load_voc_dir(spec.path, spec.val_split, spec.num_classes)
    return train, val


def predict(model: torch.nn.Module, images: torch.Tensor) -> torch.Tensor:
    """Argmax labels; inputs are zero-padded to the model's size divisor and cropped back."""
    div = getattr(model, "size_divisor", 1)
    h, w = images.shape[-2:]
    ph, pw = -h % div, -w % div
    x = F.pad(images, (0, pw, 0, ph)) if ph or pw else images
    return model(x)[..., :h, :w].argmax(1)


def _chunks(dataset, batch_size):
    batch = []
    for i in range(len(dataset)):
        item = dataset[i]
        if batch and item[0].shape != batch[0][0].shape:
            yield batch
            batch = []
        batch.append(item)
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch


def evaluate(model: torch.nn.Module, dataset, num_classes: Optional[int] = None, band: int = 2,
             batch_size: int = 8, ignore_index: int = IGNORE_INDEX, device: str = "cpu") -> MetricsReport:
    """Confusion-matrix mIoU and mean boundary-F over a dataset."""
    if isinstance(model, TappedModel):
        model = model.model
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    k = num_classes or getattr(dataset, "num_classes", None) or model.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    scores = []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for batch in _chunks(dataset, batch_size):
                images = torch.stack([b[0] for b in batch]).to(device)
                masks = torch.stack([b[1] for b in batch]).numpy()
                pred = predict(model, images).cpu().numpy()
                cm += confusion_matrix(pred, masks, k, ignore_index)
                scores += [boundary_f_score(p, g, band, ignore_index) for p, g in zip(pred, masks)]
    finally:
        model.train(was_training)
    iou = iou_per_class(cm)
    return MetricsReport(
        per_class_iou=[None if np.isnan(v) else float(v) for v in iou],
        miou=mean_iou(cm),
        boundary_f=float(np.mean(scores)),
        confusion=cm,
    )


def check_recombination(record: dict, tol: float = 1e-6) -> float:
    """Absolute gap between a logged total and its recombined components."""
    t = record["train"]
    recombined = t["ce"] + record["alpha"] * t["sim"] + record["beta"] * t["sp"]
    gap = abs(t["total"] - recombined)
    if gap > tol:
        raise NumericError(f"epoch {record['epoch']}: total {t['total']} != recombined {recombined}")
    return gap


def _write_json(path: Path, obj) -> None:
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def train(run: RunConfig, model: Optional[torch.nn.Module] = None) -> MetricsReport:
    """Fine-tune ``model`` (or a fresh reference UNet) with the enabled treatments.

    Writes ``manifest.json``, ``metrics.jsonl``, ``last.pt`` and ``best.pt``
    into ``run.out_dir``. Equal configs produce byte-identical metrics files.
    """
    tc = run.treatment
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    device = torch.device(run.device)
    k = run.data.num_classes

    train_set, val_set = build_datasets(run.data)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if model is None:
        if run.init_checkpoint:
            model, _, _ = load_checkpoint(run.init_checkpoint)
        else:
            model = reference_unet(k, seed=_seed(tc.seed, 0), widths=run.widths)
    if getattr(model, "num_classes", k) != k:
        raise ConfigError(f"model predicts {model.num_classes} classes but the data declares {k}")
    model.to(device)
    crop = tc.crop_size if tc.crop_size is not None else (run.data.size if run.data.kind == "synthetic" else (512, 512))
    taps = infer_taps(model, tc.deep_tap, tc.shallow_taps, probe_hw=tuple(crop))
    handle = attach(model, taps, probe_hw=tuple(crop))

    heads: Dict[str, torch.nn.Module] = {}
    if run.enable_boundary:
        for i, tap in enumerate(handle.shallow_taps):
            heads[tap.layer_tag] = build_head(tap.expected_channels, tc.head_hidden, seed=_seed(tc.seed, 10 + i)).to(device)
    params = list(model.parameters()) + [p for h in heads.values() for p in h.parameters()]
    optimizer = torch.optim.SGD(params, lr=tc.lr, momentum=tc.momentum, weight_decay=tc.weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=run.epochs, eta_min=tc.lr_floor)
    tracker = CentroidTracker(k, tc.ema_decay) if tc.centroid_mode == "ema" else None

    augmented = Augmented(train_set, crop, tc.hflip, tc.vflip, seed=_seed(tc.seed, 3))
    order_rng = np.random.default_rng(_seed(tc.seed, 2))

    _write_json(out / "manifest.json", {
        "schema_version": SCHEMA_VERSION,
        "config": run.to_dict(),
        "optimizer": {"name": "SGD", "momentum": tc.momentum, "weight_decay": tc.weight_decay,
                      "schedule": "cosine", "T_max_epochs": run.epochs, "eta_min": tc.lr_floor},
        "taps": [asdict(t) for t in taps],
    })
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")

    curve = []
    best = -math.inf
    report = None
    for epoch in range(run.epochs):
        model.train()
        for h in heads.values():
            h.train()
        augmented.set_epoch(epoch)
        order = order_rng.permutation(len(augmented)).tolist()
        loader = DataLoader(augmented, batch_size=tc.batch_size, sampler=order, num_workers=0)
        lr = optimizer.param_groups[0]["lr"]
        sums = {"total": 0.0, "ce": 0.0, "sim": 0.0, "sp": 0.0}
        steps = 0
        for step, (images, masks) in enumerate(loader):
            images, masks = images.to(device), masks.to(device)
            try:
                logits, feats = handle(images)
            except NumericError as e:
                raise NumericError(f"epoch {epoch} step {step}: {e}") from e
            labels = LabelMap(masks, k)
            ce = F.cross_entropy(logits, masks, ignore_index=IGNORE_INDEX)
            sim = sp = None
            if run.enable_category:
                deep = feats[tc.deep_tap].data
                small = downsample_labels(labels, deep.shape[-2:])
                if small.valid.any():
                    centroids = compute_centroids(deep, small, detach=not tc.centroid_grad)
                    if tracker is not None:
                        centroids = tracker.update(centroids)
                    sim = category_loss(deep, centroids, small).value
                else:
                    sim = deep.sum() * 0.0
            if run.enable_boundary:
                parts = [
                    superpixel_treatment(heads[tag], feats[tag], labels, tc.s, tc.m, tc.normalization_mode).value
                    for tag in heads
                ]
                sp = torch.stack(parts).mean()
            try:
                loss = total_loss(ce, sim, sp, tc.alpha, tc.beta)
            except NumericError as e:
                raise NumericError(f"epoch {epoch} step {step}: {e}") from e
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            sums["total"] += loss.item()
            sums["ce"] += ce.item()
            sums["sim"] += sim.item() if sim is not None else 0.0
            sums["sp"] += sp.item() if sp is not None else 0.0
            steps += 1
        scheduler.step()

        val = evaluate(model, val_set, k, run.band, run.eval_batch_size, device=run.device)
        record = {
            "epoch": epoch,
            "lr": lr,
            "alpha": tc.alpha,
            "beta": tc.beta,
            "train": {key: v / steps for key, v in sums.items()},
            "val": {"miou": val.miou, "per_class_iou": val.per_class_iou, "boundary_f": val.boundary_f},
        }
        check_recombination(record)
        with metrics_path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        curve.append(record)
        log.info("epoch %d lr %.5f loss %.4f (ce %.4f sim %.4f sp %.4f) val mIoU %.4f bF %.4f",
                 epoch, lr, record["train"]["total"], record["train"]["ce"], record["train"]["sim"],
                 record["train"]["sp"], val.miou, val.boundary_f)

        extra = {"dataset": asdict(run.data), "epoch": epoch, "val_miou": val.miou}
        save_checkpoint(out / "last.pt", model, taps, tc.seed, heads, extra)
        if val.miou > best:
            best = val.miou
            save_checkpoint(out / "best.pt", model, taps, tc.seed, heads, extra)
        report = val

    handle.detach_hooks()
    report.loss_curve = curve
    return report


def read_metrics(path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def ablate(base: RunConfig, seeds: Sequence[int], out_dir, variants: Sequence[str] = tuple(ABLATION_VARIANTS)) -> dict:
    """Run the baseline / +category / +boundary / +both grid over ``seeds``.

    Writes ``ablation.json`` and a markdown table ``ablation.md`` under
    ``out_dir`` and returns the JSON payload.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for name in variants:
        cat, bnd = ABLATION_VARIANTS[name]
        runs = []
        for seed in seeds:
            cfg = replace(
                base,
                treatment=replace(base.treatment, seed=seed),
                enable_category=cat,
                enable_boundary=bnd,
                out_dir=str(out / name.strip("+").replace("&", "_") / f"seed{seed}"),
            )
            start = time.perf_counter()
            report = train(cfg)
            elapsed = time.perf_counter() - start
            curve = report.loss_curve
            runs.append({
                "seed": seed,
                "out_dir": cfg.out_dir,
                "miou": report.miou,
                "boundary_f": report.boundary_f,
                "initial_loss": curve[0]["train"]["total"],
                "final_loss": curve[-1]["train"]["total"],
                "wall_seconds": elapsed,
            })
        results[name] = {
            "runs": runs,
            "mean_miou": float(np.mean([r["miou"] for r in runs])),
            "mean_boundary_f": float(np.mean([r["boundary_f"] for r in runs])),
        }
    payload = {"schema_version": SCHEMA_VERSION, "seeds": list(seeds), "band": base.band, "variants": results}
    _write_json(out / "ablation.json", payload)
    (out / "ablation.md").write_text(format_ablation(payload))
    return payload


def format_ablation(payload: dict) -> str:
    variants = payload["variants"]
    ref = variants.get("baseline")
    lines = [
        f"| Method | mIoU | delta | boundary-F (d={payload['band']}) | delta |",
        "|---|---|---|---|---|",
    ]
    for name, res in variants.items():
        miou, bf = 100 * res["mean_miou"], res["mean_boundary_f"]
        dm = f"{miou - 100 * ref['mean_miou']:+.1f}" if ref and name != "baseline" else ""
        db = f"{bf - ref['mean_boundary_f']:+.3f}" if ref and name != "baseline" else ""
        lines.append(f"| {name} | {miou:.1f} | {dm} | {bf:.3f} | {db} |")
    return "\n".join(lines) + "\n"
