"""Feature taps on encoder-decoder segmentation models and a reference UNet."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import FeatureMap, NumericError, ValidationError

CHECKPOINT_FORMAT = 1
TAP_ROLES = ("deep", "shallow")


@dataclass(frozen=True)
class TapSpec:
    layer_tag: str
    role: str
    expected_channels: int
    expected_stride: int

    def __post_init__(self):
        if self.role not in TAP_ROLES:
            raise ValidationError(f"tap role must be one of {TAP_ROLES}, got {self.role!r}")
        if self.expected_channels < 1 or self.expected_stride < 1:
            raise ValidationError(f"tap {self.layer_tag!r}: channels and stride must be positive")


def conv_bn_relu(cin: int, cout: int, stride: int = 1) -> List[nn.Module]:
    return [nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class DownStage(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(*conv_bn_relu(cin, cout, stride=2), *conv_bn_relu(cout, cout))


class UpStage(nn.Module):
    """Upsample the previous decoder map, concatenate the skip, then two convs."""

    def __init__(self, cin: int, cskip: int, cout: int):
        super().__init__()
        self.conv = nn.Sequential(*conv_bn_relu(cin + cskip, cout), *conv_bn_relu(cout, cout))

    def forward(self, prev: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        prev = F.interpolate(prev, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.conv(torch.cat([skip, prev], dim=1))


class ReferenceUNet(nn.Module):
    """Small UNet with four stride-2 encoder stages and four skip decoders.

    Encoder stage ``l`` runs at stride ``2**l``. Decoder stage ``i`` upsamples
    the previous decoder map and concatenates it with the encoder map one
    level shallower; the last decoder stage uses the input image itself as its
    skip, so the logits come out at input resolution.
    """

    size_divisor = 16

    def __init__(self, num_classes: int, in_channels: int = 3, widths: Sequence[int] = (16, 32, 64, 128)):
        super().__init__()
        if num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {num_classes}")
        if len(widths) != 4:
            raise ValidationError(f"exactly four encoder widths are required, got {widths}")
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.widths = tuple(int(w) for w in widths)

        chans = (in_channels,) + self.widths
        self.encoder = nn.ModuleDict(
            {f"stage{l}": DownStage(chans[l - 1], chans[l]) for l in range(1, 5)}
        )
        # decoder stage i consumes encoder level 4 - i (level 0 is the image)
        w = self.widths
        outs = (w[2], w[1], w[0], w[0])
        ins = (w[3],) + outs[:-1]
        skips = (w[2], w[1], w[0], in_channels)
        self.decoder = nn.ModuleDict(
            {f"stage{i + 1}": UpStage(ins[i], skips[i], outs[i]) for i in range(4)}
        )
        self.classifier = nn.Conv2d(self.widths[0], num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % self.size_divisor or w % self.size_divisor:
            ph = -h % self.size_divisor
            pw = -w % self.size_divisor
            raise ValidationError(
                f"input {h}x{w} is not divisible by {self.size_divisor}; pad by ({ph}, {pw}) pixels"
            )
        feats = [x]
        for l in range(1, 5):
            feats.append(self.encoder[f"stage{l}"](feats[-1]))
        d = feats[4]
        for i in range(1, 5):
            d = self.decoder[f"stage{i}"](d, feats[4 - i])
        return self.classifier(d)


def reference_unet(num_classes: int, in_channels: int = 3, seed: Optional[int] = 0,
                   widths: Sequence[int] = (16, 32, 64, 128)) -> ReferenceUNet:
    if seed is None:
        return ReferenceUNet(num_classes, in_channels, widths)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ReferenceUNet(num_classes, in_channels, widths)


def default_taps(model: ReferenceUNet, shallow: Sequence[int] = (1,)) -> List[TapSpec]:
    taps = [TapSpec("encoder.stage4", "deep", model.widths[3], 16)]
    taps += [TapSpec(f"encoder.stage{l}", "shallow", model.widths[l - 1], 2 ** l) for l in shallow]
    return taps


def infer_taps(model: nn.Module, deep: str, shallow: Sequence[str], probe_hw: Tuple[int, int] = (64, 64)) -> List[TapSpec]:
    """Build TapSpecs by measuring the named layers on a probe input."""
    modules = dict(model.named_modules())
    tags = [deep, *shallow]
    missing = [t for t in tags if t not in modules or not t]
    if missing:
        raise ValidationError(f"unknown layer tags {missing}; available tags: {sorted(n for n in modules if n)}")
    shapes = {}
    hooks = [modules[t].register_forward_hook(lambda _m, _i, o, t=t: shapes.__setitem__(t, o.shape)) for t in tags]
    was_training = model.training
    model.eval()
    try:
        param = next(model.parameters())
        with torch.no_grad():
            model(torch.zeros(1, getattr(model, "in_channels", 3), *probe_hw, dtype=param.dtype, device=param.device))
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    out = []
    for tag in tags:
        c, h, _ = shapes[tag][1:]
        out.append(TapSpec(tag, "deep" if tag == deep else "shallow", int(c), probe_hw[0] // int(h)))
    return out


class TappedModel(nn.Module):
    """Wraps a model so forward returns ``(logits, {tag: FeatureMap})``.

    Activations are captured by forward hooks as differentiable copies, so
    later in-place ops inside the model never alter a captured map. The
    wrapped model itself is not modified and can still be called directly.
    Not safe for concurrent forwards: the capture buffer is per call.
    """

    def __init__(self, model: nn.Module, taps: Sequence[TapSpec]):
        super().__init__()
        self.model = model
        self.taps = list(taps)
        self._captured: Optional[Dict[str, torch.Tensor]] = None
        modules = dict(model.named_modules())
        self._handles = [modules[t.layer_tag].register_forward_hook(self._hook(t.layer_tag)) for t in self.taps]

    def _hook(self, tag):
        def hook(_module, _inputs, output):
            if self._captured is not None:
                self._captured[tag] = output.clone()
        return hook

    @property
    def deep_tap(self) -> TapSpec:
        return next(t for t in self.taps if t.role == "deep")

    @property
    def shallow_taps(self) -> List[TapSpec]:
        return [t for t in self.taps if t.role == "shallow"]

    def forward(self, x: torch.Tensor, check: bool = True) -> Tuple[torch.Tensor, Dict[str, FeatureMap]]:
        self._captured = {}
        try:
            logits = self.model(x)
            captured = self._captured
        finally:
            self._captured = None
        feats = {}
        for t in self.taps:
            act = captured[t.layer_tag]
            if check:
                _check_tap(t, act, x.shape[-2:])
                if not torch.isfinite(act).all():
                    raise NumericError(f"activation at {t.layer_tag!r} contains NaN or Inf")
                feats[t.layer_tag] = FeatureMap(act, t.layer_tag)
            else:
                feats[t.layer_tag] = act
        return logits, feats

    def detach_hooks(self) -> None:
        for h in self._handles:
            h.remove()
        self._handles = []


def _check_tap(tap: TapSpec, act: torch.Tensor, input_hw) -> None:
    c, h, w = act.shape[1:]
    if c != tap.expected_channels:
        raise ValidationError(f"tap {tap.layer_tag!r} has {c} channels, expected {tap.expected_channels}")
    if input_hw[0] != h * tap.expected_stride or input_hw[1] != w * tap.expected_stride:
        raise ValidationError(
            f"tap {tap.layer_tag!r} is {h}x{w} for a {tuple(input_hw)} input; "
            f"expected stride {tap.expected_stride}"
        )


def attach(model: nn.Module, taps: Sequence[TapSpec], probe_hw: Tuple[int, int] = (64, 64)) -> TappedModel:
    """Install feature taps on ``model`` and validate them with a probe forward."""
    taps = list(taps)
    roles = [t.role for t in taps]
    if roles.count("deep") != 1:
        raise ValidationError(f"exactly one deep tap is required, got {roles.count('deep')}")
    if roles.count("shallow") < 1:
        raise ValidationError("at least one shallow tap is required")
    names = {n for n, _ in model.named_modules() if n}
    unknown = [t.layer_tag for t in taps if t.layer_tag not in names]
    if unknown:
        raise ValidationError(f"unknown layer tags {unknown}; available tags: {sorted(names)}")

    handle = TappedModel(model, taps)
    in_channels = getattr(model, "in_channels", 3)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            param = next(model.parameters(), None)
            probe = torch.zeros(1, in_channels, *probe_hw,
                                dtype=param.dtype if param is not None else torch.float32,
                                device=param.device if param is not None else None)
            handle(probe)
    except ValidationError:
        handle.detach_hooks()
        raise
    finally:
        model.train(was_training)
    return handle


def save_checkpoint(path, model: ReferenceUNet, taps: Sequence[TapSpec], seed: Optional[int] = None,
                    heads: Optional[Dict[str, nn.Module]] = None, extra: Optional[dict] = None) -> None:
    """Write weights and a manifest into a single file."""
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "architecture": type(model).__name__,
        "widths": list(model.widths),
        "num_classes": model.num_classes,
        "in_channels": model.in_channels,
        "seed": seed,
        "taps": [asdict(t) for t in taps],
        "heads": sorted(heads or {}),
    }
    if extra:
        manifest.update(extra)
    payload = {
        "manifest": manifest,
        "state_dict": model.state_dict(),
        "heads": {k: v.state_dict() for k, v in (heads or {}).items()},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> Tuple[ReferenceUNet, List[TapSpec], dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    manifest = payload["manifest"]
    if manifest.get("architecture") != "ReferenceUNet":
        raise ValidationError(f"unsupported architecture {manifest.get('architecture')!r} in {path}")
    model = ReferenceUNet(manifest["num_classes"], manifest["in_channels"], manifest["widths"])
    model.load_state_dict(payload["state_dict"])
    taps = [TapSpec(**t) for t in manifest["taps"]]
    return model, taps, manifest
