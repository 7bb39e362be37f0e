"""Residual backbone + feature pyramid + class/box/attribute subnets.

All heads emit raw logits; sigmoids are applied by the losses and the decoder.
Head weights are shared across pyramid levels but never between heads.
"""
from __future__ import annotations

import ast
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

BACKBONES = ("tiny-resnet", "resnet-50", "resnet-101", "resnet-152-shape")
_BOTTLENECK_DEPTHS = {
    "resnet-50": (3, 4, 6, 3),
    "resnet-101": (3, 4, 23, 3),
    "resnet-152-shape": (3, 8, 36, 3),
}
TINY_CHANNELS = (32, 64, 128)


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    num_attributes: int
    anchors_per_location: int = 9
    backbone: str = "tiny-resnet"
    fpn_channels: int = 256
    head_depth: int = 4
    prior_pi: float = 0.01
    num_levels: int = 3

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        for name in ("num_classes", "num_attributes", "anchors_per_location", "fpn_channels",
                     "head_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.prior_pi < 1.0:
            raise ConfigError("prior_pi must lie in (0, 1)")
        if not 3 <= self.num_levels <= 5:
            raise ConfigError("num_levels must be 3, 4 or 5")

    def to_text(self) -> str:
        """Canonical ``key=value`` record, one line per field, sorted by key."""
        return "".join(f"{k}={v!r}\n" for k, v in sorted(asdict(self).items()))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.strip().splitlines():
            k, v = line.split("=", 1)
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            kw[k] = ast.literal_eval(v)
        return cls(**kw)

    @property
    def strides(self) -> tuple:
        return (8, 16, 32, 64, 128)[: self.num_levels]


def _conv3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class BasicBlock(nn.Module):
    """Two 3x3 convs with a projection shortcut; no normalization layers."""

    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = _conv3(cin, cout, stride)
        self.conv2 = _conv3(cout, cout)
        self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride)

    def forward(self, x):
        y = self.conv2(F.relu(self.conv1(x)))
        return F.relu(y + self.shortcut(x))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, width, stride):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = nn.Conv2d(cin, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                                      nn.BatchNorm2d(cout))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = F.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        return F.relu(y + (x if self.down is None else self.down(x)))


class TinyResNet(nn.Module):
    """Stride-4 stem then three single-block residual stages (strides 8/16/32)."""

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(_conv3(3, 16, 2), nn.ReLU(), _conv3(16, 16, 2), nn.ReLU())
        chans = (16,) + TINY_CHANNELS
        self.stages = nn.ModuleList(BasicBlock(chans[i], chans[i + 1], 2) for i in range(3))
        self.out_channels = TINY_CHANNELS
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(m.bias)
        # keep the residual sum's variance near the shortcut's at init
        for blk in self.stages:
            blk.conv2.weight.data.mul_(0.5)

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class BottleneckResNet(nn.Module):
    def __init__(self, depths):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False), nn.BatchNorm2d(64), nn.ReLU(),
            nn.MaxPool2d(3, stride=2, padding=1))
        layers, cin = [], 64
        for i, (n, width) in enumerate(zip(depths, (64, 128, 256, 512))):
            blocks = []
            for b in range(n):
                blocks.append(Bottleneck(cin, width, 2 if (b == 0 and i > 0) else 1))
                cin = width * Bottleneck.expansion
            layers.append(nn.Sequential(*blocks))
        self.layers = nn.ModuleList(layers)
        self.out_channels = (512, 1024, 2048)

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i > 0:
                feats.append(x)
        return feats


class FeaturePyramid(nn.Module):
    """Top-down pyramid over C3..C5 with optional P6/P7 from strided convs."""

    def __init__(self, in_channels, channels, num_levels):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in in_channels)
        self.output = nn.ModuleList(_conv3(channels, channels) for _ in in_channels)
        self.p6 = _conv3(in_channels[-1], channels, 2) if num_levels >= 4 else None
        self.p7 = _conv3(channels, channels, 2) if num_levels >= 5 else None
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, a=1)
                nn.init.zeros_(m.bias)

    def forward(self, feats):
        c5 = feats[-1]
        lat = [conv(f) for conv, f in zip(self.lateral, feats)]
        merged = [lat[-1]]
        for f in reversed(lat[:-1]):
            up = F.interpolate(merged[0], size=f.shape[-2:], mode="nearest")
            merged.insert(0, f + up)
        outs = [conv(m) for conv, m in zip(self.output, merged)]
        if self.p6 is not None:
            outs.append(self.p6(c5))
        if self.p7 is not None:
            outs.append(self.p7(F.relu(outs[-1])))
        return outs


class Subnet(nn.Module):
    """``depth`` x (3x3 conv + ReLU) followed by a 3x3 conv to ``out_channels``."""

    def __init__(self, channels, out_channels, depth, final_bias=0.0):
        super().__init__()
        layers = []
        for _ in range(depth):
            layers += [_conv3(channels, channels), nn.ReLU()]
        self.tower = nn.Sequential(*layers)
        self.final = _conv3(channels, out_channels)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01)
                nn.init.zeros_(m.bias)
        nn.init.constant_(self.final.bias, final_bias)

    def forward(self, x):
        return self.final(self.tower(x))


@dataclass
class HeadOutputs:
    """Per-level ``(B, H_l, W_l, C)`` maps: class/attr logits and box offsets."""
    cls: list
    box: list
    attr: list
    num_anchors: int

    def flatten(self):
        """``(B, N, K)``, ``(B, N, 4)``, ``(B, N, Z)`` rows in anchor order."""
        def cat(maps, width):
            return torch.cat([m.reshape(m.shape[0], -1, width) for m in maps], dim=1)
        a = self.num_anchors
        return (cat(self.cls, self.cls[0].shape[-1] // a),
                cat(self.box, 4),
                cat(self.attr, self.attr[0].shape[-1] // a))


class DaDNet(nn.Module):
    MEAN = 0.5
    STD = 0.25

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        if config.backbone == "tiny-resnet":
            self.backbone = TinyResNet()
        else:
            self.backbone = BottleneckResNet(_BOTTLENECK_DEPTHS[config.backbone])
        c, a = config.fpn_channels, config.anchors_per_location
        self.fpn = FeaturePyramid(self.backbone.out_channels, c, config.num_levels)
        prior = -math.log((1.0 - config.prior_pi) / config.prior_pi)
        self.class_head = Subnet(c, config.num_classes * a, config.head_depth, final_bias=prior)
        self.box_head = Subnet(c, 4 * a, config.head_depth)
        self.attr_head = Subnet(c, config.num_attributes * a, config.head_depth)

    def forward(self, x: torch.Tensor) -> HeadOutputs:
        """``x`` is a ``(B, 3, H, W)`` float batch with values in [0, 1]."""
        feats = self.fpn(self.backbone((x - self.MEAN) / self.STD))
        nhwc = lambda t: t.permute(0, 2, 3, 1)  # noqa: E731
        return HeadOutputs(
            cls=[nhwc(self.class_head(p)) for p in feats],
            box=[nhwc(self.box_head(p)) for p in feats],
            attr=[nhwc(self.attr_head(p)) for p in feats],
            num_anchors=self.config.anchors_per_location,
        )


def build_model(config: ModelConfig, seed: int | None = None) -> DaDNet:
    if seed is not None:
        torch.manual_seed(seed)
    return DaDNet(config)


def image_to_tensor(image) -> torch.Tensor:
    """``(H, W, 3)`` uint8 or float image -> ``(1, 3, H, W)`` float in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32)
        if not np.isfinite(arr).all():
            raise InputError("image contains non-finite values")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def forward(model: DaDNet, image) -> HeadOutputs:
    """Evaluation-mode forward pass of one ``(H, W, 3)`` image."""
    x = image_to_tensor(image)
    model.eval()
    with torch.no_grad():
        return model(x.to(next(model.parameters()).dtype))


def save_checkpoint(path, model: DaDNet, meta: dict | None = None):
    """Write a zip archive holding the config record, a JSON meta record and
    one ``.npy`` member per state-dict entry."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("config.txt", model.config.to_text())
        zf.writestr("meta.json", json.dumps(meta or {}, sort_keys=True, indent=1))
        for name, tensor in model.state_dict().items():
            buf = io.BytesIO()
            np.save(buf, tensor.detach().cpu().numpy(), allow_pickle=False)
            zf.writestr(f"params/{name}.npy", buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    """Return ``(model, meta)``; refuses weights whose config differs from
    ``expected_config`` when one is given."""
    with zipfile.ZipFile(path) as zf:
        config = ModelConfig.from_text(zf.read("config.txt").decode())
        if expected_config is not None and config != expected_config:
            raise ConfigError(f"checkpoint config {config} != expected {expected_config}")
        meta = json.loads(zf.read("meta.json"))
        state = {}
        for member in zf.namelist():
            if member.startswith("params/"):
                state[member[len("params/"):-len(".npy")]] = torch.from_numpy(
                    np.load(io.BytesIO(zf.read(member)), allow_pickle=False))
    model = DaDNet(config)
    model.load_state_dict(state)
    model.eval()
    return model, meta
