"""Three-stage high-resolution segmentation network with a CARAFE decoder.

Compared with the usual four-stage high-resolution backbone:

* the stem has a single stride-2 convolution, so the top branch runs at 1/2
  input resolution instead of 1/4;
* there is no fourth stage, so the coarsest branch is 1/8 resolution;
* every decoder upsampling is a learned CARAFE operator.

Branch resolutions are therefore (1/2, 1/4, 1/8). The decoder lifts branches 2
and 3 to 1/2 resolution, concatenates all three, and fuses them with a 1x1
convolution into ``encoder_features`` (also fed to the discriminator). A final
x2 CARAFE and a 1x1 convolution produce one logit channel at input resolution.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import torch
import torch.nn as nn

from .carafe import CARAFE, CarafeConfig


class InvalidShape(ValueError):
    pass


@dataclass(frozen=True)
class SegNetConfig:
    input_size: int = 400
    stem_channels: int = 64
    branch_widths: tuple[int, int, int] = (18, 36, 72)
    blocks_per_module: int = 4
    modules_per_stage: tuple[int, int, int] = (1, 1, 4)
    fused_channels: int = 64
    carafe: CarafeConfig = field(default_factory=CarafeConfig)

    def __post_init__(self):
        if self.input_size % 8:
            raise InvalidShape(f"input_size {self.input_size} must be divisible by 8")
        if len(self.branch_widths) != 3 or len(self.modules_per_stage) != 3:
            raise ValueError("exactly three branch widths and three stage module counts are required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branch_widths"] = list(self.branch_widths)
        d["modules_per_stage"] = list(self.modules_per_stage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SegNetConfig:
        kw = dict(d)
        if isinstance(kw.get("carafe"), dict):
            kw["carafe"] = CarafeConfig(**kw["carafe"])
        for key in ("branch_widths", "modules_per_stage"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def desk_config(input_size: int = 128) -> SegNetConfig:
    """Narrow variant used for CPU-scale experiments and tests."""
    return SegNetConfig(input_size=input_size, stem_channels=16, branch_widths=(8, 16, 32),
                        blocks_per_module=1, modules_per_stage=(1, 1, 1), fused_channels=16,
                        carafe=CarafeConfig(c_mid=8, k_up=5, k_enc=3))


class SegNetOutput(NamedTuple):
    logits: torch.Tensor            # N, 1, H, W
    encoder_features: torch.Tensor  # N, fused_channels, H/2, W/2


def conv_bn(cin, cout, k=3, stride=1, relu=True):
    layers = [nn.Conv2d(cin, cout, k, stride, k // 2, bias=False), nn.BatchNorm2d(cout)]
    if relu:
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = conv_bn(cin, cout)
        self.conv2 = conv_bn(cout, cout, relu=False)
        self.shortcut = conv_bn(cin, cout, 1, relu=False) if cin != cout else nn.Identity()

    def forward(self, x):
        return torch.relu(self.conv2(self.conv1(x)) + self.shortcut(x))


class HRModule(nn.Module):
    """Parallel residual branches followed by all-to-all multi-scale fusion."""

    def __init__(self, widths, n_blocks):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(*[BasicBlock(w, w) for _ in range(n_blocks)]) for w in widths
        )
        self.fuse = nn.ModuleList()
        for i, wi in enumerate(widths):
            row = nn.ModuleList()
            for j, wj in enumerate(widths):
                if j == i:
                    row.append(nn.Identity())
                elif j > i:  # coarser -> finer: 1x1 then upsample
                    row.append(nn.Sequential(
                        nn.Conv2d(wj, wi, 1, bias=False), nn.BatchNorm2d(wi),
                        nn.Upsample(scale_factor=2 ** (j - i), mode="nearest"),
                    ))
                else:  # finer -> coarser: chain of stride-2 3x3 convs
                    steps = [conv_bn(wj, wj, stride=2) for _ in range(i - j - 1)]
                    steps.append(conv_bn(wj, wi, stride=2, relu=False))
                    row.append(nn.Sequential(*steps))
            self.fuse.append(row)

    def forward(self, xs):
        xs = [b(x) for b, x in zip(self.branches, xs)]
        out = []
        for i, row in enumerate(self.fuse):
            y = xs[i]
            for j, f in enumerate(row):
                if j != i:
                    y = y + f(xs[j])
            out.append(torch.relu(y))
        return out


class SegNet(nn.Module):
    def __init__(self, config: SegNetConfig = SegNetConfig()):
        super().__init__()
        self.config = cfg = config
        w1, w2, w3 = cfg.branch_widths
        m1, m2, m3 = cfg.modules_per_stage
        nb = cfg.blocks_per_module

        self.stem = conv_bn(1, cfg.stem_channels, stride=2)
        self.stage1 = nn.Sequential(*[
            BasicBlock(cfg.stem_channels, cfg.stem_channels) for _ in range(nb * m1)
        ])
        self.transition1 = nn.ModuleList([
            conv_bn(cfg.stem_channels, w1),
            conv_bn(cfg.stem_channels, w2, stride=2),
        ])
        self.stage2 = nn.ModuleList(HRModule((w1, w2), nb) for _ in range(m2))
        self.transition2 = conv_bn(w2, w3, stride=2)
        self.stage3 = nn.ModuleList(HRModule((w1, w2, w3), nb) for _ in range(m3))

        self.up2 = CARAFE(w2, replace(cfg.carafe, sigma=2))
        self.up3 = CARAFE(w3, replace(cfg.carafe, sigma=4))
        self.fuse = conv_bn(w1 + w2 + w3, cfg.fused_channels, 1)
        self.up_out = CARAFE(cfg.fused_channels, replace(cfg.carafe, sigma=2))
        self.head = nn.Conv2d(cfg.fused_channels, 1, 1)

    def stem_forward(self, image: torch.Tensor) -> torch.Tensor:
        _check_shape(image)
        return self.stem(image)

    def forward(self, image: torch.Tensor) -> SegNetOutput:
        _check_shape(image)
        x = self.stage1(self.stem(image))
        xs = [t(x) for t in self.transition1]
        for m in self.stage2:
            xs = m(xs)
        xs = xs + [self.transition2(xs[1])]
        for m in self.stage3:
            xs = m(xs)
        feats = self.fuse(torch.cat([xs[0], self.up2(xs[1]), self.up3(xs[2])], dim=1))
        logits = self.head(self.up_out(feats))
        return SegNetOutput(logits, feats)


def _check_shape(image: torch.Tensor) -> None:
    if image.dim() != 4 or image.shape[1] != 1:
        raise InvalidShape(f"expected (N, 1, H, W) input, got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h % 8 or w % 8:
        raise InvalidShape(f"input {h}x{w} is not divisible by 8")


def segnet_forward(image: torch.Tensor, model: SegNet) -> SegNetOutput:
    """Accepts (H, W), (1, H, W) or (N, 1, H, W) normalised images."""
    while image.dim() < 4:
        image = image.unsqueeze(0)
    return model(image)


def predict_mask(output, threshold: float = 0.5) -> torch.Tensor:
    """Binary mask (uint8) where sigmoid(logit) >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    logits = output.logits if isinstance(output, SegNetOutput) else output
    return (torch.sigmoid(logits) >= threshold).to(torch.uint8)


def count_parameters(config_or_model) -> int:
    model = config_or_model if isinstance(config_or_model, nn.Module) else SegNet(config_or_model)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def four_stage_parameter_count(config: SegNetConfig, width4: int | None = None, m4: int = 3) -> int:
    """Parameter count of the same network with a fourth (1/16) stage appended.

    Used only to compare against the three-stage design; the fourth branch
    is never part of the forward path.
    """
    w1, w2, w3 = config.branch_widths
    w4 = width4 or 2 * w3
    extra = nn.ModuleList([conv_bn(w3, w4, stride=2)])
    extra.extend(HRModule((w1, w2, w3, w4), config.blocks_per_module) for _ in range(m4))
    extra.append(CARAFE(w4, replace(config.carafe, sigma=8)))
    base = count_parameters(config)
    # the fused 1x1 conv widens by w4 input channels
    widen = w4 * config.fused_channels
    return base + sum(p.numel() for p in extra.parameters()) + widen


def record_shapes(model: nn.Module, image: torch.Tensor) -> list[tuple[str, tuple[int, ...]]]:
    """Run a forward pass and return every leaf/container output shape."""
    shapes = []

    def hook(name):
        def fn(_mod, _inp, out):
            for t in out if isinstance(out, (list, tuple)) else [out]:
                if isinstance(t, torch.Tensor) and t.dim() == 4:
                    shapes.append((name, tuple(t.shape)))
        return fn

    handles = [m.register_forward_hook(hook(n)) for n, m in model.named_modules() if n]
    try:
        with torch.no_grad():
            model(image)
    finally:
        for h in handles:
            h.remove()
    return shapes
