"""Fully convolutional discriminator over encoder features plus a weighted mask."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data_io import ShapeMismatch

MASK_WEIGHT = 5.0


class ShapeTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_conv_layers: int = 5
    channel_widths: tuple[int, ...] = (64, 128, 256, 512, 1)
    kernel_size: int = 4
    stride: int = 2
    leaky_slope: float = 0.2
    mask_weight: float = MASK_WEIGHT

    def __post_init__(self):
        if len(self.channel_widths) != self.n_conv_layers:
            raise ValueError(f"{self.n_conv_layers} layers but {len(self.channel_widths)} widths")
        if self.channel_widths[-1] != 1:
            raise ValueError("last channel width must be 1")
        if self.mask_weight <= 0:
            raise ValueError("mask_weight must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_widths"] = list(self.channel_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DiscriminatorConfig:
        kw = dict(d)
        if "channel_widths" in kw:
            kw["channel_widths"] = tuple(kw["channel_widths"])
        return cls(**kw)


def build_discriminator_input(mask: torch.Tensor, encoder_features: torch.Tensor,
                              mask_weight: float = MASK_WEIGHT) -> torch.Tensor:
    """Resize features to the mask grid and append ``mask_weight * mask``.

    mask (N, 1, H, W) or (H, W); features (N, C, H/2, W/2) or (C, H/2, W/2).
    """
    batched = encoder_features.dim() == 4
    f = encoder_features if batched else encoder_features.unsqueeze(0)
    m = mask
    while m.dim() < 4:
        m = m.unsqueeze(0)
    h, w = m.shape[-2:]
    if f.shape[-2] * 2 != h or f.shape[-1] * 2 != w:
        raise ShapeMismatch(f"features {tuple(f.shape[-2:])} are not half of mask {(h, w)}")
    f = F.interpolate(f, size=(h, w), mode="bilinear", align_corners=False)
    out = torch.cat([f, mask_weight * m.to(f.dtype)], dim=1)
    return out if batched else out.squeeze(0)


class Discriminator(nn.Module):
    def __init__(self, in_channels: int, config: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.config = config
        pad = (config.kernel_size - 1) // 2
        widths = (in_channels,) + tuple(config.channel_widths)
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], config.kernel_size, config.stride, pad)
            for i in range(config.n_conv_layers)
        )

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        for i, conv in enumerate(self.convs):
            if min(x.shape[-2:]) < cfg.kernel_size - 2 * conv.padding[0]:
                raise ShapeTooSmall(f"input too small for {cfg.n_conv_layers} strided layers")
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.leaky_relu(x, cfg.leaky_slope)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Confidence map in (0, 1) at the input's spatial size, shape (N, 1, H, W)."""
        conf = torch.sigmoid(self.logits(x))
        return F.interpolate(conf, size=x.shape[-2:], mode="bilinear", align_corners=False)


def discriminator_forward(x: torch.Tensor, model: Discriminator) -> torch.Tensor:
    if x.dim() == 3:
        return model(x.unsqueeze(0)).squeeze(0)
    return model(x)
