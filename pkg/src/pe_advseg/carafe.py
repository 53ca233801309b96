"""Content-aware reassembly upsampling (CARAFE).

A light kernel-prediction branch emits one ``k_up x k_up`` reassembly kernel per
output pixel; the output is the kernel-weighted sum over the zero-padded
``k_up x k_up`` neighbourhood of the source pixel ``floor(l' / sigma)``.

Border handling: the softmax is taken over in-bounds taps only, so every output
is a convex combination of real feature values (constants are preserved
everywhere, not just in the interior).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class CarafeConfig:
    sigma: int = 2
    k_up: int = 5
    k_enc: int = 3
    c_mid: int = 64

    def __post_init__(self):
        if self.sigma < 2:
            raise ValueError(f"sigma must be >= 2, got {self.sigma}")
        if self.k_up < 3 or self.k_up % 2 == 0:
            raise ValueError(f"k_up must be odd and >= 3, got {self.k_up}")
        if self.k_enc < 1 or self.k_enc % 2 == 0:
            raise ValueError(f"k_enc must be odd and >= 1, got {self.k_enc}")
        if self.c_mid < 1:
            raise ValueError(f"c_mid must be >= 1, got {self.c_mid}")


def _valid_taps(h: int, w: int, k: int, like: torch.Tensor) -> torch.Tensor:
    """(k*k, h, w) bool: tap n of source pixel (i, j) lies inside the image."""
    ones = torch.ones(1, 1, h, w, dtype=like.dtype, device=like.device)
    taps = F.unfold(ones, k, padding=k // 2)  # zero padding marks out-of-bounds taps
    return taps.view(k * k, h, w) > 0.5


def normalize_kernels(logits: torch.Tensor, k_up: int, sigma: int) -> torch.Tensor:
    """Softmax over the in-bounds taps of each output pixel.

    ``logits`` is (N, k_up**2, sigma*H, sigma*W); returns the same shape with
    out-of-bounds taps set to exactly zero.
    """
    n, kk, sh, sw = logits.shape
    valid = _valid_taps(sh // sigma, sw // sigma, k_up, logits)
    valid = valid.repeat_interleave(sigma, 1).repeat_interleave(sigma, 2)
    masked = logits.masked_fill(~valid.unsqueeze(0), float("-inf"))
    return torch.softmax(masked, dim=1)


def reassemble(features: torch.Tensor, kernels: torch.Tensor, k_up: int, sigma: int) -> torch.Tensor:
    """Vectorised reassembly step.

    features (N, C, H, W), kernels (N, k_up**2, sigma*H, sigma*W) -> (N, C, sigma*H, sigma*W).
    """
    n, c, h, w = features.shape
    kk = k_up * k_up
    # (N, k^2 * s^2, H, W) with channel index = tap * s^2 + sub-pixel offset
    k = F.pixel_unshuffle(kernels, sigma).view(n, kk, sigma * sigma, h * w)
    k = k.permute(0, 3, 1, 2)  # N, HW, k^2, s^2
    patches = F.unfold(features, k_up, padding=k_up // 2).view(n, c, kk, h * w)
    patches = patches.permute(0, 3, 1, 2)  # N, HW, C, k^2
    out = torch.matmul(patches, k)  # N, HW, C, s^2
    out = out.permute(0, 2, 3, 1).reshape(n, c * sigma * sigma, h, w)
    return F.pixel_shuffle(out, sigma)


def carafe_reference(features, kernels, k_up: int, sigma: int) -> np.ndarray:
    """Nested-loop reassembly for a single image; test oracle for :func:`reassemble`.

    features (C, H, W) and kernels (k_up**2, sigma*H, sigma*W), both array-like.
    """
    f = np.asarray(features, dtype=np.float64)
    kern = np.asarray(kernels, dtype=np.float64)
    c, h, w = f.shape
    r = k_up // 2
    out = np.zeros((c, sigma * h, sigma * w))
    for oy in range(sigma * h):
        for ox in range(sigma * w):
            sy, sx = oy // sigma, ox // sigma
            acc = np.zeros(c)
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    y, x = sy + dy, sx + dx
                    if 0 <= y < h and 0 <= x < w:
                        acc += kern[(dy + r) * k_up + (dx + r), oy, ox] * f[:, y, x]
            out[:, oy, ox] = acc
    return out


class CARAFE(nn.Module):
    """Upsample by ``config.sigma`` with content-predicted kernels; channels unchanged."""

    def __init__(self, channels: int, config: CarafeConfig = CarafeConfig()):
        super().__init__()
        self.config = config
        self.compress = nn.Conv2d(channels, config.c_mid, 1)
        self.encoder = nn.Conv2d(config.c_mid, config.sigma ** 2 * config.k_up ** 2,
                                 config.k_enc, padding=config.k_enc // 2)
        # small weights -> near-uniform initial kernels
        for conv in (self.compress, self.encoder):
            bound = 1e-2 if conv is self.encoder else 1.0 / np.sqrt(conv.in_channels)
            nn.init.uniform_(conv.weight, -bound, bound)
            nn.init.zeros_(conv.bias)

    def predict_kernels(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        logits = F.pixel_shuffle(self.encoder(self.compress(x)), cfg.sigma)
        return normalize_kernels(logits, cfg.k_up, cfg.sigma)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if x.shape[-2] < cfg.k_up or x.shape[-1] < cfg.k_up:
            raise ShapeTooSmall(f"CARAFE input {tuple(x.shape[-2:])} smaller than k_up={cfg.k_up}")
        return reassemble(x, self.predict_kernels(x), cfg.k_up, cfg.sigma)


def carafe_forward(features: torch.Tensor, module: CARAFE) -> torch.Tensor:
    """Functional wrapper; accepts (C, H, W) or (N, C, H, W)."""
    if features.dim() == 3:
        return module(features.unsqueeze(0)).squeeze(0)
    return module(features)
