"""Anatomical clean-up of predicted masks.

The lung mask comes from binarizing the slice at a HU threshold (tissue = 1,
air/lung = 0) and flood-filling the 0-region found nearest the image centre.
Predictions are ANDed with that mask, then rows above the topmost and below
the bottommost lung row are cleared.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data_io import HU_MAX, HU_MIN, ShapeMismatch

log = logging.getLogger(__name__)

HU_THRESHOLD = -160


class NoLungCandidate(ValueError):
    pass


class SeedInvalid(ValueError):
    pass


@dataclass(frozen=True)
class PostprocessConfig:
    hu_threshold: float = HU_THRESHOLD
    connectivity: int = 4
    seed_search: str = "spiral_from_center"
    max_regions: int = 2
    min_second_fraction: float = 0.1

    def __post_init__(self):
        if not HU_MIN <= self.hu_threshold <= HU_MAX:
            raise ValueError(f"hu_threshold {self.hu_threshold} outside [{HU_MIN}, {HU_MAX}]")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if self.seed_search != "spiral_from_center":
            raise ValueError(f"unknown seed_search {self.seed_search!r}")
        if self.max_regions not in (1, 2):
            raise ValueError("max_regions must be 1 or 2")
        if not 0 <= self.min_second_fraction <= 1:
            raise ValueError("min_second_fraction must lie in [0, 1]")


def binarize_hu(values, threshold: float = HU_THRESHOLD) -> np.ndarray:
    return (np.asarray(values) >= threshold).astype(np.uint8)


def spiral_order(h: int, w: int):
    """Yield in-bounds (row, col) on a square spiral from (h//2, w//2).

    Legs go right, down, left, up with lengths 1, 1, 2, 2, 3, 3, ...
    """
    r, c = h // 2, w // 2
    yield r, c
    seen, total = 1, h * w
    dirs = ((0, 1), (1, 0), (0, -1), (-1, 0))
    leg, d = 1, 0
    while seen < total:
        for _ in range(2):
            dr, dc = dirs[d % 4]
            for _ in range(leg):
                r += dr
                c += dc
                if 0 <= r < h and 0 <= c < w:
                    seen += 1
                    yield r, c
            d += 1
        leg += 1


def find_seed(binary, exclude=None) -> tuple[int, int]:
    """First 0-valued pixel on the centre spiral (skipping ``exclude`` pixels)."""
    b = np.asarray(binary)
    blocked = b != 0
    if exclude is not None:
        blocked = blocked | np.asarray(exclude, dtype=bool)
    if blocked.all():
        raise NoLungCandidate("no 0-valued pixel to seed region growing")
    for r, c in spiral_order(*b.shape):
        if not blocked[r, c]:
            return r, c
    raise NoLungCandidate("no 0-valued pixel to seed region growing")  # unreachable


def _structure(connectivity: int):
    return ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)


def region_grow(binary, seed, connectivity: int = 4) -> np.ndarray:
    """Connected component of 0-pixels containing ``seed``, as a {0,1} mask."""
    b = np.asarray(binary)
    r, c = seed
    if b[r, c] != 0:
        raise SeedInvalid(f"seed {seed} lies on a 1-valued pixel")
    labels, _ = ndimage.label(b == 0, structure=_structure(connectivity))
    return (labels == labels[r, c]).astype(np.uint8)


def lung_mask_filter(pred, lung) -> np.ndarray:
    p, l = np.asarray(pred), np.asarray(lung)
    if p.shape != l.shape:
        raise ShapeMismatch(f"pred {p.shape} vs lung {l.shape}")
    return ((p != 0) & (l != 0)).astype(np.uint8)


def boundary_lines_filter(pred, lung) -> np.ndarray:
    p, l = np.asarray(pred), np.asarray(lung)
    if p.shape != l.shape:
        raise ShapeMismatch(f"pred {p.shape} vs lung {l.shape}")
    rows = np.flatnonzero(l.any(axis=1))
    out = np.zeros(p.shape, dtype=np.uint8)
    if rows.size:
        top, bot = rows[0], rows[-1]
        out[top:bot + 1] = p[top:bot + 1] != 0
    return out


def _touches_border(mask) -> bool:
    return bool(mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any())


def lung_mask(slice_hu, config: PostprocessConfig = PostprocessConfig()) -> np.ndarray:
    """Lung field(s) grown from up to ``max_regions`` spiral seeds.

    The second search continues along the spiral past regions that touch the
    image border (air outside the body) or are smaller than
    ``min_second_fraction`` of the first region (noise or pockets cut off by
    vessels). Enclosed holes (vessels, lesions)
    are filled so structures inside the lung belong to it.
    """
    binary = binarize_hu(slice_hu, config.hu_threshold)
    lung = region_grow(binary, find_seed(binary), config.connectivity)
    if config.max_regions > 1:
        seen = lung.astype(bool)
        while True:
            try:
                seed = find_seed(binary, exclude=seen)
            except NoLungCandidate:
                break
            region = region_grow(binary, seed, config.connectivity)
            if not _touches_border(region) and region.sum() >= config.min_second_fraction * lung.sum():
                lung = lung | region
                break
            seen |= region.astype(bool)
    return ndimage.binary_fill_holes(lung).astype(np.uint8)


def postprocess_prediction(pred, slice_hu, config: PostprocessConfig = PostprocessConfig(),
                           warnings: list | None = None) -> np.ndarray:
    """Lung-mask filter then boundary-line filter; output is a subset of ``pred``.

    If the slice has no lung candidate the prediction is returned unchanged and
    a warning record is appended to ``warnings`` (when given).
    """
    p, s = np.asarray(pred), np.asarray(slice_hu)
    if p.shape != s.shape:
        raise ShapeMismatch(f"pred {p.shape} vs slice {s.shape}")
    try:
        lung = lung_mask(s, config)
    except NoLungCandidate:
        log.warning("no lung candidate; prediction left unchanged")
        if warnings is not None:
            warnings.append({"warning": "NoLungCandidate"})
        return (p != 0).astype(np.uint8)
    return boundary_lines_filter(lung_mask_filter(p, lung), lung)
