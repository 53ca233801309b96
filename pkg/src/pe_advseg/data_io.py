"""Dataset layout, slice/mask encoding, HU windowing and patient-level splits.

On-disk layout::

    <root>/<patient_id>/slices/0000.png   16-bit grayscale, stored = HU + 1024
    <root>/<patient_id>/masks/0000.png    8-bit, {0, 255}; any nonzero reads as 1

Indices start at 0 and must be contiguous.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

HU_MIN = -1024
HU_MAX = 3071
HU_OFFSET = 1024
DEFAULT_WINDOW = (-1000.0, 400.0)

_INDEX_RE = re.compile(r"^(\d{4,})\.png$")


class DataError(Exception):
    """Base class for dataset problems (mapped to CLI exit code 3)."""


class MissingSlices(DataError):
    pass


class ShapeMismatch(DataError, ValueError):
    pass


class CorruptImage(DataError):
    pass


class IoFailure(DataError):
    pass


class InvalidWindow(ValueError):
    pass


class CountMismatch(ValueError):
    pass


def check_hu_slice(values: np.ndarray) -> None:
    if values.ndim != 2:
        raise ShapeMismatch(f"HU slice must be 2D, got shape {values.shape}")
    if values.shape[0] < 8 or values.shape[1] < 8:
        raise ShapeMismatch(f"HU slice must be at least 8x8, got {values.shape}")
    if values.size and (values.min() < HU_MIN or values.max() > HU_MAX):
        raise ValueError(f"HU values outside [{HU_MIN}, {HU_MAX}]")


@dataclass
class PatientVolume:
    patient_id: str
    slices: list[np.ndarray]
    masks: list[np.ndarray] | None = None

    def __post_init__(self):
        self.slices = [np.asarray(s, dtype=np.int16) for s in self.slices]
        if self.masks is not None:
            self.masks = [np.asarray(m, dtype=np.uint8) for m in self.masks]
            if len(self.masks) != len(self.slices):
                raise ShapeMismatch(
                    f"{self.patient_id}: {len(self.masks)} masks for {len(self.slices)} slices"
                )
            for i, (s, m) in enumerate(zip(self.slices, self.masks)):
                if s.shape != m.shape:
                    raise ShapeMismatch(f"{self.patient_id}[{i}]: mask {m.shape} vs slice {s.shape}")

    @property
    def labeled(self) -> bool:
        return self.masks is not None

    def __len__(self):
        return len(self.slices)


@dataclass
class DatasetSplit:
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)


def hu_to_stored(hu: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(hu, dtype=np.int32) + HU_OFFSET, 0, HU_MAX + HU_OFFSET).astype(np.uint16)


def stored_to_hu(stored: np.ndarray) -> np.ndarray:
    return (np.asarray(stored, dtype=np.int32) - HU_OFFSET).astype(np.int16)


def _indexed_pngs(directory: Path) -> list[Path]:
    found = {}
    for p in directory.iterdir():
        m = _INDEX_RE.match(p.name)
        if m:
            found[int(m.group(1))] = p
    if not found:
        return []
    expected = list(range(len(found)))
    if sorted(found) != expected:
        missing = sorted(set(range(max(found) + 1)) - set(found))
        raise MissingSlices(f"{directory}: gap in slice indices, missing {missing[:5]}")
    return [found[i] for i in expected]


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im)
    except Exception as exc:  # PIL raises a zoo of exception types
        raise CorruptImage(f"{path}: {exc}") from exc
    if arr.ndim != 2:
        raise CorruptImage(f"{path}: expected single-channel image, got shape {arr.shape}")
    return arr


def read_slice(path) -> np.ndarray:
    arr = _read_png(Path(path))
    if arr.dtype != np.uint16 and arr.dtype != np.int32:
        raise CorruptImage(f"{path}: expected 16-bit grayscale, got {arr.dtype}")
    return stored_to_hu(arr)


def read_mask(path) -> np.ndarray:
    return (_read_png(Path(path)) > 0).astype(np.uint8)


def write_slice(path, hu: np.ndarray) -> None:
    Image.fromarray(hu_to_stored(hu)).save(path, format="PNG")


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path, format="PNG")


def read_mask_dir(directory) -> list[np.ndarray]:
    """All masks of one patient's ``masks/`` directory, in index order."""
    d = Path(directory)
    if not d.is_dir():
        raise MissingSlices(f"{d}: no such mask directory")
    return [read_mask(p) for p in _indexed_pngs(d)]


def load_volume(directory_path) -> PatientVolume:
    root = Path(directory_path)
    slice_dir = root / "slices"
    if not slice_dir.is_dir():
        raise MissingSlices(f"{root}: no slices/ directory")
    slice_paths = _indexed_pngs(slice_dir)
    if not slice_paths:
        raise MissingSlices(f"{slice_dir}: no slice files")
    slices = [read_slice(p) for p in slice_paths]

    masks = None
    mask_dir = root / "masks"
    if mask_dir.is_dir():
        mask_paths = _indexed_pngs(mask_dir)
        if len(mask_paths) != len(slice_paths):
            raise MissingSlices(f"{mask_dir}: {len(mask_paths)} masks for {len(slice_paths)} slices")
        masks = [read_mask(p) for p in mask_paths]
    return PatientVolume(root.name, slices, masks)


def save_volume(volume: PatientVolume, directory_path) -> None:
    root = Path(directory_path)
    for s in volume.slices:
        if s.min() < HU_MIN or s.max() > HU_MAX:
            raise ValueError(f"{volume.patient_id}: HU values outside [{HU_MIN}, {HU_MAX}]")
    try:
        (root / "slices").mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(volume.slices):
            write_slice(root / "slices" / f"{i:04d}.png", s)
        if volume.masks is not None:
            (root / "masks").mkdir(exist_ok=True)
            for i, m in enumerate(volume.masks):
                write_mask(root / "masks" / f"{i:04d}.png", m)
    except OSError as exc:
        raise IoFailure(f"cannot write {root}: {exc}") from exc


def list_patients(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    return sorted(p.name for p in root.iterdir() if (p / "slices").is_dir())


def load_dataset(root) -> list[PatientVolume]:
    """Load every patient under ``root`` in sorted id order."""
    ids = list_patients(root)
    if not ids:
        raise DataError(f"{root}: no patients found")
    return [load_volume(os.path.join(root, pid)) for pid in ids]


def window_normalize(values: np.ndarray, lo: float = DEFAULT_WINDOW[0],
                     hi: float = DEFAULT_WINDOW[1]) -> np.ndarray:
    if not lo < hi:
        raise InvalidWindow(f"window lo={lo} must be below hi={hi}")
    v = (np.asarray(values, dtype=np.float32) - np.float32(lo)) / np.float32(hi - lo)
    return np.clip(v, 0.0, 1.0)


def split_patients(patient_ids, counts, seed: int) -> DatasetSplit:
    n_train, n_val, n_test = counts
    ids = list(patient_ids)
    if min(counts) < 0 or n_train + n_val + n_test != len(ids):
        raise CountMismatch(f"counts {tuple(counts)} do not sum to {len(ids)} patients")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patient ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
    )
