"""Synthetic CTPA-like phantoms with lesion masks and an intensity domain shift.

Each slice is a tissue-HU body ellipse on an air background holding two low-HU
lung ellipses. Bright vessel curves branch through the lungs and lesions are
small dark blobs centred on vessels (filling defects), always fully inside a
lung. Geometry of the lungs is shared by all slices of a patient.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import ndimage

from .data_io import HU_MAX, HU_MIN, PatientVolume

AIR_HU = -1000


class InfeasibleSpec(ValueError):
    pass


@dataclass(frozen=True)
class DomainShift:
    hu_offset: float = 0.0
    contrast_scale: float = 1.0
    extra_noise_sigma: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self.hu_offset == 0 and self.contrast_scale == 1 and self.extra_noise_sigma == 0


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 128
    n_slices_per_patient: int = 8
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_radius_range: tuple[float, float] = (2.0, 5.0)
    lung_hu_mean: float = -850.0
    tissue_hu_mean: float = 40.0
    vessel_hu_mean: float = 300.0
    lesion_hu_mean: float = -50.0
    noise_sigma: float = 20.0
    domain_shift: DomainShift = field(default_factory=DomainShift)

    def validate(self) -> None:
        r_lo, r_hi = self.lesion_radius_range
        c_lo, c_hi = self.lesion_count_range
        if self.image_size < 32 or self.image_size % 8:
            raise InfeasibleSpec(f"image_size {self.image_size} must be a multiple of 8 and >= 32")
        if self.n_slices_per_patient < 1:
            raise InfeasibleSpec("n_slices_per_patient must be >= 1")
        if not 1 <= r_lo <= r_hi <= self.image_size / 8:
            raise InfeasibleSpec(
                f"lesion radii {self.lesion_radius_range} must satisfy 1 <= min <= max <= image_size/8"
            )
        if not 0 <= c_lo <= c_hi:
            raise InfeasibleSpec(f"bad lesion_count_range {self.lesion_count_range}")
        if self.domain_shift.contrast_scale <= 0:
            raise InfeasibleSpec("contrast_scale must be > 0")
        if self.noise_sigma < 0 or self.domain_shift.extra_noise_sigma < 0:
            raise InfeasibleSpec("noise sigmas must be >= 0")
        # the narrowest lung semi-axis is ~0.12 * image_size
        if r_hi * 1.2 >= 0.11 * self.image_size:
            raise InfeasibleSpec(f"lesions of radius {r_hi} cannot fit inside the lungs")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lesion_count_range"] = list(self.lesion_count_range)
        d["lesion_radius_range"] = list(self.lesion_radius_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PhantomSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InfeasibleSpec(f"unknown phantom keys: {sorted(unknown)}")
        kw = dict(d)
        if "domain_shift" in kw and not isinstance(kw["domain_shift"], DomainShift):
            kw["domain_shift"] = DomainShift(**kw["domain_shift"])
        for key in ("lesion_count_range", "lesion_radius_range"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def _ellipse(yy, xx, cy, cx, ay, ax, theta=0.0):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _patient_geometry(size, rng):
    c = (size - 1) / 2.0
    body = dict(cy=c + rng.uniform(-0.02, 0.02) * size, cx=c,
                ay=size * rng.uniform(0.38, 0.42), ax=size * rng.uniform(0.45, 0.48))
    lungs = []
    for side in (-1, 1):
        lungs.append(dict(
            cy=c + rng.uniform(-0.03, 0.03) * size,
            cx=c + side * size * rng.uniform(0.20, 0.23),
            ay=size * rng.uniform(0.23, 0.27),
            ax=size * rng.uniform(0.12, 0.15),
            theta=side * rng.uniform(0.0, 0.15),
        ))
    return body, lungs


def _draw_vessels(lung_mask, lung, size, rng):
    """Quadratic curves fanning out from the inner (hilar) edge of a lung."""
    vessels = np.zeros_like(lung_mask)
    hilum_x = lung["cx"] - np.sign(lung["cx"] - (size - 1) / 2.0) * lung["ax"] * 0.6
    hilum = np.array([lung["cy"], hilum_x])
    t = np.linspace(0.0, 1.0, 4 * size)[:, None]
    for _ in range(rng.integers(3, 6)):
        ang = rng.uniform(0, 2 * np.pi)
        reach = rng.uniform(0.55, 0.95)
        end = np.array([lung["cy"] + reach * lung["ay"] * np.sin(ang),
                        lung["cx"] + reach * lung["ax"] * np.cos(ang)])
        ctrl = (hilum + end) / 2 + rng.normal(0, 0.08 * size, 2)
        pts = (1 - t) ** 2 * hilum + 2 * (1 - t) * t * ctrl + t ** 2 * end
        width = rng.uniform(1.0, 2.2)
        line = np.zeros_like(lung_mask)
        ij = np.clip(np.rint(pts).astype(int), 0, size - 1)
        line[ij[:, 0], ij[:, 1]] = True
        vessels |= ndimage.distance_transform_edt(~line) <= width
    # keep vessels off the lung wall so they never split a lung in two
    return vessels & (ndimage.distance_transform_edt(lung_mask) > 2.5)


def _place_lesions(lungs, vessels, spec, yy, xx, rng):
    size = spec.image_size
    mask = np.zeros((size, size), dtype=bool)
    n = int(rng.integers(spec.lesion_count_range[0], spec.lesion_count_range[1] + 1))
    cand_v = np.argwhere(vessels)
    cand_l = np.argwhere(lungs)
    for _ in range(n):
        r = rng.uniform(*spec.lesion_radius_range)
        ay, ax = r * rng.uniform(0.85, 1.15, 2)
        theta = rng.uniform(0, np.pi)
        for attempt in range(400):
            pool = cand_v if attempt < 300 and len(cand_v) else cand_l
            cy, cx = pool[rng.integers(len(pool))]
            blob = _ellipse(yy, xx, cy, cx, ay, ax, theta)
            # strictly inside: blob plus a 1-pixel rim must stay in the lung
            if blob.any() and not (ndimage.binary_dilation(blob) & ~lungs).any():
                mask |= blob
                break
        else:
            raise InfeasibleSpec(f"could not place a radius-{r:.1f} lesion inside the lungs")
    return mask


def generate_patient(spec: PhantomSpec, seed: int, patient_id: str | None = None) -> PatientVolume:
    spec.validate()
    rng = np.random.default_rng(seed)
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    body_g, lung_g = _patient_geometry(size, rng)
    body = _ellipse(yy, xx, **body_g)
    # chest wall: lungs never reach the skin line
    inside_wall = ndimage.distance_transform_edt(body) > 0.04 * size

    slices, masks = [], []
    for _ in range(spec.n_slices_per_patient):
        lungs = np.zeros((size, size), dtype=bool)
        vessels = np.zeros_like(lungs)
        for g in lung_g:
            jit = dict(g, ay=g["ay"] * rng.uniform(0.95, 1.05), ax=g["ax"] * rng.uniform(0.95, 1.05))
            lung = _ellipse(yy, xx, **jit) & inside_wall
            lungs |= lung
            vessels |= _draw_vessels(lung, jit, size, rng)
        lesion = _place_lesions(lungs, vessels, spec, yy, xx, rng)

        img = np.full((size, size), float(AIR_HU))
        img[body] = spec.tissue_hu_mean
        img[lungs] = spec.lung_hu_mean
        img[vessels] = spec.vessel_hu_mean
        img[lesion] = spec.lesion_hu_mean
        img = ndimage.gaussian_filter(img, 0.6)
        img += rng.normal(0.0, spec.noise_sigma, img.shape)
        slices.append(np.clip(np.rint(img), HU_MIN, HU_MAX).astype(np.int16))
        masks.append(lesion.astype(np.uint8))

    vol = PatientVolume(patient_id or f"p{seed:06d}", slices, masks)
    if not spec.domain_shift.is_identity:
        vol = apply_domain_shift(vol, spec.domain_shift, spec.lung_hu_mean, rng=rng)
    return vol


def apply_domain_shift(volume: PatientVolume, shift: DomainShift, lung_hu_mean: float = -850.0,
                       seed: int = 0, rng: np.random.Generator | None = None) -> PatientVolume:
    """Affine contrast change about the lung mean, offset, then extra noise.

    Masks are passed through untouched.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    out = []
    for s in volume.slices:
        v = shift.contrast_scale * (s.astype(np.float64) - lung_hu_mean) + lung_hu_mean + shift.hu_offset
        if shift.extra_noise_sigma > 0:
            v = v + rng.normal(0.0, shift.extra_noise_sigma, v.shape)
        out.append(np.clip(np.rint(v), HU_MIN, HU_MAX).astype(np.int16))
    masks = None if volume.masks is None else [m.copy() for m in volume.masks]
    return PatientVolume(volume.patient_id, out, masks)


def generate_dataset(spec: PhantomSpec, n_patients: int, seed: int, prefix: str = "p") -> list[PatientVolume]:
    """``n_patients`` phantoms with per-patient seeds drawn from ``seed``."""
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, n_patients)
    return [generate_patient(spec, int(s), f"{prefix}{i:03d}") for i, s in enumerate(seeds)]
