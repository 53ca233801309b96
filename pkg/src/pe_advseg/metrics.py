"""Foreground IoU, dice and sensitivity with explicit aggregation rules.

A slice counts toward IoU/dice iff ``gt | pred`` is non-empty and toward
sensitivity iff ``gt`` is non-empty. Aggregates are plain means over the
included slices (``mode="slice"``, the default); ``"patient"`` first averages
per patient, ``"global"`` pools all pixels into one confusion table.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data_io import ShapeMismatch

REPORT_VERSION = 1
METRICS = ("iou", "dice", "sensitivity")


class EmptyEvaluation(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def confusion(pred, gt) -> ConfusionCounts:
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeMismatch(f"pred {p.shape} vs gt {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def slice_metrics(counts: ConfusionCounts) -> dict:
    """iou, dice, sensitivity; a value is ``None`` when its denominator is 0."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    union = tp + fp + fn
    return {
        "iou": tp / union if union else None,
        "dice": 2 * tp / (2 * tp + fp + fn) if union else None,
        "sensitivity": tp / (tp + fn) if tp + fn else None,
    }


@dataclass
class MetricsReport:
    per_slice: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    mode: str = "slice"

    def to_dict(self) -> dict:
        return {"version": REPORT_VERSION, **asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(per_slice=d["per_slice"], aggregate=d["aggregate"], mode=d.get("mode", "slice"))

    def summary_line(self) -> str:
        a = self.aggregate
        return f"miou={a['miou']:.4f} dice={a['dice']:.4f} sensitivity={a['sensitivity']:.4f}"


def _mean(values: Iterable[float]) -> float | None:
    vals = list(values)
    return float(np.mean(vals)) if vals else None


def evaluate_dataset(pairs: Sequence, slice_ids: Sequence | None = None,
                     patient_ids: Sequence[str] | None = None, mode: str = "slice") -> MetricsReport:
    """Per-slice metrics and their aggregate over ``(pred, gt)`` pairs.

    Raises EmptyEvaluation if any of the three metrics has no qualifying slice.
    """
    if mode not in ("slice", "patient", "global"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    pairs = list(pairs)
    if not pairs:
        raise EmptyEvaluation("no slices to evaluate")
    if slice_ids is None:
        slice_ids = [str(i) for i in range(len(pairs))]
    if patient_ids is None:
        patient_ids = ["all"] * len(pairs)

    per_slice, counts = [], []
    for sid, pid, (pred, gt) in zip(slice_ids, patient_ids, pairs):
        c = confusion(pred, gt)
        m = slice_metrics(c)
        counts.append(c)
        per_slice.append({
            "slice_id": sid, "patient_id": pid, **m,
            "included": m["iou"] is not None,
            "included_sensitivity": m["sensitivity"] is not None,
            "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn,
        })

    if mode == "global":
        total = sum(counts[1:], counts[0])
        g = slice_metrics(total)
        agg = {"miou": g["iou"], "dice": g["dice"], "sensitivity": g["sensitivity"]}
    elif mode == "slice":
        agg = {
            "miou": _mean(r["iou"] for r in per_slice if r["iou"] is not None),
            "dice": _mean(r["dice"] for r in per_slice if r["dice"] is not None),
            "sensitivity": _mean(r["sensitivity"] for r in per_slice if r["sensitivity"] is not None),
        }
    else:
        by_patient: dict[str, list[dict]] = {}
        for r in per_slice:
            by_patient.setdefault(r["patient_id"], []).append(r)
        agg = {}
        for key, name in (("iou", "miou"), ("dice", "dice"), ("sensitivity", "sensitivity")):
            means = [_mean(r[key] for r in rows if r[key] is not None) for rows in by_patient.values()]
            agg[name] = _mean(m for m in means if m is not None)

    missing = [k for k, v in agg.items() if v is None]
    if missing:
        raise EmptyEvaluation(f"no slice qualifies for {', '.join(missing)}")
    agg["n_slices_included"] = sum(r["included"] for r in per_slice)
    agg["n_slices_included_sensitivity"] = sum(r["included_sensitivity"] for r in per_slice)
    return MetricsReport(per_slice=per_slice, aggregate=agg, mode=mode)
