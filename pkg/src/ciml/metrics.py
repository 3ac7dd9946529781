"""Dice, HD95 and the ensemble rule for regions predicted by several segmentors."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .config import RegionId, TaskAssignment, region_member


@dataclass(frozen=True)
class RegionReport:
    case_id: str
    region: RegionId
    dice: float
    hd95: float | None  # None when either set is empty


def _same_shape(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice_score(pred: np.ndarray, true: np.ndarray) -> float:
    """2|X & Y| / (|X| + |Y|); 1.0 when both masks are empty."""
    pred, true = _same_shape(pred, true)
    total = pred.sum() + true.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, true).sum() / total)


def _boundary(mask: np.ndarray) -> np.ndarray:
    # voxels of the set with at least one face-neighbour outside it (image border counts as outside)
    eroded = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(mask.ndim, 1),
                                    border_value=0)
    return mask & ~eroded


def _directed(src: np.ndarray, dst: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """Distances from every boundary voxel of ``src`` to the nearest voxel of ``dst``."""
    dist_to_dst = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return dist_to_dst[_boundary(src)]


def hausdorff(pred: np.ndarray, true: np.ndarray, spacing: Sequence[float] | None = None,
              percentile: float = 100.0) -> float | None:
    """Symmetric percentile Hausdorff distance in physical units; None if either set is empty."""
    pred, true = _same_shape(pred, true)
    if not pred.any() or not true.any():
        return None
    spacing = tuple(float(s) for s in (spacing or (1.0,) * pred.ndim))
    if len(spacing) != pred.ndim:
        raise ValueError(f"spacing {spacing} does not match {pred.ndim}-d masks")
    d_pt = _directed(pred, true, spacing)
    d_tp = _directed(true, pred, spacing)
    return float(max(np.percentile(d_pt, percentile), np.percentile(d_tp, percentile)))


def hd95(pred: np.ndarray, true: np.ndarray, spacing: Sequence[float] | None = None) -> float | None:
    return hausdorff(pred, true, spacing, 95.0)


# -- ensembling ---------------------------------------------------------------

def _inside(region: RegionId, other: RegionId, nested: bool) -> bool:
    """True if ``other`` lies within ``region``."""
    return other.class_index >= region.class_index if nested else other == region


def average_region_probs(per_segmentor_probs: Mapping[str, np.ndarray],
                         assignment: TaskAssignment) -> dict[RegionId, np.ndarray]:
    """Foreground probability of every region, averaged over the segmentors assigned to it.

    ``per_segmentor_probs[name]`` is the softmax over that segmentor's local
    classes (channel 0 background, then its targets from outermost inward).
    A segmentor's probability for region r sums its local classes lying in r.
    """
    out = {}
    for region in assignment.regions:
        owners = assignment.owners(region)
        if not owners:
            raise ValueError(f"region {region.name} has no segmentor")
        acc = []
        for m in owners:
            probs = per_segmentor_probs[m.name]
            targets = assignment.targets(m)
            if probs.shape[0] != len(targets) + 1:
                raise ValueError(f"{m.name}: {probs.shape[0]} channels for {len(targets)} targets")
            acc.append(sum(probs[i] for i, t in enumerate(targets, start=1)
                           if _inside(region, t, assignment.nested)))
        out[region] = np.mean(acc, axis=0)
    return out


def ensemble_regions(per_segmentor_probs: Mapping[str, np.ndarray], assignment: TaskAssignment,
                     threshold: float = 0.5) -> np.ndarray:
    """Final label map (most specific region per voxel, 0 = background)."""
    region_probs = average_region_probs(per_segmentor_probs, assignment)
    regions = assignment.regions
    shape = next(iter(region_probs.values())).shape
    labels = np.zeros(shape, dtype=np.int64)
    if assignment.nested:
        # a voxel enters region r only if it is also inside every enclosing region
        inside = np.ones(shape, dtype=bool)
        for r in regions:
            inside &= region_probs[r] > threshold
            labels[inside] = r.class_index
    else:
        stack = np.stack([region_probs[r] for r in regions])
        background = 1.0 - stack.sum(axis=0)
        best = stack.argmax(axis=0)
        keep = stack.max(axis=0) > background
        idx = np.array([r.class_index for r in regions])
        labels[keep] = idx[best[keep]]
    return labels


def evaluate_case(case_id: str, pred_labels: np.ndarray, true_labels: np.ndarray,
                  regions: Iterable[RegionId], nested: bool = True,
                  spacing: Sequence[float] | None = None) -> list[RegionReport]:
    reports = []
    for r in sorted(regions):
        p = region_member(pred_labels, r, nested)
        t = region_member(true_labels, r, nested)
        reports.append(RegionReport(case_id, r, dice_score(p, t), hd95(p, t, spacing)))
    return reports


def write_reports_csv(path, reports: Sequence[RegionReport]) -> None:
    """One row per (case, region) and a trailing per-region MEAN row set."""
    regions = sorted({r.region for r in reports})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "region", "dice", "hd95"])
        for r in reports:
            w.writerow([r.case_id, r.region.name, f"{r.dice:.6f}",
                        "undefined" if r.hd95 is None else f"{r.hd95:.6f}"])
        for region in regions:
            rows = [r for r in reports if r.region == region]
            hds = [r.hd95 for r in rows if r.hd95 is not None]
            w.writerow(["MEAN", region.name, f"{np.mean([r.dice for r in rows]):.6f}",
                        f"{np.mean(hds):.6f}" if hds else "undefined"])
        dices = [r.dice for r in reports]
        hds = [r.hd95 for r in reports if r.hd95 is not None]
        w.writerow(["MEAN", "MEAN", f"{np.mean(dices):.6f}" if dices else "nan",
                    f"{np.mean(hds):.6f}" if hds else "undefined"])


def mean_dice(reports: Sequence[RegionReport]) -> float:
    return float(np.mean([r.dice for r in reports])) if reports else math.nan
