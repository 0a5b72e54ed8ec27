"""Overlap and surface-distance metrics for label maps.

Surface voxels are foreground voxels with at least one 6-neighbor outside
the mask (volume boundaries count as outside). Surface distances pool both
directed point sets; ASD is their mean and HD95 the linearly interpolated
95th percentile, all in physical millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from archseg.grid import LabelMap


@dataclass(frozen=True)
class OverlapResult:
    """Dice, precision, recall for one class; both-empty flagged trivial."""

    dice: float
    precision: float
    recall: float
    trivially_empty: bool = False


def _class_masks(pred: LabelMap, gt: LabelMap, c: int) -> tuple[np.ndarray, np.ndarray]:
    if pred.dims != gt.dims:
        raise ValueError(f"dims mismatch: {pred.dims} vs {gt.dims}")
    if pred.spacing != gt.spacing:
        raise ValueError(f"spacing mismatch: {pred.spacing} vs {gt.spacing}")
    return pred.codes == c, gt.codes == c


def overlap(pred: LabelMap, gt: LabelMap, c: int) -> OverlapResult:
    """Set-overlap scores for class ``c``.

    Both masks empty scores 1.0 across the board with the trivial flag
    set; a one-sided empty mask zeroes the ratios whose denominator
    survives and the undefined ratio is reported as 0.
    """
    p, g = _class_masks(pred, gt, c)
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return OverlapResult(1.0, 1.0, 1.0, trivially_empty=True)
    tp = int(np.count_nonzero(p & g))
    return OverlapResult(
        dice=2.0 * tp / (np_ + ng),
        precision=tp / np_ if np_ else 0.0,
        recall=tp / ng if ng else 0.0,
    )


def dice(pred: LabelMap, gt: LabelMap, c: int) -> float:
    return overlap(pred, gt, c).dice


def precision(pred: LabelMap, gt: LabelMap, c: int) -> float:
    return overlap(pred, gt, c).precision


def recall(pred: LabelMap, gt: LabelMap, c: int) -> float:
    return overlap(pred, gt, c).recall


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-neighbor outside the mask or the volume."""
    mask = np.asarray(mask, dtype=bool)
    interior = np.ones_like(mask)
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        nb_lo = np.zeros_like(mask)
        nb_hi = np.zeros_like(mask)
        nb_lo[tuple(hi)] = mask[tuple(lo)]
        nb_hi[tuple(lo)] = mask[tuple(hi)]
        interior &= nb_lo & nb_hi
    return mask & ~interior


def _surface_points(mask: np.ndarray, spacing: tuple[float, float, float]) -> np.ndarray:
    idx = np.argwhere(surface_mask(mask))
    return idx.astype(np.float64) * np.asarray(spacing, dtype=np.float64)


def _min_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For every point in ``a`` the distance to its nearest point in ``b``."""
    out = np.empty(len(a))
    chunk = max(1, 4_000_000 // max(len(b), 1))
    for i in range(0, len(a), chunk):
        d2 = ((a[i : i + chunk, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        out[i : i + chunk] = np.sqrt(d2.min(axis=1))
    return out


def symmetric_surface_distances(
    pred: LabelMap, gt: LabelMap, c: int
) -> np.ndarray | None:
    """Pooled bidirectional nearest-surface distances in mm, or None.

    None marks the metric undefined (either mask empty for the class);
    callers exclude undefined entries from aggregates.
    """
    p, g = _class_masks(pred, gt, c)
    if not p.any() or not g.any():
        return None
    ps = _surface_points(p, pred.spacing)
    gs = _surface_points(g, gt.spacing)
    return np.concatenate([_min_dists(ps, gs), _min_dists(gs, ps)])


def asd(pred: LabelMap, gt: LabelMap, c: int) -> float | None:
    """Average symmetric surface distance (mm); None when undefined."""
    d = symmetric_surface_distances(pred, gt, c)
    return None if d is None else float(d.mean())


def hd95(pred: LabelMap, gt: LabelMap, c: int) -> float | None:
    """95th percentile of pooled symmetric surface distances (mm)."""
    d = symmetric_surface_distances(pred, gt, c)
    return None if d is None else float(np.percentile(d, 95.0))


def joined(lab: LabelMap) -> LabelMap:
    """All-foreground binary view of a multi-class map."""
    return LabelMap((lab.codes > 0).astype(np.uint8), lab.spacing)
