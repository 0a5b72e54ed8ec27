"""Structural plausibility scoring of predicted arch segmentations.

A prediction is graded 1 (correct), 2 (recognizable but merged into a
neighboring structure) or 3 (structurally wrong) by rules evaluated in a
fixed order: fragmentation of the arch, the vascular-ring check around the
trachea, then excessive surface contact with head-and-neck vessels or the
arterial duct. The ring check walks axial slices and asks whether arch
voxels surround the interpolated trachea axis with no angular gap larger
than a threshold; a double arch must close such a ring and the other
anomalies must not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from archseg.grid import ANOMALIES, HEAD_NECK_REGIONS, LabelMap, scheme_for
from archseg.metrics import surface_mask

REASONS = (
    "correct",
    "merged-into-HN",
    "merged-into-AD",
    "split-arch",
    "indiscernible",
    "missing-second-arch",
    "extra-arch",
)

_26_OFFSETS = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
]


@dataclass(frozen=True)
class TopologyConfig:
    """Thresholds of the scoring rules."""

    min_component_voxels: int = 5  # smaller arch fragments are noise
    adjacency_fraction: float = 0.15  # of arch surface touching HN or AD
    ring_max_gap_deg: float = 45.0  # largest angular hole in a closed ring

    def __post_init__(self) -> None:
        if self.min_component_voxels < 1:
            raise ValueError("min_component_voxels must be >= 1")
        if not 0.0 < self.adjacency_fraction < 1.0:
            raise ValueError("adjacency_fraction must lie in (0, 1)")
        if not 0.0 < self.ring_max_gap_deg < 360.0:
            raise ValueError("ring_max_gap_deg must lie in (0, 360)")


@dataclass(frozen=True)
class TopologyScore:
    score: int  # 1 correct, 2 merged, 3 structurally wrong
    reason: str

    def __post_init__(self) -> None:
        if self.score not in (1, 2, 3):
            raise ValueError(f"score must be 1, 2 or 3, got {self.score}")
        if self.reason not in REASONS:
            raise ValueError(f"unknown reason {self.reason!r}")


def connected_components_26(mask: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """26-connected component labeling; returns (labels, sizes).

    Labels are 1-based in discovery order, 0 is background; ``sizes[k]``
    is the voxel count of component k + 1.
    """
    mask = np.asarray(mask, dtype=bool)
    labels = np.zeros(mask.shape, dtype=np.int32)
    offsets = np.array(_26_OFFSETS)
    dims = np.array(mask.shape)
    sizes: list[int] = []
    for seed in np.argwhere(mask):
        if labels[tuple(seed)]:
            continue
        comp = len(sizes) + 1
        labels[tuple(seed)] = comp
        frontier = seed[None, :]
        count = 1
        while len(frontier):
            cand = (frontier[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
            ok = ((cand >= 0) & (cand < dims)).all(axis=1)
            cand = cand[ok]
            xi, yi, zi = cand[:, 0], cand[:, 1], cand[:, 2]
            fresh = mask[xi, yi, zi] & (labels[xi, yi, zi] == 0)
            cand = np.unique(cand[fresh], axis=0)
            if len(cand):
                labels[cand[:, 0], cand[:, 1], cand[:, 2]] = comp
                count += len(cand)
            frontier = cand
        sizes.append(count)
    return labels, sizes


def ring_test(
    arch_mask: np.ndarray,
    trachea_axis: np.ndarray,
    cfg: TopologyConfig = TopologyConfig(),
) -> bool:
    """True when arch voxels intersect every half-plane through the trachea.

    The trachea axis is a polyline of voxel coordinates running head-foot;
    every arch voxel gets the angle of its offset from the axis position
    interpolated at the voxel's own axial level. The mask encircles the
    axis when the sorted angles leave no circular gap beyond
    ``ring_max_gap_deg``, the discretized form of hitting every half-plane
    bounded by the axis.
    """
    arch_mask = np.asarray(arch_mask, dtype=bool)
    axis = np.asarray(trachea_axis, dtype=np.float64)
    if axis.ndim != 2 or axis.shape[1] != 3:
        raise ValueError(f"expected (K, 3) axis polyline, got {axis.shape}")
    pts = np.argwhere(arch_mask)
    # full angular coverage with gaps <= the threshold needs this many points
    max_gap = np.deg2rad(cfg.ring_max_gap_deg)
    if len(pts) < int(np.ceil(2 * np.pi / max_gap)):
        return False
    order = np.argsort(axis[:, 2], kind="stable")
    az = axis[order, 2]
    cx = np.interp(pts[:, 2], az, axis[order, 0])
    cy = np.interp(pts[:, 2], az, axis[order, 1])
    ang = np.sort(np.arctan2(pts[:, 1] - cy, pts[:, 0] - cx))
    gaps = np.diff(ang)
    wrap = 2 * np.pi - (ang[-1] - ang[0])
    return bool(max(gaps.max(initial=0.0), wrap) <= max_gap)


def _adjacency_fraction(
    arch: np.ndarray, other: np.ndarray
) -> float:
    """Share of arch surface voxels with a 26-neighbor in ``other``."""
    surf = surface_mask(arch)
    n_surf = int(surf.sum())
    if n_surf == 0:
        return 0.0
    dilated = np.zeros_like(other)
    for off in _26_OFFSETS:
        src = [slice(None)] * 3
        dst = [slice(None)] * 3
        for ax, d in enumerate(off):
            if d == -1:
                src[ax] = slice(1, None)
                dst[ax] = slice(None, -1)
            elif d == 1:
                src[ax] = slice(None, -1)
                dst[ax] = slice(1, None)
        dilated[tuple(dst)] |= other[tuple(src)]
    return int((surf & dilated).sum()) / n_surf


def topology_score(
    pred: LabelMap,
    anomaly: str,
    trachea_axis: np.ndarray,
    cfg: TopologyConfig = TopologyConfig(),
) -> TopologyScore:
    """Grade the arch of a predicted multi-class segmentation.

    Rules apply in order: a missing (or speck-only) arch is indiscernible;
    more than one real component is a split arch; a double arch must close
    a ring around the trachea and the other anomalies must not; an arch
    whose surface leans on head-and-neck vessels or the arterial duct
    beyond the adjacency threshold is merged. Only the HN/AD grouping of
    the non-arch codes matters, never their identity.
    """
    if anomaly not in ANOMALIES:
        raise ValueError(f"unknown anomaly {anomaly!r}")
    scheme = scheme_for(anomaly)
    arch = pred.codes == scheme.code("arch")
    if not arch.any():
        return TopologyScore(3, "indiscernible")
    labels, sizes = connected_components_26(arch)
    kept = [k + 1 for k, s in enumerate(sizes) if s >= cfg.min_component_voxels]
    if not kept:
        return TopologyScore(3, "indiscernible")
    if len(kept) > 1:
        return TopologyScore(3, "split-arch")
    arch = labels == kept[0]

    ring = ring_test(arch, trachea_axis, cfg)
    if anomaly == "DAA" and not ring:
        return TopologyScore(3, "missing-second-arch")
    if anomaly in ("CoA", "RAA") and ring:
        return TopologyScore(3, "extra-arch")

    hn = np.isin(pred.codes, [scheme.code(n) for n in HEAD_NECK_REGIONS
                              if n in scheme.names])
    ad = pred.codes == scheme.code("AD")
    f_hn = _adjacency_fraction(arch, hn)
    f_ad = _adjacency_fraction(arch, ad)
    if max(f_hn, f_ad) > cfg.adjacency_fraction:
        which = "HN" if f_hn >= f_ad else "AD"
        return TopologyScore(2, f"merged-into-{which}")
    return TopologyScore(1, "correct")
