"""Volumetric data model: grids, label coding, interpolation, warping.

Conventions used throughout the package:

* arrays are C-ordered numpy with shape ``dims = (nx, ny, nz)``; axis 0 is
  x (left-right), axis 1 is y (anterior-posterior), axis 2 is z (feet-head)
* physical coordinates are ``index * spacing`` mm with the origin at voxel
  (0, 0, 0); no center offset
* displacement fields are in voxel units: a warp reads the moving volume at
  ``x + phi[x]``
* out-of-grid sampling clamps to the border
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from archseg import kernels

ANOMALIES = ("CoA", "RAA", "DAA")

# Region order is shared across anomalies so a single 12-channel network
# head serves all three schemes. CoA omits RSA (one fewer head-and-neck
# vessel); its code stays reserved and simply never appears in CoA targets.
_REGIONS_FULL = (
    "arch",
    "AD",
    "DAO",
    "MPA",
    "LPA",
    "RPA",
    "SVC",
    "BCA",
    "LCCA",
    "LSA",
    "RSA",
)
HEAD_NECK_REGIONS = ("BCA", "LCCA", "LSA", "RSA")
N_CLASSES = len(_REGIONS_FULL) + 1  # foreground codes 1..11 plus background


@dataclass(frozen=True)
class VesselScheme:
    """Named vessel regions for one anomaly class; code 0 is background."""

    anomaly: str
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.anomaly not in ANOMALIES:
            raise ValueError(f"unknown anomaly {self.anomaly!r}")
        expected = 10 if self.anomaly == "CoA" else 11
        if len(self.names) != expected:
            raise ValueError(
                f"{self.anomaly} scheme needs {expected} regions, got {len(self.names)}"
            )

    @property
    def cardinality(self) -> int:
        return len(self.names)

    def code(self, name: str) -> int:
        """Foreground code of a region under the shared 12-channel coding."""
        return _REGIONS_FULL.index(name) + 1

    @property
    def codes(self) -> tuple[int, ...]:
        return tuple(self.code(n) for n in self.names)


def scheme_for(anomaly: str) -> VesselScheme:
    names = tuple(n for n in _REGIONS_FULL if not (anomaly == "CoA" and n == "RSA"))
    return VesselScheme(anomaly=anomaly, names=names)


@dataclass
class Volume3D:
    """Scalar 3D grid with physical spacing."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"expected 3D data, got shape {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelMap:
    """Integer-coded segmentation; 0 background, 1..C foreground."""

    codes: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    scheme: VesselScheme | None = None

    def __post_init__(self) -> None:
        self.codes = np.asarray(self.codes)
        if self.codes.ndim != 3:
            raise ValueError(f"expected 3D codes, got shape {self.codes.shape}")
        if not np.issubdtype(self.codes.dtype, np.integer):
            raise ValueError(f"label codes must be integer, got {self.codes.dtype}")
        self.codes = self.codes.astype(np.uint8, copy=False)
        if self.codes.max(initial=0) >= N_CLASSES:
            raise ValueError(f"label code exceeds {N_CLASSES - 1}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.codes.shape


@dataclass
class DisplacementField:
    """Per-voxel 3-vector offsets (voxel units) into moving space."""

    vectors: np.ndarray  # (3, nx, ny, nz)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 4 or self.vectors.shape[0] != 3:
            raise ValueError(
                f"expected (3, nx, ny, nz) vectors, got {self.vectors.shape}"
            )
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("displacement field contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.vectors.shape[1:]

    @classmethod
    def zero(
        cls, dims: tuple[int, int, int], spacing=(1.0, 1.0, 1.0), dtype=np.float32
    ) -> "DisplacementField":
        return cls(np.zeros((3, *dims), dtype=dtype), spacing)


@dataclass(frozen=True)
class AffineTransform:
    """Physical-space map q = matrix @ p + translation (mm)."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if m.shape != (3, 3) or t.shape != (3,):
            raise ValueError("affine needs a 3x3 matrix and length-3 translation")
        if abs(np.linalg.det(m)) <= 1e-8:
            raise ValueError("affine matrix is singular")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls()

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.matrix)
        return AffineTransform(inv, -inv @ self.translation)

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """self after other: (self ∘ other)(p) = self(other(p))."""
        return AffineTransform(
            self.matrix @ other.matrix,
            self.matrix @ other.translation + self.translation,
        )


# ---------------------------------------------------------------------------
# intensity and coordinates
# ---------------------------------------------------------------------------


def normalize_intensity(v: Volume3D) -> Volume3D:
    """Min-max rescale to [0, 1]; constant volumes map to all zeros."""
    data = v.data.astype(np.float32, copy=False)
    lo = float(data.min())
    hi = float(data.max())
    if hi <= lo:
        return replace(v, data=np.zeros_like(data, dtype=np.float32))
    return replace(v, data=((data - lo) / (hi - lo)).astype(np.float32))


def identity_coords(dims: tuple[int, int, int], dtype=np.float64) -> np.ndarray:
    """Voxel-index coordinate grid, shape (3, nx, ny, nz)."""
    axes = np.meshgrid(
        np.arange(dims[0], dtype=dtype),
        np.arange(dims[1], dtype=dtype),
        np.arange(dims[2], dtype=dtype),
        indexing="ij",
    )
    return np.stack(axes, axis=0)


def trilinear_sample(v: Volume3D, p: np.ndarray) -> np.ndarray | float:
    """Interpolate at continuous voxel coordinates p ((3,) or (3, M))."""
    p = np.asarray(p, dtype=np.float64)
    scalar = p.ndim == 1
    coords = p.reshape(3, -1)
    vals = kernels.trilinear_gather(
        v.data.astype(np.float64, copy=False)[None], coords
    )[0]
    return float(vals[0]) if scalar else vals


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------


def _warp_channels(channels: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Warp (C, nx, ny, nz) channels by voxel-unit offsets (3, nx, ny, nz)."""
    dims = channels.shape[1:]
    coords = identity_coords(dims, dtype=phi.dtype) + phi
    out = kernels.trilinear_gather(channels, coords.reshape(3, -1))
    return out.reshape(channels.shape)


def warp_volume(v: Volume3D, phi: DisplacementField) -> Volume3D:
    if v.dims != phi.dims:
        raise ValueError(f"volume dims {v.dims} != field dims {phi.dims}")
    data = v.data.astype(np.float32, copy=False)
    out = _warp_channels(data[None], phi.vectors.astype(np.float32, copy=False))[0]
    return replace(v, data=out)


def one_hot(codes: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    """(nx, ny, nz) integer codes -> (n_classes, nx, ny, nz) float32."""
    flat = codes.reshape(-1).astype(np.intp)
    out = np.zeros((n_classes, flat.size), dtype=np.float32)
    out[flat, np.arange(flat.size)] = 1.0
    return out.reshape(n_classes, *codes.shape)


def warp_labels(lab: LabelMap, phi: DisplacementField) -> LabelMap:
    """One-hot encode, trilinearly warp each channel, argmax decode.

    Ties resolve to the lowest code (argmax convention).
    """
    if lab.dims != phi.dims:
        raise ValueError(f"label dims {lab.dims} != field dims {phi.dims}")
    hot = one_hot(lab.codes)
    warped = _warp_channels(hot, phi.vectors.astype(np.float32, copy=False))
    out = np.argmax(warped, axis=0).astype(np.uint8)
    return replace(lab, codes=out)


def join_labels(lab: LabelMap) -> LabelMap:
    """Collapse all foreground codes to 1; background stays 0."""
    return LabelMap(
        codes=(lab.codes > 0).astype(np.uint8), spacing=lab.spacing, scheme=None
    )


# ---------------------------------------------------------------------------
# affine resampling and cropping
# ---------------------------------------------------------------------------


def _affine_coords(
    dims: tuple[int, int, int],
    spacing_fixed: tuple[float, float, float],
    spacing_moving: tuple[float, float, float],
    affine: AffineTransform,
) -> np.ndarray:
    """Voxel coordinates in moving space for each fixed voxel, (3, M)."""
    idx = identity_coords(dims).reshape(3, -1)
    p = idx * np.asarray(spacing_fixed, dtype=np.float64)[:, None]
    q = affine.matrix @ p + affine.translation[:, None]
    return q / np.asarray(spacing_moving, dtype=np.float64)[:, None]


def affine_apply(
    moving: Volume3D,
    affine: AffineTransform,
    out_dims: tuple[int, int, int] | None = None,
    out_spacing: tuple[float, float, float] | None = None,
) -> Volume3D:
    """Resample onto a fixed grid: out[x] = moving(matrix @ x_mm + t)."""
    dims = out_dims or moving.dims
    spacing = out_spacing or moving.spacing
    coords = _affine_coords(dims, spacing, moving.spacing, affine)
    vals = kernels.trilinear_gather(
        moving.data.astype(np.float64, copy=False)[None], coords
    )[0]
    return Volume3D(
        vals.reshape(dims).astype(moving.data.dtype, copy=False), spacing
    )


def affine_apply_labels(
    moving: LabelMap,
    affine: AffineTransform,
    out_dims: tuple[int, int, int] | None = None,
    out_spacing: tuple[float, float, float] | None = None,
) -> LabelMap:
    """Label counterpart of affine_apply: one-hot trilinear + argmax."""
    dims = out_dims or moving.dims
    spacing = out_spacing or moving.spacing
    coords = _affine_coords(dims, spacing, moving.spacing, affine)
    hot = one_hot(moving.codes).astype(np.float64)
    vals = kernels.trilinear_gather(hot, coords)
    out = np.argmax(vals.reshape(hot.shape[0], *dims), axis=0).astype(np.uint8)
    return LabelMap(codes=out, spacing=spacing, scheme=moving.scheme)


def crop_roi(v, box: tuple[tuple[int, int, int], tuple[int, int, int]]):
    """Extract the half-open sub-volume [lo, hi) from a Volume3D or LabelMap."""
    lo, hi = (tuple(int(i) for i in b) for b in box)
    dims = v.dims
    for axis in range(3):
        if not (0 <= lo[axis] < hi[axis] <= dims[axis]):
            raise ValueError(f"empty or out-of-range box {box} for dims {dims}")
    sl = tuple(slice(lo[a], hi[a]) for a in range(3))
    if isinstance(v, LabelMap):
        return replace(v, codes=v.codes[sl].copy())
    return replace(v, data=v.data[sl].copy())
