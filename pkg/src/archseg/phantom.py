"""Parametric 3D vascular phantoms in three aortic-arch topologies.

Geometry is defined as tube centerlines in normalized [0,1]^3 coordinates
(x left->right, y anterior->posterior, z caudal->cranial) around a vertical
trachea at (0.50, 0.45). All anomalies share an ascending aorta reaching
the arch level anterior to the trachea and a posterior junction where the
descending aorta begins; they differ in which arch arc(s) connect the two:

* CoA: left arc only, with a plateau narrowing near its distal end
* RAA: right arc only (mirror image), with an aberrant LSA
* DAA: both arcs, forming a closed ring around the trachea

Subjects get geometry-level variation (global scale, small affine jitter,
a smooth random deformation applied to every centerline including the
trachea axis) before rasterization, so image, labels, and the recorded
trachea axis stay mutually consistent. Vessels render dark on a brighter
textured background (black-blood contrast); the binary "manual" mask is a
seeded per-region surface jitter of the true foreground, biased toward
adding voxels (simulating slightly generous human outlining).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from archseg.grid import LabelMap, Volume3D, normalize_intensity, scheme_for

PHANTOM_VERSION = 1

_CENTER = np.array([0.50, 0.45, 0.55])
_TRACHEA_XY = np.array([0.50, 0.45])
_ARCH_R = 0.11
_ARCH_Z = 0.62

# per-tier degradation: Gaussian blur sigma (voxels), noise sigma, bias amp
_TIER_BLUR = {1: 0.5, 2: 0.75, 3: 1.5}
_TIER_NOISE = {1: 0.010, 2: 0.020, 3: 0.040}
_TIER_BIAS = {1: 0.04, 2: 0.08, 3: 0.12}

# binary-mask jitter: fractions of each region's voxel count
_JITTER_ADD_FRAC = 0.10
_JITTER_REMOVE_FRAC = 0.03


@dataclass(frozen=True)
class PhantomSpec:
    anomaly: str
    seed: int
    scale: float = 1.0
    coarct_ratio: float | None = None
    tier: int = 1
    deformation_amplitude: float = 1.5  # voxels

    def __post_init__(self) -> None:
        if self.anomaly not in ("CoA", "RAA", "DAA"):
            raise ValueError(f"unknown anomaly {self.anomaly!r}")
        if self.tier not in (1, 2, 3):
            raise ValueError(f"tier must be 1..3, got {self.tier}")
        if not (0.5 <= self.scale <= 2.0):
            raise ValueError(f"scale {self.scale} out of range")
        if self.anomaly == "CoA":
            ratio = 0.4 if self.coarct_ratio is None else self.coarct_ratio
            if not (0.3 <= ratio <= 0.6):
                raise ValueError(f"coarct_ratio {ratio} outside [0.3, 0.6]")
        elif self.coarct_ratio is not None:
            raise ValueError("coarct_ratio applies to CoA only")
        if self.deformation_amplitude < 0:
            raise ValueError("deformation amplitude must be nonnegative")


@dataclass
class PhantomMeta:
    anomaly: str
    trachea_axis: np.ndarray  # (K, 3) voxel coordinates, post-deformation
    arch_centerline: np.ndarray  # (M, 3) voxel coordinates
    arch_radii: np.ndarray  # (M,) voxel units
    version: int = PHANTOM_VERSION


@dataclass
class SubjectSample:
    image: Volume3D
    labels_multi: LabelMap
    labels_binary: LabelMap
    meta: PhantomMeta

    def __iter__(self):
        return iter((self.image, self.labels_multi, self.labels_binary))


@dataclass
class _Tube:
    name: str
    pts: np.ndarray  # (n, 3) normalized coordinates
    radii: np.ndarray  # (n,) normalized radii


# ---------------------------------------------------------------------------
# centerline templates
# ---------------------------------------------------------------------------


def _segment(p0, p1, n: int = 60) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return np.asarray(p0) * (1 - t) + np.asarray(p1) * t


def _bezier(p0, p1, p2, n: int = 90) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    p0, p1, p2 = (np.asarray(p) for p in (p0, p1, p2))
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _arc(side: str, n: int = 160) -> np.ndarray:
    """Arch arc from the anterior ascending point to the posterior junction.

    Angles run around the trachea axis; -90 deg is anterior, +90 posterior.
    The left arc sweeps through 180 deg (patient left), the right through
    0 deg.
    """
    t = np.linspace(0.0, 1.0, n)
    sign = -1.0 if side == "left" else 1.0
    theta = np.deg2rad(-90.0 + sign * 180.0 * t)
    x = _TRACHEA_XY[0] + _ARCH_R * np.cos(theta)
    y = _TRACHEA_XY[1] + _ARCH_R * np.sin(theta)
    z = _ARCH_Z + 0.035 * np.sin(np.pi * t)
    return np.stack([x, y, z], axis=1)


def _coarct_profile(t: np.ndarray, ratio: float) -> np.ndarray:
    """Radius multiplier: smooth plateau narrowing over t in [0.60, 0.80].

    The zone sits distal to the last head-and-neck attachment (t=0.48) but
    clear of the descending junction so neighboring tubes cannot claim the
    narrowed voxels.
    """

    def smooth(u):
        u = np.clip(u, 0.0, 1.0)
        return u * u * (3.0 - 2.0 * u)

    bump = smooth((t - 0.54) / 0.06) * smooth((0.86 - t) / 0.06)
    return 1.0 - (1.0 - ratio) * bump


def _hn_tube(attach: np.ndarray) -> np.ndarray:
    """Head-and-neck vessel: rises from the arch, leaning away from it."""
    out_xy = attach[:2] - _CENTER[:2]
    norm = np.linalg.norm(out_xy)
    out_xy = out_xy / norm if norm > 1e-9 else np.array([0.0, -1.0])
    top = np.array(
        [attach[0] + 0.045 * out_xy[0], attach[1] + 0.045 * out_xy[1], 0.82]
    )
    return _segment(attach, top, n=70)


def _template(anomaly: str, coarct_ratio: float) -> list[_Tube]:
    tubes: list[_Tube] = []
    junction = np.array([_TRACHEA_XY[0], _TRACHEA_XY[1] + _ARCH_R, _ARCH_Z])
    asc_base = np.array([_TRACHEA_XY[0], _TRACHEA_XY[1] - _ARCH_R, 0.42])
    asc_top = np.array([_TRACHEA_XY[0], _TRACHEA_XY[1] - _ARCH_R, _ARCH_Z])

    def const_r(pts, r):
        return np.full(len(pts), r)

    # arch label: ascending segment plus the arc(s) present for this anomaly
    arch_parts: list[tuple[np.ndarray, np.ndarray]] = []
    asc = _segment(asc_base, asc_top, n=70)
    arch_parts.append((asc, const_r(asc, 0.042)))
    arcs: dict[str, np.ndarray] = {}
    sides = {"CoA": ("left",), "RAA": ("right",), "DAA": ("left", "right")}[anomaly]
    for side in sides:
        arc = _arc(side)
        t = np.linspace(0.0, 1.0, len(arc))
        radii = np.full(len(arc), 0.040)
        if anomaly == "CoA" and side == "left":
            radii = radii * _coarct_profile(t, coarct_ratio)
        arch_parts.append((arc, radii))
        arcs[side] = arc
    arch_pts = np.concatenate([p for p, _ in arch_parts])
    arch_radii = np.concatenate([r for _, r in arch_parts])
    tubes.append(_Tube("arch", arch_pts, arch_radii))

    # descending aorta from the posterior junction
    dao = _segment(junction, np.array([junction[0], junction[1], 0.20]), n=90)
    tubes.append(_Tube("DAO", dao, const_r(dao, 0.036)))

    # pulmonary trunk and branches
    mpa_base = np.array([0.44, 0.30, 0.38])
    mpa_top = np.array([0.44, 0.32, 0.565])
    mpa = _segment(mpa_base, mpa_top, n=70)
    tubes.append(_Tube("MPA", mpa, const_r(mpa, 0.040)))
    lpa = _bezier(mpa_top, [0.36, 0.38, 0.56], [0.30, 0.40, 0.55])
    tubes.append(_Tube("LPA", lpa, const_r(lpa, 0.026)))
    rpa = _bezier(mpa_top, [0.54, 0.40, 0.55], [0.68, 0.40, 0.54])
    tubes.append(_Tube("RPA", rpa, const_r(rpa, 0.026)))

    # arterial duct: pulmonary trunk to the descending junction, passing
    # left of the trachea and below the arch
    ad = _bezier(mpa_top, [0.42, 0.43, 0.575], junction + [0, 0, -0.005], n=80)
    tubes.append(_Tube("AD", ad, const_r(ad, 0.020)))

    # superior vena cava, right-anterior
    svc = _segment([0.60, 0.30, 0.40], [0.60, 0.30, 0.68], n=70)
    tubes.append(_Tube("SVC", svc, const_r(svc, 0.026)))

    # head-and-neck vessels: attachment fractions along the arcs
    def attach_at(side: str, frac: float) -> np.ndarray:
        arc = arcs[side]
        return arc[int(round(frac * (len(arc) - 1)))]

    hn: list[tuple[str, str, float]] = []
    if anomaly == "CoA":
        hn = [("BCA", "left", 0.16), ("LCCA", "left", 0.32), ("LSA", "left", 0.48)]
    elif anomaly == "RAA":
        hn = [
            ("BCA", "right", 0.16),
            ("LCCA", "right", 0.32),
            ("RSA", "right", 0.48),
            ("LSA", "right", 0.80),  # aberrant LSA from the distal right arc
        ]
    else:  # DAA: two vessels per arc
        hn = [
            ("BCA", "right", 0.20),
            ("RSA", "right", 0.42),
            ("LCCA", "left", 0.20),
            ("LSA", "left", 0.42),
        ]
    for name, side, frac in hn:
        pts = _hn_tube(attach_at(side, frac))
        tubes.append(_Tube(name, pts, const_r(pts, 0.018)))
    return tubes


def _trachea_axis_template(n: int = 48) -> np.ndarray:
    z = np.linspace(0.30, 0.85, n)
    pts = np.empty((n, 3))
    pts[:, 0] = _TRACHEA_XY[0]
    pts[:, 1] = _TRACHEA_XY[1]
    pts[:, 2] = z
    return pts


# ---------------------------------------------------------------------------
# geometry-level variation
# ---------------------------------------------------------------------------


def _smooth_deformation(rng: np.random.Generator, amp_norm: float):
    """Random low-frequency sinusoidal displacement field on [0,1]^3."""
    n_modes = 4
    freqs = rng.uniform(0.4, 1.2, size=(n_modes, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_modes)
    dirs = rng.standard_normal((n_modes, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True) + 1e-12
    weights = rng.uniform(0.5, 1.0, n_modes)
    weights = weights / weights.sum() * amp_norm

    def deform(p: np.ndarray) -> np.ndarray:
        out = p.copy()
        for m in range(n_modes):
            phase = p @ freqs[m] * 2.0 * np.pi
            out = out + (
                weights[m] * dirs[m][None, :] * np.sin(phase + phases[m])[:, None]
            )
        return out

    return deform


def _geometry_transform(spec: PhantomSpec, rng: np.random.Generator, dims: int):
    """Composite scale + affine jitter + smooth deformation on points."""
    amp = spec.deformation_amplitude
    amp_norm = amp / dims
    axis_scales = spec.scale * (1.0 + rng.uniform(-0.02, 0.02, 3) * min(amp, 2.0))
    angles = np.deg2rad(rng.normal(0.0, 1.2, 3) * min(amp, 2.0))
    shift = rng.uniform(-0.6, 0.6, 3) * amp / dims

    ca, sa = math.cos(angles[0]), math.sin(angles[0])
    cb, sb = math.cos(angles[1]), math.sin(angles[1])
    cc, sc = math.cos(angles[2]), math.sin(angles[2])
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    rot = rz @ ry @ rx
    deform = _smooth_deformation(rng, amp_norm)

    def apply(p: np.ndarray) -> np.ndarray:
        q = (p - _CENTER) * axis_scales
        q = q @ rot.T + _CENTER + shift
        return deform(q)

    return apply


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------


def _resample_polyline(pts: np.ndarray, radii: np.ndarray, step: float):
    """Uniform arclength resampling (normalized units)."""
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total < 1e-9:
        return pts[:1], radii[:1]
    n = max(2, int(math.ceil(total / step)) + 1)
    si = np.linspace(0.0, total, n)
    out = np.stack([np.interp(si, s, pts[:, k]) for k in range(3)], axis=1)
    r = np.interp(si, s, radii)
    return out, r


_RADIUS_FLOOR_VOX = 0.8


def _rasterize(
    tubes: list[_Tube],
    codes: dict[str, int],
    dims: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Signed-margin tube rendering.

    Returns (margin, code): margin is distance-to-surface in voxels
    (negative inside the nearest tube), code the vessel owning each voxel
    (0 where no tube is within reach). Ownership is by most-negative
    margin, independent of tube order.
    """
    grid = np.stack(
        np.meshgrid(*(np.arange(dims, dtype=np.float64) + 0.5,) * 3, indexing="ij"),
        axis=-1,
    ).reshape(-1, 3)
    margin = np.full(grid.shape[0], np.inf, dtype=np.float64)
    code = np.zeros(grid.shape[0], dtype=np.uint8)
    for tube in tubes:
        pts, radii = _resample_polyline(tube.pts, tube.radii, step=0.25 / dims)
        pts_vox = pts * dims
        radii_vox = np.maximum(radii * dims, _RADIUS_FLOOR_VOX)
        rmax = float(radii_vox.max())
        tree = cKDTree(pts_vox)
        d, idx = tree.query(grid, distance_upper_bound=rmax + 2.0, workers=1)
        hit = np.isfinite(d)
        m = np.full_like(margin, np.inf)
        m[hit] = d[hit] - radii_vox[idx[hit]]
        better = m < margin
        margin[better] = m[better]
        code[better] = codes[tube.name]
    return margin.reshape(dims, dims, dims), code.reshape(dims, dims, dims)


# ---------------------------------------------------------------------------
# intensity model and degradation
# ---------------------------------------------------------------------------


def _smooth_noise(rng: np.random.Generator, dims: int, sigma: float) -> np.ndarray:
    g = ndimage.gaussian_filter(rng.standard_normal((dims,) * 3), sigma)
    span = g.max() - g.min()
    if span < 1e-12:
        return np.zeros_like(g)
    return (g - g.min()) / span * 2.0 - 1.0  # in [-1, 1]


def degrade_quality(
    v: Volume3D, tier: int, rng: np.random.Generator | None = None
) -> Volume3D:
    """Blur + noise + mild multiplicative bias, monotone in tier; output
    renormalized to [0, 1]."""
    if tier not in (1, 2, 3):
        raise ValueError(f"tier must be 1..3, got {tier}")
    if rng is None:
        rng = np.random.default_rng(0)
    dims = v.dims[0]
    img = ndimage.gaussian_filter(v.data.astype(np.float64), _TIER_BLUR[tier])
    bias = 1.0 + _TIER_BIAS[tier] * _smooth_noise(rng, dims, sigma=dims / 5.0)
    img = img * bias + rng.normal(0.0, _TIER_NOISE[tier], img.shape)
    return normalize_intensity(Volume3D(img.astype(np.float32), v.spacing))


# ---------------------------------------------------------------------------
# binary-mask jitter
# ---------------------------------------------------------------------------

_STRUCT26 = np.ones((3, 3, 3), dtype=bool)


def _jitter_binary(
    codes: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Simulated manual outlining: per region, add a fraction of the region
    size from its outer shell and remove a smaller fraction of its surface.
    The add/remove asymmetry makes manual masks slightly generous."""
    out = codes > 0
    for c in np.unique(codes[codes > 0]):
        mask = codes == c
        size = int(mask.sum())
        if size == 0:
            continue
        shell = ndimage.binary_dilation(mask, _STRUCT26) & ~(codes > 0) & ~out
        surface = mask & ~ndimage.binary_erosion(mask, _STRUCT26)
        shell_idx = np.flatnonzero(shell)
        surf_idx = np.flatnonzero(surface)
        n_add = min(len(shell_idx), int(round(_JITTER_ADD_FRAC * size)))
        n_rem = min(len(surf_idx), int(round(_JITTER_REMOVE_FRAC * size)))
        flat = out.reshape(-1)
        if n_add:
            flat[rng.choice(shell_idx, size=n_add, replace=False)] = True
        if n_rem:
            flat[rng.choice(surf_idx, size=n_rem, replace=False)] = False
    return out.astype(np.uint8)


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------


def generate_subject(
    spec: PhantomSpec, dims: int = 64, spacing: float = 1.0
) -> SubjectSample:
    """Render one phantom subject: image, exact multi-class labels, jittered
    binary labels, and trachea-axis metadata. Pure function of (spec, dims,
    spacing, generator version)."""
    if dims < 24:
        raise ValueError(f"dims {dims} too small for the anatomy template")
    rng = np.random.default_rng(spec.seed)
    scheme = scheme_for(spec.anomaly)
    ratio = spec.coarct_ratio if spec.coarct_ratio is not None else 0.4
    tubes = _template(spec.anomaly, ratio)
    transform = _geometry_transform(spec, rng, dims)
    tubes = [_Tube(t.name, transform(t.pts), t.radii * spec.scale) for t in tubes]
    axis = transform(_trachea_axis_template()) * dims
    trachea_pts = transform(_trachea_axis_template(n=120))
    trachea = _Tube("trachea", trachea_pts, np.full(120, 0.034 * spec.scale))

    codes_map = {t.name: scheme.code(t.name) for t in tubes}
    margin, code = _rasterize(tubes, codes_map, dims)
    t_margin, _ = _rasterize([trachea], {"trachea": 1}, dims)

    labels = np.where(margin < 0.0, code, 0).astype(np.uint8)

    # black-blood style contrast: bright textured background, dark vessels
    bg = 0.62 + 0.12 * _smooth_noise(rng, dims, sigma=dims / 8.0)
    bg += 0.04 * _smooth_noise(rng, dims, sigma=1.5)
    bg = np.clip(bg, 0.50, 0.80)
    vessel_int = rng.uniform(0.12, 0.28, size=16)
    edge = 1.4  # blend window in voxels
    alpha_v = np.clip(0.5 - margin / edge, 0.0, 1.0)
    alpha_t = np.clip(0.5 - t_margin / edge, 0.0, 1.0)
    alpha_t = np.minimum(alpha_t, 1.0 - alpha_v)  # vessels win where both touch
    img = (
        bg * (1.0 - alpha_v - alpha_t)
        + vessel_int[code] * alpha_v
        + 0.10 * alpha_t
    )
    vol = Volume3D(img.astype(np.float32), (spacing,) * 3)
    vol = degrade_quality(vol, spec.tier, rng)

    multi = LabelMap(labels, (spacing,) * 3, scheme)
    binary = LabelMap(_jitter_binary(labels, rng), (spacing,) * 3, None)

    arch_sel = [t for t in tubes if t.name == "arch"][0]
    arch_pts, arch_r = _resample_polyline(
        arch_sel.pts, arch_sel.radii, step=0.5 / dims
    )
    meta = PhantomMeta(
        anomaly=spec.anomaly,
        trachea_axis=axis,
        arch_centerline=arch_pts * dims,
        arch_radii=np.maximum(arch_r * dims, _RADIUS_FLOOR_VOX),
    )
    return SubjectSample(vol, multi, binary, meta)


_ATLAS_SEEDS = {"CoA": 9001, "RAA": 9002, "DAA": 9003}


def build_atlas(
    anomaly: str, dims: int = 64, spacing: float = 1.0
) -> tuple[Volume3D, LabelMap]:
    """Canonical zero-jitter, tier-1 phantom with exact full labels."""
    spec = PhantomSpec(
        anomaly=anomaly,
        seed=_ATLAS_SEEDS[anomaly],
        scale=1.0,
        tier=1,
        deformation_amplitude=0.0,
    )
    sample = generate_subject(spec, dims=dims, spacing=spacing)
    return sample.image, sample.labels_multi


def atlas_sample(anomaly: str, dims: int = 64, spacing: float = 1.0) -> SubjectSample:
    """Full atlas sample including metadata (axis, centerline)."""
    spec = PhantomSpec(
        anomaly=anomaly,
        seed=_ATLAS_SEEDS[anomaly],
        scale=1.0,
        tier=1,
        deformation_amplitude=0.0,
    )
    return generate_subject(spec, dims=dims, spacing=spacing)
