"""Cohort construction: stratified rosters, volume generation, pre-alignment.

A cohort is a directory of VOX volumes plus a ``manifest.json`` roster.
``partition_cohort`` plans the roster (ids, splits, tiers, per-subject
generation parameters) without touching disk; ``build_cohort`` renders the
phantoms and writes everything; ``prepare_cohort`` resamples every subject
into its anomaly atlas frame and crops to the analysis box, which is the
geometry all registration and training code consumes.

Multi-class subject labels are stored for evaluation only; training reads
the binary masks and the atlas labels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from archseg.grid import (
    AffineTransform,
    LabelMap,
    Volume3D,
    affine_apply,
    affine_apply_labels,
    crop_roi,
    normalize_intensity,
)
from archseg.phantom import (
    PHANTOM_VERSION,
    PhantomSpec,
    build_atlas,
    generate_subject,
)
from archseg.registration import affine_align
from archseg.voxio import read_vox, write_vox

ANOMALIES = ("CoA", "RAA", "DAA")

# full-cohort class sizes and their published test-split counts; smaller
# cohorts scale the test counts proportionally
REFERENCE_N = {"CoA": 94, "RAA": 72, "DAA": 29}
REFERENCE_TEST = {"CoA": 20, "RAA": 15, "DAA": 5}
VAL_PER_CLASS = 3

TIER_PROBS = (0.45, 0.35, 0.20)
SCALE_RANGE = (0.94, 1.06)
COARCT_RANGE = (0.32, 0.52)
DEFORM_RANGE = (1.0, 2.0)

# analysis box applied after atlas-frame resampling (40-voxel raw grid)
DEFAULT_DIMS = 40
DEFAULT_ROI = ((4, 4, 4), (36, 36, 36))

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "archseg-cohort/1"


class CohortError(RuntimeError):
    pass


@dataclass
class SubjectRecord:
    sid: str
    anomaly: str
    split: str  # train | val | test
    tier: int
    gen_seed: int
    scale: float
    coarct_ratio: float | None
    deformation_amplitude: float
    image: str  # paths relative to the manifest directory
    binary: str
    multi: str
    trachea_axis: list[list[float]] = field(default_factory=list)


@dataclass
class AtlasRecord:
    anomaly: str
    image: str
    labels: str
    trachea_axis: list[list[float]] = field(default_factory=list)


@dataclass
class CohortManifest:
    root: Path
    dims: int
    spacing: float
    seed: int
    generator_version: int
    subjects: list[SubjectRecord]
    atlases: dict[str, AtlasRecord]
    prepared: bool = False  # True once volumes live in atlas-frame crops

    def subjects_in(self, split: str | None = None) -> list[SubjectRecord]:
        if split is None:
            return list(self.subjects)
        if split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {split!r}")
        return [s for s in self.subjects if s.split == split]

    def subject(self, sid: str) -> SubjectRecord:
        for s in self.subjects:
            if s.sid == sid:
                return s
        raise KeyError(sid)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def load_volume(self, rel: str) -> Volume3D:
        vol = read_vox(self.path(rel))
        if not isinstance(vol, Volume3D):
            raise CohortError(f"{rel} is not an image volume")
        return vol

    def load_labels(self, rel: str) -> LabelMap:
        lab = read_vox(self.path(rel))
        if not isinstance(lab, LabelMap):
            raise CohortError(f"{rel} is not a label map")
        return lab

    def save(self) -> Path:
        payload = {
            "format": MANIFEST_FORMAT,
            "generator_version": self.generator_version,
            "dims": self.dims,
            "spacing": self.spacing,
            "seed": self.seed,
            "prepared": self.prepared,
            "atlases": {k: asdict(v) for k, v in sorted(self.atlases.items())},
            "subjects": [asdict(s) for s in self.subjects],
        }
        out = self.root / MANIFEST_NAME
        out.write_text(json.dumps(payload, indent=1, sort_keys=True))
        return out


def load_manifest(root: str | Path) -> CohortManifest:
    root = Path(root)
    raw = json.loads((root / MANIFEST_NAME).read_text())
    if raw.get("format") != MANIFEST_FORMAT:
        raise CohortError(f"unsupported manifest format {raw.get('format')!r}")
    return CohortManifest(
        root=root,
        dims=int(raw["dims"]),
        spacing=float(raw["spacing"]),
        seed=int(raw["seed"]),
        generator_version=int(raw["generator_version"]),
        subjects=[SubjectRecord(**s) for s in raw["subjects"]],
        atlases={k: AtlasRecord(**v) for k, v in raw["atlases"].items()},
        prepared=bool(raw.get("prepared", False)),
    )


def split_counts(n_per_class: dict[str, int]) -> dict[str, dict[str, int]]:
    """Per-class train/val/test sizes.

    Test counts follow the reference proportions, rounded; validation is a
    fixed 3 per class. Classes too small to leave at least one training
    subject are an error.
    """
    out: dict[str, dict[str, int]] = {}
    for anomaly in ANOMALIES:
        n = int(n_per_class[anomaly])
        n_test = max(
            1, round(REFERENCE_TEST[anomaly] * n / REFERENCE_N[anomaly])
        )
        n_val = VAL_PER_CLASS
        n_train = n - n_test - n_val
        if n_train < 1:
            raise CohortError(
                f"{anomaly}: {n} subjects cannot cover test {n_test} + "
                f"val {n_val} + at least 1 train"
            )
        out[anomaly] = {"train": n_train, "val": n_val, "test": n_test}
    return out


def partition_cohort(
    n_per_class: dict[str, int] | None = None,
    seed: int = 0,
    root: str | Path = ".",
    dims: int = DEFAULT_DIMS,
    spacing: float = 1.0,
    tier_probs: tuple[float, float, float] = TIER_PROBS,
) -> CohortManifest:
    """Plan a stratified cohort roster; nothing is written to disk.

    One seeded stream drives every random choice (split assignment, tier,
    per-subject generation parameters), so the roster is a pure function
    of its arguments.
    """
    if n_per_class is None:
        n_per_class = dict(REFERENCE_N)
    missing = [a for a in ANOMALIES if a not in n_per_class]
    if missing:
        raise CohortError(f"n_per_class missing {missing}")
    counts = split_counts(n_per_class)
    rng = np.random.default_rng(seed)

    subjects: list[SubjectRecord] = []
    atlases: dict[str, AtlasRecord] = {}
    for anomaly in ANOMALIES:
        atlases[anomaly] = AtlasRecord(
            anomaly=anomaly,
            image=f"atlases/{anomaly}.img.vox",
            labels=f"atlases/{anomaly}.lab.vox",
        )
        n = int(n_per_class[anomaly])
        c = counts[anomaly]
        splits = (
            ["test"] * c["test"] + ["val"] * c["val"] + ["train"] * c["train"]
        )
        order = rng.permutation(n)
        assigned = [""] * n
        for rank, idx in enumerate(order):
            assigned[idx] = splits[rank]
        for i in range(n):
            sid = f"{anomaly}{i:04d}"
            tier = int(rng.choice((1, 2, 3), p=tier_probs))
            scale = float(rng.uniform(*SCALE_RANGE))
            ratio = (
                float(rng.uniform(*COARCT_RANGE)) if anomaly == "CoA" else None
            )
            amp = float(rng.uniform(*DEFORM_RANGE))
            gen_seed = int(rng.integers(1, 2**31 - 1))
            subjects.append(
                SubjectRecord(
                    sid=sid,
                    anomaly=anomaly,
                    split=assigned[i],
                    tier=tier,
                    gen_seed=gen_seed,
                    scale=scale,
                    coarct_ratio=ratio,
                    deformation_amplitude=amp,
                    image=f"subjects/{sid}.img.vox",
                    binary=f"subjects/{sid}.bin.vox",
                    multi=f"subjects/{sid}.multi.vox",
                )
            )
    return CohortManifest(
        root=Path(root),
        dims=dims,
        spacing=spacing,
        seed=seed,
        generator_version=PHANTOM_VERSION,
        subjects=subjects,
        atlases=atlases,
    )


def _spec_for(rec: SubjectRecord) -> PhantomSpec:
    return PhantomSpec(
        anomaly=rec.anomaly,
        seed=rec.gen_seed,
        scale=rec.scale,
        coarct_ratio=rec.coarct_ratio,
        tier=rec.tier,
        deformation_amplitude=rec.deformation_amplitude,
    )


def build_cohort(
    out_dir: str | Path,
    n_per_class: dict[str, int] | None = None,
    seed: int = 0,
    dims: int = DEFAULT_DIMS,
    spacing: float = 1.0,
    tier_probs: tuple[float, float, float] = TIER_PROBS,
) -> CohortManifest:
    """Generate every phantom in a planned roster and write the cohort."""
    out_dir = Path(out_dir)
    man = partition_cohort(n_per_class, seed, out_dir, dims, spacing, tier_probs)
    (out_dir / "atlases").mkdir(parents=True, exist_ok=True)
    (out_dir / "subjects").mkdir(parents=True, exist_ok=True)

    for anomaly, rec in man.atlases.items():
        img, lab = build_atlas(anomaly, dims=dims, spacing=spacing)
        write_vox(man.path(rec.image), normalize_intensity(img))
        write_vox(man.path(rec.labels), lab)
        axis = _atlas_axis(anomaly, dims, spacing)
        rec.trachea_axis = axis.tolist()

    for rec in man.subjects:
        sample = generate_subject(_spec_for(rec), dims=dims, spacing=spacing)
        write_vox(man.path(rec.image), normalize_intensity(sample.image))
        write_vox(man.path(rec.binary), sample.labels_binary)
        write_vox(man.path(rec.multi), sample.labels_multi)
        rec.trachea_axis = np.asarray(sample.meta.trachea_axis).tolist()
    man.save()
    return man


def _atlas_axis(anomaly: str, dims: int, spacing: float) -> np.ndarray:
    from archseg.phantom import atlas_sample

    sample = atlas_sample(anomaly, dims=dims, spacing=spacing)
    return np.asarray(sample.meta.trachea_axis)


# ---------------------------------------------------------------------------
# pre-alignment stage
# ---------------------------------------------------------------------------


def _axis_to_frame(
    axis: np.ndarray,
    affine: AffineTransform,
    spacing: float,
    lo: tuple[int, int, int],
) -> np.ndarray:
    """Map subject-frame voxel points into the cropped atlas frame.

    The alignment affine maps atlas physical points to subject physical
    points, so metadata travels through its inverse.
    """
    inv = affine.inverse()
    q = axis * spacing
    p = (inv.matrix @ q.T + inv.translation[:, None]).T
    return p / spacing - np.asarray(lo, dtype=np.float64)


def prepare_cohort(
    man: CohortManifest,
    out_dir: str | Path,
    roi: tuple[tuple[int, int, int], tuple[int, int, int]] = DEFAULT_ROI,
    affine_iterations: int = 120,
) -> CohortManifest:
    """Affinely align each subject into its anomaly atlas frame and crop.

    Writes a new cohort directory whose volumes all share the cropped
    atlas geometry; the trachea axes are carried through the transforms.
    """
    if man.prepared:
        raise CohortError("cohort is already prepared")
    out_dir = Path(out_dir)
    (out_dir / "atlases").mkdir(parents=True, exist_ok=True)
    (out_dir / "subjects").mkdir(parents=True, exist_ok=True)
    lo, hi = roi
    out_dims = hi[0] - lo[0]

    atlas_full: dict[str, Volume3D] = {}
    out_atlases: dict[str, AtlasRecord] = {}
    for anomaly, rec in man.atlases.items():
        img = man.load_volume(rec.image)
        lab = man.load_labels(rec.labels)
        atlas_full[anomaly] = img
        cropped_axis = np.asarray(rec.trachea_axis, dtype=np.float64) - np.asarray(
            lo, dtype=np.float64
        )
        out_rec = AtlasRecord(
            anomaly=anomaly,
            image=rec.image,
            labels=rec.labels,
            trachea_axis=cropped_axis.tolist(),
        )
        write_vox(out_dir / rec.image, crop_roi(img, roi))
        write_vox(out_dir / rec.labels, crop_roi(lab, roi))
        out_atlases[anomaly] = out_rec

    out_subjects: list[SubjectRecord] = []
    for rec in man.subjects:
        img = man.load_volume(rec.image)
        aff = affine_align(
            atlas_full[rec.anomaly], img, iterations=affine_iterations
        )
        img_a = crop_roi(affine_apply(img, aff), roi)
        bin_a = crop_roi(affine_apply_labels(man.load_labels(rec.binary), aff), roi)
        multi_a = crop_roi(affine_apply_labels(man.load_labels(rec.multi), aff), roi)
        axis = _axis_to_frame(
            np.asarray(rec.trachea_axis, dtype=np.float64), aff, man.spacing, lo
        )
        out_rec = replace(rec, trachea_axis=axis.tolist())
        write_vox(out_dir / rec.image, img_a)
        write_vox(out_dir / rec.binary, bin_a)
        write_vox(out_dir / rec.multi, multi_a)
        out_subjects.append(out_rec)

    out_man = CohortManifest(
        root=out_dir,
        dims=out_dims,
        spacing=man.spacing,
        seed=man.seed,
        generator_version=man.generator_version,
        subjects=out_subjects,
        atlases=out_atlases,
        prepared=True,
    )
    out_man.save()
    return out_man
