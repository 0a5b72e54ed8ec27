"""Per-subject evaluation tables, aggregates and serialization.

A report collects one row per subject and vessel class (Dice, precision,
recall, surface distances), a joined all-vessels row, the structural arch
grade, and optional anomaly predictions. Aggregates carry means, SDs and
bootstrap confidence intervals; surface distances aggregate only over
subjects where they are defined. Serialization is canonical-key JSON plus
a flat CSV with one line per subject-class row.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from archseg import metrics
from archseg.cohort import CohortManifest
from archseg.grid import ANOMALIES, LabelMap, scheme_for
from archseg.segmentation import AttentionUNet
from archseg.stats import bootstrap_ci
from archseg.topology import TopologyConfig, TopologyScore, topology_score

JOINED_NAME = "vessels"  # the all-foreground ROI row


@dataclass(frozen=True)
class ClassRow:
    """Overlap and surface metrics of one class for one subject."""

    code: int
    name: str
    dice: float
    precision: float
    recall: float
    trivially_empty: bool
    asd_mm: float | None  # None marks undefined (empty mask), excluded
    hd95_mm: float | None  # from aggregates rather than poisoning them


@dataclass(frozen=True)
class SubjectReport:
    sid: str
    anomaly: str
    rows: tuple[ClassRow, ...]
    topology: TopologyScore | None = None
    predicted_anomaly: str | None = None


@dataclass(frozen=True)
class MetricsReport:
    subjects: tuple[SubjectReport, ...]
    aggregates: dict[str, dict[str, float | int | list[float] | None]]
    confusion: list[list[int]] | None = None
    accuracy: float | None = None
    balanced_accuracy: float | None = None


def evaluate_subject(
    sid: str,
    pred: LabelMap,
    gt: LabelMap,
    anomaly: str,
    trachea_axis: np.ndarray | None = None,
    predicted_anomaly: str | None = None,
    topo_cfg: TopologyConfig = TopologyConfig(),
) -> SubjectReport:
    """All per-class metrics of one prediction, plus the joined ROI row."""
    scheme = scheme_for(anomaly)
    rows = []
    for name in scheme.names:
        c = scheme.code(name)
        ov = metrics.overlap(pred, gt, c)
        rows.append(ClassRow(
            code=c, name=name, dice=ov.dice, precision=ov.precision,
            recall=ov.recall, trivially_empty=ov.trivially_empty,
            asd_mm=metrics.asd(pred, gt, c), hd95_mm=metrics.hd95(pred, gt, c),
        ))
    pj, gj = metrics.joined(pred), metrics.joined(gt)
    ov = metrics.overlap(pj, gj, 1)
    rows.append(ClassRow(
        code=0, name=JOINED_NAME, dice=ov.dice, precision=ov.precision,
        recall=ov.recall, trivially_empty=ov.trivially_empty,
        asd_mm=metrics.asd(pj, gj, 1), hd95_mm=metrics.hd95(pj, gj, 1),
    ))
    topo = None
    if trachea_axis is not None:
        topo = topology_score(pred, anomaly, trachea_axis, topo_cfg)
    return SubjectReport(
        sid=sid, anomaly=anomaly, rows=tuple(rows), topology=topo,
        predicted_anomaly=predicted_anomaly,
    )


def confusion_matrix(truths: list[str], preds: list[str]) -> np.ndarray:
    """3x3 anomaly counts, rows true and columns predicted."""
    if len(truths) != len(preds):
        raise ValueError("truths and preds must have the same length")
    if not truths:
        raise ValueError("empty input")
    m = np.zeros((len(ANOMALIES), len(ANOMALIES)), dtype=np.int64)
    for t, p in zip(truths, preds):
        m[ANOMALIES.index(t), ANOMALIES.index(p)] += 1
    return m


def accuracy(truths: list[str], preds: list[str]) -> float:
    m = confusion_matrix(truths, preds)
    return float(np.trace(m) / m.sum())


def balanced_accuracy(truths: list[str], preds: list[str]) -> float:
    """Mean per-class recall over the classes present in the truths."""
    m = confusion_matrix(truths, preds)
    totals = m.sum(axis=1)
    recalls = [m[i, i] / t for i, t in enumerate(totals) if t > 0]
    return float(np.mean(recalls))


def _mean_sd_ci(values: list[float], seed: int) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    out = {
        "n": int(arr.size),
        "mean": float(arr.mean()),
        "sd": float(arr.std(ddof=1)) if arr.size > 1 else None,
    }
    out["ci95"] = list(bootstrap_ci(arr, seed=seed)) if arr.size > 1 else None
    return out


def build_report(
    subjects: list[SubjectReport], ci_seed: int = 0
) -> MetricsReport:
    """Aggregate per-class metrics over subjects; classification if present.

    Surface-distance aggregates include a ``n_defined`` count; subjects
    where a distance is undefined simply do not contribute to it.
    """
    if not subjects:
        raise ValueError("no subjects to aggregate")
    by_name: dict[str, list[ClassRow]] = {}
    for sub in subjects:
        for row in sub.rows:
            by_name.setdefault(row.name, []).append(row)
    aggregates: dict[str, dict] = {}
    for name in sorted(by_name):
        rows = by_name[name]
        agg = {"dice": _mean_sd_ci([r.dice for r in rows], ci_seed)}
        agg["precision"] = _mean_sd_ci([r.precision for r in rows], ci_seed)
        agg["recall"] = _mean_sd_ci([r.recall for r in rows], ci_seed)
        for key in ("asd_mm", "hd95_mm"):
            vals = [getattr(r, key) for r in rows if getattr(r, key) is not None]
            agg[key] = _mean_sd_ci(vals, ci_seed) if vals else None
            if agg[key] is not None:
                agg[key]["n_defined"] = len(vals)
        aggregates[name] = agg
    topo_scores = [s.topology.score for s in subjects if s.topology is not None]
    if topo_scores:
        counts = {str(k): topo_scores.count(k) for k in (1, 2, 3)}
        aggregates["topology"] = counts

    confusion = acc = bal = None
    labeled = [(s.anomaly, s.predicted_anomaly) for s in subjects
               if s.predicted_anomaly is not None]
    if labeled:
        truths = [t for t, _ in labeled]
        preds = [p for _, p in labeled]
        confusion = confusion_matrix(truths, preds).tolist()
        acc = accuracy(truths, preds)
        bal = balanced_accuracy(truths, preds)
    return MetricsReport(
        subjects=tuple(subjects), aggregates=aggregates,
        confusion=confusion, accuracy=acc, balanced_accuracy=bal,
    )


def to_json(report: MetricsReport) -> str:
    """Canonical serialization: sorted keys, fixed indentation."""
    return json.dumps(asdict(report), sort_keys=True, indent=1)


def from_json(text: str) -> MetricsReport:
    raw = json.loads(text)
    subjects = []
    for s in raw["subjects"]:
        rows = tuple(ClassRow(**r) for r in s["rows"])
        topo = TopologyScore(**s["topology"]) if s["topology"] else None
        subjects.append(SubjectReport(
            sid=s["sid"], anomaly=s["anomaly"], rows=rows, topology=topo,
            predicted_anomaly=s["predicted_anomaly"],
        ))
    return MetricsReport(
        subjects=tuple(subjects), aggregates=raw["aggregates"],
        confusion=raw["confusion"], accuracy=raw["accuracy"],
        balanced_accuracy=raw["balanced_accuracy"],
    )


_CSV_FIELDS = (
    "sid", "anomaly", "predicted_anomaly", "topology_score",
    "topology_reason", "class_code", "class_name", "dice", "precision",
    "recall", "trivially_empty", "asd_mm", "hd95_mm",
)


def to_csv(report: MetricsReport) -> str:
    """One line per subject-class row; missing values stay empty."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=_CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for sub in report.subjects:
        for row in sub.rows:
            w.writerow({
                "sid": sub.sid,
                "anomaly": sub.anomaly,
                "predicted_anomaly": sub.predicted_anomaly or "",
                "topology_score": sub.topology.score if sub.topology else "",
                "topology_reason": sub.topology.reason if sub.topology else "",
                "class_code": row.code,
                "class_name": row.name,
                "dice": repr(row.dice),
                "precision": repr(row.precision),
                "recall": repr(row.recall),
                "trivially_empty": int(row.trivially_empty),
                "asd_mm": "" if row.asd_mm is None else repr(row.asd_mm),
                "hd95_mm": "" if row.hd95_mm is None else repr(row.hd95_mm),
            })
    return buf.getvalue()


def export_latent(
    net: AttentionUNet, man: CohortManifest, split: str | None = None
) -> tuple[np.ndarray, list[str], str]:
    """Bottleneck features per subject with the anomaly label, as CSV.

    Features are the segmenter's global-average-pooled bottleneck
    activations in evaluation mode. Returns (features, anomalies, csv).
    """
    from archseg.segmentation import bottleneck_features

    recs = man.subjects if split is None else man.subjects_in(split)
    if not recs:
        raise ValueError(f"no subjects in split {split!r}")
    feats = []
    anomalies = []
    for rec in recs:
        vol = man.load_volume(rec.image)
        feats.append(bottleneck_features(net, vol))
        anomalies.append(rec.anomaly)
    arr = np.stack(feats)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sid", "anomaly"] + [f"f{i}" for i in range(arr.shape[1])])
    for rec, row in zip(recs, arr):
        w.writerow([rec.sid, rec.anomaly] + [repr(float(v)) for v in row])
    return arr, anomalies, buf.getvalue()
