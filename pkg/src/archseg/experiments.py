"""Staged experiment pipelines over phantom cohorts.

``run_experiment`` drives cohort generation, label propagation, the
segmenter/classifier trainings selected by the experiment id, and test
evaluation into a directory tree of artifacts. Shared stages (cohort,
propagation) cache under the cohort directory keyed by the hash of the
configuration keys they depend on; a stale hash refuses to overwrite.
Failures leave partial artifacts behind plus a machine-readable
``failure.json`` naming the stage.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from archseg import classification as cls
from archseg import cohort as co
from archseg import registration as rg
from archseg import report as rp
from archseg import segmentation as sg
from archseg.autodiff.params import save_checkpoint
from archseg.config import (
    Config,
    ConfigError,
    base_id_of,
    classifier_mode_of,
    config_hash,
    canonical_text,
)
from archseg.grid import LabelMap
from archseg.voxio import read_vox, write_vox

WEAK_FRACTIONS = (0.0, 0.05, 0.25, 0.50, 0.75, 1.0)


class StageFailure(RuntimeError):
    """A pipeline stage died; maps to CLI exit code 3."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _subset_hash(cfg: Config, prefixes: tuple[str, ...]) -> str:
    sub = {k: v for k, v in cfg.items() if k.startswith(prefixes)}
    import hashlib

    text = "\n".join(f"{k} = {sub[k]}" for k in sorted(sub))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _check_lock(dir_: Path, expected: str, what: str) -> bool:
    """True when the stage output exists and matches; error on mismatch."""
    lock = dir_ / "config.lock"
    if not lock.exists():
        return False
    found = lock.read_text().strip()
    if found != expected:
        raise ConfigError(
            f"{what} at {dir_} was produced under config {found}, "
            f"current is {expected}; refusing to overwrite"
        )
    return True


def _write_lock(dir_: Path, value: str) -> None:
    (dir_ / "config.lock").write_text(value + "\n")


def ensure_cohort(cfg: Config) -> tuple[co.CohortManifest, co.CohortManifest]:
    """Build and prepare the cohort unless a matching one already exists."""
    root = Path(str(cfg["cohort.dir"]))
    h = _subset_hash(cfg, ("cohort.",))
    native_dir, prep_dir = root / "native", root / "prep"
    if not _check_lock(root, h, "cohort"):
        root.mkdir(parents=True, exist_ok=True)
        dims = int(cfg["cohort.dims"])
        roi_n = int(cfg["cohort.roi"])
        lo = (dims - roi_n) // 2
        man = co.build_cohort(
            native_dir, dict(cfg["cohort.size"]), seed=int(cfg["cohort.seed"]),
            dims=dims,
        )
        co.prepare_cohort(
            man, prep_dir,
            roi=((lo,) * 3, (lo + roi_n,) * 3),
        )
        _write_lock(root, h)
    return co.load_manifest(native_dir), co.load_manifest(prep_dir)


def ensure_propagation(cfg: Config, prep: co.CohortManifest) -> dict[str, LabelMap]:
    """Instance-mode label propagation for every subject, cached on disk."""
    root = Path(str(cfg["cohort.dir"]))
    h = _subset_hash(cfg, ("cohort.", "register."))
    prop_dir = root / "prop"
    if not _check_lock(prop_dir, h, "propagation"):
        prop_dir.mkdir(parents=True, exist_ok=True)
        reg_cfg = rg.RegConfig(
            mode="instance", iterations=int(cfg["register.iterations"])
        )
        for rec in prep.subjects:
            moving_img = prep.load_volume(prep.atlases[rec.anomaly].image)
            moving_lab = prep.load_labels(prep.atlases[rec.anomaly].labels)
            phi = rg.instance_optimize(prep.load_volume(rec.image), moving_img, reg_cfg)
            write_vox(prop_dir / f"{rec.sid}.vox", rg.propagate_labels(moving_lab, phi))
        _write_lock(prop_dir, h)
    return read_propagation(prep, prop_dir)


def read_propagation(
    prep: co.CohortManifest, prop_dir: str | Path
) -> dict[str, LabelMap]:
    """Load per-subject propagated label files (<sid>.vox) from a directory."""
    out: dict[str, LabelMap] = {}
    for rec in prep.subjects:
        lab = read_vox(Path(prop_dir) / f"{rec.sid}.vox")
        out[rec.sid] = LabelMap(lab.codes, lab.spacing)
    return out


def _seg_train_config(cfg: Config, seed: int) -> sg.TrainConfig:
    return sg.TrainConfig(
        epochs=int(cfg["seg.epochs"]),
        batch_size=int(cfg["seg.batch_size"]),
        lr0=float(cfg["seg.lr0"]),
        lambda2_0=float(cfg["seg.lambda2_0"]),
        lambda2_period=int(cfg["seg.lambda2_period"]),
        weak_fraction=float(cfg["experiment.weak_fraction"]),
        patience=int(cfg["seg.patience"]),
        augment=bool(cfg["seg.augment"]),
        seed=seed,
    )


_VARIANT_BY_ID = {
    "AttUNet-LP": "lp",
    "AttUNet-Man": "man",
    "AttUNet-LP+Man": "lp-man",
    "Man+Split": "man",
}


def _predict_test(
    base_id: str,
    prep: co.CohortManifest,
    propagated: dict[str, LabelMap],
    seg_net: sg.AttentionUNet | None,
    split_net: sg.AttentionUNet | None,
) -> dict[str, LabelMap]:
    """Per-subject test predictions under the experiment's id semantics."""
    preds: dict[str, LabelMap] = {}
    for rec in prep.subjects_in("test"):
        if base_id == "LP":
            preds[rec.sid] = propagated[rec.sid]
        elif base_id == "Split":
            preds[rec.sid] = sg.apply_split(split_net, prep.load_labels(rec.binary))
        elif base_id == "Man+Split":
            binary = sg.predict_binary(seg_net, prep.load_volume(rec.image))
            preds[rec.sid] = sg.apply_split(split_net, binary)
        elif base_id == "AttUNet-Man":
            preds[rec.sid] = sg.predict_binary(seg_net, prep.load_volume(rec.image))
        else:
            preds[rec.sid] = sg.predict_labels(seg_net, prep.load_volume(rec.image))
    return preds


def _evaluate(
    prep: co.CohortManifest,
    preds: dict[str, LabelMap],
    anomalies_pred: dict[str, str] | None = None,
    with_topology: bool = True,
) -> rp.MetricsReport:
    subs = []
    for rec in prep.subjects_in("test"):
        # binary-only predictions carry no arch class, so grading their
        # arch structure would score the whole vessel mask; skip instead
        axis = np.asarray(rec.trachea_axis) if with_topology else None
        subs.append(rp.evaluate_subject(
            rec.sid, preds[rec.sid], prep.load_labels(rec.multi), rec.anomaly,
            trachea_axis=axis,
            predicted_anomaly=(anomalies_pred or {}).get(rec.sid),
        ))
    return rp.build_report(subs)


def _classifier_predictions(
    cls_net: cls.DenseClassifier,
    seg_net: sg.AttentionUNet | None,
    prep: co.CohortManifest,
) -> dict[str, str]:
    out: dict[str, str] = {}
    mode = cls_net.cfg.mode
    for rec in prep.subjects_in("test"):
        img = prep.load_volume(rec.image).data.astype(np.float32)
        proba = sg.predict_proba(seg_net, img) if mode in cls.SEG_COUPLED else None
        name, _ = cls.predict_anomaly(
            cls_net, image=img if mode in ("image", "img-multi") else None,
            seg_proba=proba,
        )
        out[rec.sid] = name
    return out


def _run_stage(run_dir: Path, stage: str, fn):
    try:
        return fn()
    except Exception as e:
        record = {"stage": stage, "error": type(e).__name__, "message": str(e)}
        (run_dir / "failure.json").write_text(json.dumps(record, indent=1) + "\n")
        raise StageFailure(stage, e) from e


def run_dir_for(cfg: Config, seed: int) -> Path:
    exp_id = str(cfg["experiment.id"])
    frac = float(cfg["experiment.weak_fraction"])
    safe = exp_id.replace("(", "-").replace(")", "").replace("+", "_")
    name = f"{safe}-w{int(round(frac * 100))}-s{seed}"
    return Path(str(cfg["experiment.out"])) / name


def run_experiment(cfg: Config, seed: int | None = None) -> list[Path]:
    """Execute the configured pipeline; one run directory per seed.

    Returns the run directories. Each holds the checkpoints its id calls
    for, ``report.json``/``report.csv`` on the test split (plus joint
    variants when a classifier is attached), and ``run.json`` recording
    the seed, config hash, and stage list. A failing stage leaves
    ``failure.json`` behind and raises ``StageFailure``.
    """
    exp_id = str(cfg["experiment.id"])
    base_id = base_id_of(exp_id)
    mode = classifier_mode_of(exp_id)
    h = config_hash(cfg)
    seeds = (seed,) if seed is not None else tuple(cfg["experiment.seeds"])

    _, prep = ensure_cohort(cfg)
    needs_prop = base_id in ("LP", "AttUNet-LP", "AttUNet-LP+Man", "Man+Split", "Split")
    propagated = ensure_propagation(cfg, prep) if needs_prop else {}

    out_dirs = []
    for s in seeds:
        run_dir = run_dir_for(cfg, s)
        if _check_lock(run_dir, h, "run") and (run_dir / "run.json").exists():
            out_dirs.append(run_dir)
            continue
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_lock(run_dir, h)
        (run_dir / "config.cfg").write_text(canonical_text(cfg))
        stages: list[str] = []

        seg_net = split_net = None
        lambda2 = 0.0
        if base_id in _VARIANT_BY_ID:
            variant = _VARIANT_BY_ID[base_id]
            tc = _seg_train_config(cfg, s)
            res = _run_stage(run_dir, "segmenter", lambda: sg.train_segmenter(
                prep, propagated if variant in ("lp", "lp-man") else None,
                variant, tc,
            ))
            seg_net, lambda2 = res.net, res.lambda2_at_best
            save_checkpoint(run_dir / "segmenter.ckpt", seg_net.ps)
            stages.append("segmenter")
        if base_id in ("Split", "Man+Split"):
            tc = _seg_train_config(cfg, s)
            res = _run_stage(run_dir, "splitter", lambda: sg.train_splitting_net(
                prep, propagated, tc,
            ))
            split_net = res.net
            save_checkpoint(run_dir / "splitter.ckpt", split_net.ps)
            stages.append("splitter")

        preds = _run_stage(run_dir, "evaluate", lambda: _predict_test(
            base_id, prep, propagated, seg_net, split_net))

        multi_out = base_id != "AttUNet-Man"
        if mode is None:
            report = _run_stage(run_dir, "evaluate", lambda: _evaluate(
                prep, preds, with_topology=multi_out))
            _write_report(run_dir, "report", report, h)
            stages.append("evaluate")
        else:
            ctc = cls.ClsTrainConfig(epochs=int(cfg["cls.epochs"]), seed=s)
            sep = _run_stage(run_dir, "classifier", lambda: cls.train_classifier_frozen(
                seg_net, prep, mode, ctc))
            save_checkpoint(run_dir / "classifier.ckpt", sep.net.ps)
            stages.append("classifier")
            guesses = _classifier_predictions(sep.net, seg_net, prep)
            report = _run_stage(run_dir, "evaluate", lambda: _evaluate(
                prep, preds, guesses, with_topology=multi_out))
            _write_report(run_dir, "report", report, h)
            stages.append("evaluate")

            if mode in cls.SEG_COUPLED and base_id in _VARIANT_BY_ID:
                jc = cls.JointConfig(
                    lambda4=float(cfg["cls.lambda4"]),
                    epochs=int(cfg["cls.joint_epochs"]), seed=s,
                )
                variant = _VARIANT_BY_ID[base_id]
                joint = _run_stage(run_dir, "joint", lambda: cls.train_joint(
                    seg_net, sep.net, prep,
                    propagated if variant in ("lp", "lp-man") else None,
                    variant, lambda2, jc, _seg_train_config(cfg, s),
                ))
                save_checkpoint(run_dir / "segmenter-joint.ckpt", joint.seg_net.ps)
                save_checkpoint(run_dir / "classifier-joint.ckpt", joint.cls_net.ps)
                stages.append("joint")
                preds_j = _run_stage(run_dir, "evaluate-joint", lambda: _predict_test(
                    base_id, prep, propagated, joint.seg_net, split_net))
                guesses_j = _classifier_predictions(joint.cls_net, joint.seg_net, prep)
                report_j = _run_stage(run_dir, "evaluate-joint", lambda: _evaluate(
                    prep, preds_j, guesses_j, with_topology=multi_out))
                _write_report(run_dir, "report-joint", report_j, h)
                stages.append("evaluate-joint")

        (run_dir / "run.json").write_text(json.dumps({
            "experiment": exp_id,
            "seed": s,
            "config_hash": h,
            "generator_version": prep.generator_version,
            "stages": stages,
        }, indent=1, sort_keys=True) + "\n")
        out_dirs.append(run_dir)
    return out_dirs


def _write_report(run_dir: Path, name: str, report: rp.MetricsReport, h: str) -> None:
    payload = json.loads(rp.to_json(report))
    payload["config_hash"] = h
    text = json.dumps(payload, sort_keys=True, indent=1) + "\n"
    (run_dir / f"{name}.json").write_text(text)
    (run_dir / f"{name}.csv").write_text(rp.to_csv(report))


def load_report(path: Path) -> rp.MetricsReport:
    raw = json.loads(Path(path).read_text())
    raw.pop("config_hash", None)
    return rp.from_json(json.dumps(raw))


def weak_supervision_sweep(cfg: Config, seed: int = 0) -> dict[str, object]:
    """Metrics across manual-label fractions {0, 5, 25, 50, 75, 100}%.

    The endpoints reuse the plain experiments they equal by definition:
    0% is AttUNet-LP and 100% is AttUNet-LP+Man.
    """
    results: dict[str, object] = {"fractions": [], "seed": seed}
    for frac in WEAK_FRACTIONS:
        sub = dict(cfg)
        sub["experiment.id"] = "AttUNet-LP" if frac == 0.0 else "AttUNet-LP+Man"
        sub["experiment.weak_fraction"] = 1.0 if frac == 0.0 else frac
        run_dir = run_experiment(sub, seed=seed)[0]
        report = load_report(run_dir / "report.json")
        arch = report.aggregates["arch"]["dice"]
        vessels = report.aggregates["vessels"]["dice"]
        results["fractions"].append({
            "fraction": frac,
            "run_dir": str(run_dir),
            "arch_dice_mean": arch["mean"],
            "arch_dice_ci95": arch["ci95"],
            "vessels_dice_mean": vessels["mean"],
            "vessels_dice_ci95": vessels["ci95"],
        })
    out = Path(str(cfg["experiment.out"])) / f"weak-sweep-s{seed}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")
    return results
