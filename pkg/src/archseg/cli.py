"""Command-line entry point.

Subcommand groups mirror the pipeline stages: ``cohort`` (phantom
generation and atlas-frame preparation), ``register`` (deformable
alignment and label propagation), ``seg`` (segmenter training and
inference), ``cls`` (anomaly classifier training), ``run``/``ablate``
(configured experiment pipelines), and ``report`` (render stored metrics).

Exit codes: 0 success, 2 configuration error (including bad arguments),
3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from archseg import classification as cls
from archseg import cohort as co
from archseg import experiments as ex
from archseg import registration as rg
from archseg import report as rp
from archseg import segmentation as sg
from archseg.autodiff.params import CheckpointError, ParamSet, load_checkpoint, save_checkpoint
from archseg.config import CLS_MODES, Config, ConfigError, dump_defaults, load_config
from archseg.grid import LabelMap, Volume3D
from archseg.voxio import VoxError, read_vox, write_vox


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not of the form key=value")
        out[key.strip()] = value.strip()
    return out


def _config_from(args: argparse.Namespace) -> Config:
    return load_config(args.config, _parse_overrides(args.set or []))


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="key-value config file")
    p.add_argument(
        "--set",
        metavar="KEY=VALUE",
        action="append",
        help="override one config entry (repeatable)",
    )


def _load_into(ps: ParamSet, path: str) -> None:
    ps.load_state(load_checkpoint(path))


def _read_volume(path: str) -> Volume3D:
    obj = read_vox(path)
    if not isinstance(obj, Volume3D):
        raise VoxError(f"{path}: expected an image volume, found {type(obj).__name__}")
    return obj


def _read_labels(path: str) -> LabelMap:
    obj = read_vox(path)
    if not isinstance(obj, LabelMap):
        raise VoxError(f"{path}: expected a label map, found {type(obj).__name__}")
    return obj


# -- cohort -------------------------------------------------------------------


def _cmd_cohort_build(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    man = co.build_cohort(
        args.out,
        dict(cfg["cohort.size"]),
        seed=int(cfg["cohort.seed"]),
        dims=int(cfg["cohort.dims"]),
    )
    print(f"built {len(man.subjects)} subjects under {args.out}")
    return 0


def _cmd_cohort_prepare(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    man = co.load_manifest(args.cohort)
    dims = int(cfg["cohort.dims"])
    roi_n = int(cfg["cohort.roi"])
    lo = (dims - roi_n) // 2
    prep = co.prepare_cohort(man, args.out, roi=((lo,) * 3, (lo + roi_n,) * 3))
    print(f"prepared {len(prep.subjects)} subjects under {args.out}")
    return 0


# -- register -----------------------------------------------------------------


def _reg_config(args: argparse.Namespace, mode: str) -> rg.RegConfig:
    kw: dict[str, object] = {"mode": mode}
    if args.iterations is not None:
        kw["iterations"] = args.iterations
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    return rg.RegConfig(**kw)


def _cmd_register_train(args: argparse.Namespace) -> int:
    prep = co.load_manifest(args.cohort)
    pairs = [
        (
            prep.load_volume(rec.image),
            prep.load_volume(prep.atlases[rec.anomaly].image),
        )
        for rec in prep.subjects_in("train")
    ]
    net, losses = rg.train_reg_net(pairs, _reg_config(args, "amortized"))
    save_checkpoint(args.out, net.ps)
    print(f"trained on {len(pairs)} pairs, final loss {losses[-1]:.4f}, saved {args.out}")
    return 0


def _propagate_and_write(args: argparse.Namespace, phi) -> None:
    write_vox(args.out_field, phi)
    if args.out_labels:
        if not args.atlas_labels:
            raise ConfigError("--out-labels needs --atlas-labels")
        labels = rg.propagate_labels(_read_labels(args.atlas_labels), phi)
        write_vox(args.out_labels, labels)


def _cmd_register_apply(args: argparse.Namespace) -> int:
    net = rg.RegNet()
    _load_into(net.ps, args.ckpt)
    phi = net.predict(_read_volume(args.subject), _read_volume(args.atlas))
    _propagate_and_write(args, phi)
    print(f"wrote {args.out_field}" + (f" and {args.out_labels}" if args.out_labels else ""))
    return 0


def _cmd_register_instance(args: argparse.Namespace) -> int:
    phi = rg.instance_optimize(
        _read_volume(args.subject), _read_volume(args.atlas), _reg_config(args, "instance")
    )
    _propagate_and_write(args, phi)
    print(f"wrote {args.out_field}" + (f" and {args.out_labels}" if args.out_labels else ""))
    return 0


# -- seg ----------------------------------------------------------------------


def _seg_train_config(args: argparse.Namespace, cfg: Config) -> sg.TrainConfig:
    kw = dict(
        epochs=int(cfg["seg.epochs"]),
        batch_size=int(cfg["seg.batch_size"]),
        lr0=float(cfg["seg.lr0"]),
        lambda2_0=float(cfg["seg.lambda2_0"]),
        lambda2_period=int(cfg["seg.lambda2_period"]),
        patience=int(cfg["seg.patience"]),
        augment=bool(cfg["seg.augment"]),
        weak_fraction=args.weak_fraction,
        seed=args.seed,
    )
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    return sg.TrainConfig(**kw)


def _cmd_seg_train(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    prep = co.load_manifest(args.cohort)
    propagated = None
    if args.variant in ("lp", "lp-man"):
        if not args.prop:
            raise ConfigError(f"variant {args.variant} needs --prop DIR")
        propagated = ex.read_propagation(prep, args.prop)
    res = sg.train_segmenter(
        prep, propagated, args.variant, _seg_train_config(args, cfg)
    )
    save_checkpoint(args.out, res.net.ps)
    print(
        f"variant {args.variant}: best epoch {res.best_epoch}, "
        f"val loss {min(res.val_losses):.4f}, saved {args.out}"
    )
    return 0


def _cmd_seg_predict(args: argparse.Namespace) -> int:
    net = sg.AttentionUNet(sg.SegNetConfig())
    _load_into(net.ps, args.ckpt)
    image = _read_volume(args.image)
    out = sg.predict_binary(net, image) if args.binary else sg.predict_labels(net, image)
    write_vox(args.out, out)
    print(f"wrote {args.out}")
    return 0


def _cmd_seg_split(args: argparse.Namespace) -> int:
    net = sg.AttentionUNet(sg.SegNetConfig())
    _load_into(net.ps, args.ckpt)
    write_vox(args.out, sg.apply_split(net, _read_labels(args.binary)))
    print(f"wrote {args.out}")
    return 0


# -- cls ----------------------------------------------------------------------


def _cmd_cls_train(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    prep = co.load_manifest(args.cohort)
    seg_net = None
    if args.seg_ckpt:
        seg_net = sg.AttentionUNet(sg.SegNetConfig())
        _load_into(seg_net.ps, args.seg_ckpt)
    elif args.mode in cls.SEG_COUPLED or args.joint:
        raise ConfigError(f"mode {args.mode} needs --seg-ckpt")

    ctc = cls.ClsTrainConfig(epochs=int(cfg["cls.epochs"]), seed=args.seed)
    res = cls.train_classifier_frozen(seg_net, prep, args.mode, ctc)
    save_checkpoint(args.out, res.net.ps)
    print(f"classifier {args.mode}: best epoch {res.best_epoch}, saved {args.out}")

    if args.joint:
        propagated = None
        if args.variant in ("lp", "lp-man"):
            if not args.prop:
                raise ConfigError(f"joint variant {args.variant} needs --prop DIR")
            propagated = ex.read_propagation(prep, args.prop)
        jc = cls.JointConfig(
            lambda4=args.lambda4 if args.lambda4 is not None else float(cfg["cls.lambda4"]),
            epochs=int(cfg["cls.joint_epochs"]),
            seed=args.seed,
        )
        tc = sg.TrainConfig(
            epochs=int(cfg["seg.epochs"]),
            lambda2_0=float(cfg["seg.lambda2_0"]),
            lambda2_period=int(cfg["seg.lambda2_period"]),
            seed=args.seed,
        )
        joint = cls.train_joint(
            seg_net, res.net, prep, propagated, args.variant, args.lambda2, jc, tc
        )
        save_checkpoint(args.out, joint.cls_net.ps)
        if args.seg_out:
            save_checkpoint(args.seg_out, joint.seg_net.ps)
        refined = f", refined segmenter saved {args.seg_out}" if args.seg_out else ""
        print(f"joint refinement: best epoch {joint.best_epoch}{refined}")
    return 0


# -- run / ablate / report ----------------------------------------------------


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    for run_dir in ex.run_experiment(cfg, seed=args.seed):
        print(run_dir)
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    if args.suite == "labels":
        for exp_id in ("LP", "AttUNet-LP", "AttUNet-Man", "AttUNet-LP+Man"):
            sub = dict(cfg)
            sub["experiment.id"] = exp_id
            for run_dir in ex.run_experiment(sub):
                print(run_dir)
    elif args.suite == "weak":
        results = ex.weak_supervision_sweep(cfg)
        for row in results["fractions"]:
            print(
                f"fraction {row['fraction']:.2f}: arch dice "
                f"{row['arch_dice_mean']:.4f}  {row['run_dir']}"
            )
    else:
        for mode in CLS_MODES:
            sub = dict(cfg)
            sub["experiment.id"] = f"AttUNet-LP+Man+Classifier({mode})"
            for run_dir in ex.run_experiment(sub):
                print(run_dir)
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    path = Path(args.in_dir)
    if path.is_dir():
        path = path / "report.json"
    report = ex.load_report(path)
    if args.format == "json":
        print(rp.to_json(report))
    else:
        sys.stdout.write(rp.to_csv(report))
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="archseg",
        description="Vessel segmentation and arch-anomaly analysis on phantom cohorts.",
    )
    parser.add_argument(
        "--dump-defaults",
        action="store_true",
        help="print the full config schema with defaults and exit",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p_cohort = sub.add_parser("cohort", help="phantom cohort generation")
    cohort_sub = p_cohort.add_subparsers(dest="verb", required=True)
    p = cohort_sub.add_parser("build", help="generate a native-frame cohort")
    p.add_argument("--out", required=True, metavar="DIR")
    _add_config_args(p)
    p.set_defaults(func=_cmd_cohort_build)
    p = cohort_sub.add_parser("prepare", help="affine-align into atlas frames and crop")
    p.add_argument("--cohort", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    _add_config_args(p)
    p.set_defaults(func=_cmd_cohort_prepare)

    p_reg = sub.add_parser("register", help="deformable registration")
    reg_sub = p_reg.add_subparsers(dest="verb", required=True)
    p = reg_sub.add_parser("train", help="train the amortized field predictor")
    p.add_argument("--cohort", required=True, metavar="DIR", help="prepared cohort")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_register_train)
    for verb, fn in (("apply", _cmd_register_apply), ("instance", _cmd_register_instance)):
        p = reg_sub.add_parser(
            verb,
            help=(
                "predict a field with a trained network"
                if verb == "apply"
                else "optimize a field for one pair"
            ),
        )
        p.add_argument("--atlas", required=True, metavar="IMG.vox")
        p.add_argument("--subject", required=True, metavar="IMG.vox")
        p.add_argument("--out-field", required=True, metavar="PATH")
        p.add_argument("--out-labels", metavar="PATH")
        p.add_argument("--atlas-labels", metavar="LAB.vox")
        if verb == "apply":
            p.add_argument("--ckpt", required=True, metavar="CKPT")
        else:
            p.add_argument("--iterations", type=int)
        p.set_defaults(func=fn)

    p_seg = sub.add_parser("seg", help="vessel segmentation")
    seg_sub = p_seg.add_subparsers(dest="verb", required=True)
    p = seg_sub.add_parser("train", help="train a segmenter variant")
    p.add_argument("--variant", required=True, choices=sg.VARIANTS)
    p.add_argument("--weak-fraction", type=float, default=1.0, metavar="F")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--cohort", required=True, metavar="DIR", help="prepared cohort")
    p.add_argument("--prop", metavar="DIR", help="propagated label directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, default=0)
    _add_config_args(p)
    p.set_defaults(func=_cmd_seg_train)
    p = seg_sub.add_parser("predict", help="segment one volume")
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    p.add_argument("--image", required=True, metavar="IMG.vox")
    p.add_argument("--out", required=True, metavar="PATH")
    p.add_argument("--binary", action="store_true", help="write the joined mask")
    p.set_defaults(func=_cmd_seg_predict)
    p = seg_sub.add_parser("split", help="split a binary mask into classes")
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    p.add_argument("--binary", required=True, metavar="LAB.vox")
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=_cmd_seg_split)

    p_cls = sub.add_parser("cls", help="anomaly classification")
    cls_sub = p_cls.add_subparsers(dest="verb", required=True)
    p = cls_sub.add_parser("train", help="train a classifier head")
    p.add_argument("--mode", required=True, choices=CLS_MODES)
    style = p.add_mutually_exclusive_group()
    style.add_argument(
        "--separate", action="store_true", help="frozen segmenter (default)"
    )
    style.add_argument(
        "--joint", action="store_true", help="refine segmenter and classifier jointly"
    )
    p.add_argument("--lambda4", type=float, metavar="X", help="classification weight")
    p.add_argument("--lambda2", type=float, default=1.0, metavar="X",
                   help="binary-loss weight carried into the joint stage")
    p.add_argument("--variant", choices=sg.VARIANTS, default="lp-man",
                   help="segmentation loss used during joint refinement")
    p.add_argument("--cohort", required=True, metavar="DIR", help="prepared cohort")
    p.add_argument("--seg-ckpt", metavar="CKPT")
    p.add_argument("--prop", metavar="DIR", help="propagated label directory")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--seg-out", metavar="CKPT", help="refined segmenter destination")
    p.add_argument("--seed", type=int, default=0)
    _add_config_args(p)
    p.set_defaults(func=_cmd_cls_train)

    p = sub.add_parser("run", help="run the configured experiment")
    p.add_argument("--seed", type=int, help="single seed instead of the configured set")
    _add_config_args(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", required=True, choices=("labels", "weak", "classifier"))
    _add_config_args(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("report", help="render a stored metrics report")
    p.add_argument("--in", dest="in_dir", required=True, metavar="DIR|FILE")
    p.add_argument("--format", required=True, choices=("csv", "json"))
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_defaults:
        print(dump_defaults())
        return 0
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except ex.StageFailure as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return 3
    except (co.CohortError, rg.RegistrationError, VoxError, CheckpointError, OSError) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
