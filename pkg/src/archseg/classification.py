"""Densely-connected anomaly classifier and joint multi-task training.

The classifier consumes segmenter softmax outputs, binary foreground
pairs, raw images, or image+softmax stacks, and predicts one of three
arch anomalies. Joint training backpropagates a shared loss through both
networks with separate optimizer states.
"""

from __future__ import annotations

import math
import warnings
from collections.abc import Mapping
from dataclasses import dataclass, replace

import numpy as np

from archseg.autodiff import ops
from archseg.autodiff.optim import OptimizerConfig, step
from archseg.autodiff.params import ParamSet
from archseg.autodiff.tensor import Tensor, as_tensor
from archseg.cohort import ANOMALIES, CohortManifest
from archseg.grid import N_CLASSES, LabelMap, one_hot
from archseg.sampling import weighted_sampler
from archseg.segmentation import (
    AttentionUNet,
    TrainConfig,
    _binary_pair,
    _load_cases,
    _variant_weights,
    dice_ce_loss,
    join_pred,
    seg_loss,
    select_weak,
)

# classifier input channels per mode
MODES = {
    "multi": N_CLASSES,
    "bin": 2,
    "image": 1,
    "img-multi": N_CLASSES + 1,
}

# modes whose inputs carry segmenter outputs (gradient path in joint mode)
SEG_COUPLED = ("multi", "bin", "img-multi")


@dataclass(frozen=True)
class ClsNetConfig:
    """Scaled-down dense architecture: 4 blocks, bottlenecks, transitions."""

    mode: str = "multi"
    block_layers: tuple[int, ...] = (3, 6, 9, 6)
    growth: int = 8
    bottleneck_factor: int = 4
    stem_channels: int = 16
    n_outputs: int = len(ANOMALIES)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected {set(MODES)}")
        if len(self.block_layers) != 4 or any(n < 1 for n in self.block_layers):
            raise ValueError(f"need 4 nonempty blocks, got {self.block_layers}")
        if self.growth < 1 or self.stem_channels < 1:
            raise ValueError("growth and stem_channels must be positive")

    @property
    def in_channels(self) -> int:
        return MODES[self.mode]


class DenseClassifier:
    """Dense blocks over a strided stem, global average pool, linear head.

    Layer k of a block sees the concatenation of the block input and all
    previous layer outputs; each layer is BN-ReLU-1x1 bottleneck followed
    by BN-ReLU-3x3 producing ``growth`` channels. Transitions halve both
    channels and resolution.
    """

    def __init__(self, cfg: ClsNetConfig = ClsNetConfig()) -> None:
        self.cfg = cfg
        self.ps = ParamSet()
        self.last_pooled: np.ndarray | None = None
        rng = np.random.default_rng(cfg.seed)
        self._add_conv("stem", cfg.in_channels, cfg.stem_channels, 3, rng)
        cur = cfg.stem_channels
        inner = cfg.bottleneck_factor * cfg.growth
        for b, n_layers in enumerate(cfg.block_layers):
            for l in range(n_layers):
                self._add_bn(f"b{b}l{l}.bn1", cur)
                self._add_conv(f"b{b}l{l}.conv1", cur, inner, 1, rng)
                self._add_bn(f"b{b}l{l}.bn2", inner)
                self._add_conv(f"b{b}l{l}.conv3", inner, cfg.growth, 3, rng)
                cur += cfg.growth
            if b < len(cfg.block_layers) - 1:
                self._add_bn(f"t{b}.bn", cur)
                self._add_conv(f"t{b}.conv", cur, cur // 2, 1, rng)
                cur //= 2
        self._add_bn("final.bn", cur)
        self.ps.param(
            "head.w", rng.normal(0.0, math.sqrt(1.0 / cur), (cur, cfg.n_outputs))
        )
        self.ps.param("head.b", np.zeros(cfg.n_outputs, dtype=np.float32))
        self.feature_channels = cur

    def _add_conv(self, name: str, cin: int, cout: int, k: int, rng) -> None:
        std = math.sqrt(2.0 / (cin * k**3))
        self.ps.param(f"{name}.w", rng.normal(0.0, std, (cout, cin, k, k, k)))

    def _add_bn(self, name: str, c: int) -> None:
        self.ps.param(f"{name}.g", np.ones(c, dtype=np.float32))
        self.ps.param(f"{name}.beta", np.zeros(c, dtype=np.float32))
        self.ps.buffer(f"{name}.rm", np.zeros(c, dtype=np.float32))
        self.ps.buffer(f"{name}.rv", np.ones(c, dtype=np.float32))

    def _bn_relu(self, name: str, t: Tensor, training: bool) -> Tensor:
        ps = self.ps
        t = ops.batch_norm(
            t,
            ps[f"{name}.g"],
            ps[f"{name}.beta"],
            ps.buffers()[f"{name}.rm"],
            ps.buffers()[f"{name}.rv"],
            training,
        )
        return ops.relu(t)

    def forward(self, x: np.ndarray | Tensor, training: bool = False) -> Tensor:
        """(N, in_channels, D, H, W) -> logits (N, n_outputs)."""
        x = as_tensor(x)
        if x.value.ndim != 5 or x.value.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"mode {self.cfg.mode!r} expects (N, {self.cfg.in_channels}, "
                f"D, H, W), got {x.value.shape}"
            )
        if any(s % 8 for s in x.value.shape[2:]):
            raise ValueError(f"dims {x.value.shape[2:]} must divide 8")
        t = ops.conv3d(x, self.ps["stem.w"], None, stride=2, pad=1)
        t = ops.avg_pool2(t)
        for b, n_layers in enumerate(self.cfg.block_layers):
            for l in range(n_layers):
                y = self._bn_relu(f"b{b}l{l}.bn1", t, training)
                y = ops.conv3d(y, self.ps[f"b{b}l{l}.conv1.w"], None, pad=0)
                y = self._bn_relu(f"b{b}l{l}.bn2", y, training)
                y = ops.conv3d(y, self.ps[f"b{b}l{l}.conv3.w"], None)
                t = ops.concat([t, y], axis=1)
            if b < len(self.cfg.block_layers) - 1:
                t = self._bn_relu(f"t{b}.bn", t, training)
                t = ops.conv3d(t, self.ps[f"t{b}.conv.w"], None, pad=0)
                # keep >= 2^3 voxels so batch norm sees spatial variance
                if all(s >= 4 for s in t.value.shape[2:]):
                    t = ops.avg_pool2(t)
        t = self._bn_relu("final.bn", t, training)
        pooled = ops.global_avg_pool(t)
        self.last_pooled = pooled.value
        return ops.matmul(pooled, self.ps["head.w"]) + self.ps["head.b"]


def anomaly_index(anomaly: str) -> int:
    """Class index in the fixed (CoA, RAA, DAA) output order."""
    try:
        return ANOMALIES.index(anomaly)
    except ValueError:
        raise ValueError(f"unknown anomaly {anomaly!r}") from None


def build_cls_input(
    mode: str,
    image: np.ndarray | None,
    seg_proba: Tensor | np.ndarray | None,
) -> Tensor:
    """Stack classifier inputs for a mode, keeping any gradient path.

    ``image`` is (N, D, H, W) or (N, 1, D, H, W); ``seg_proba`` is the
    (N, C, D, H, W) segmenter softmax, passed as a Tensor in joint mode so
    classification gradients reach the segmenter.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected {set(MODES)}")
    img_t: Tensor | None = None
    if image is not None:
        img = np.asarray(image, dtype=np.float32)
        if img.ndim == 4:
            img = img[:, None]
        if img.ndim != 5 or img.shape[1] != 1:
            raise ValueError(f"image must be (N, 1, D, H, W), got {img.shape}")
        img_t = as_tensor(img)
    if mode == "image":
        if img_t is None:
            raise ValueError("image mode needs an image")
        return img_t
    if seg_proba is None:
        raise ValueError(f"mode {mode!r} needs segmenter probabilities")
    proba = as_tensor(seg_proba)
    if mode == "multi":
        return proba
    if mode == "bin":
        return _binary_pair(join_pred(proba))
    if img_t is None:
        raise ValueError("img-multi mode needs an image")
    if img_t.value.shape[0] != proba.value.shape[0]:
        raise ValueError("image and probabilities disagree on batch size")
    return ops.concat([img_t, proba], axis=1)


def classifier_forward(
    net: DenseClassifier,
    image: np.ndarray | None = None,
    seg_proba: Tensor | np.ndarray | None = None,
    training: bool = False,
) -> Tensor:
    """Mode-dispatched forward: stacks inputs, returns 3-class logits."""
    return net.forward(build_cls_input(net.cfg.mode, image, seg_proba), training)


def class_ce(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer class targets under softmax logits."""
    logits = as_tensor(logits)
    n, c = logits.value.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ValueError(f"targets must be ({n},), got {targets.shape}")
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError("target class index out of range")
    hot = np.zeros((n, c), dtype=logits.value.dtype)
    hot[np.arange(n), targets] = 1.0
    lp = ops.safe_log(ops.softmax(logits, axis=1))
    return ops.tsum(lp * hot) * (-1.0 / n)


def joint_loss(
    seg_term: Tensor, logits: Tensor, targets: np.ndarray, lambda4: float
) -> Tensor:
    """L_seg + lambda4 * CE(logits, anomaly); lambda4 = 0 is the identity."""
    if lambda4 < 0:
        raise ValueError(f"lambda4 must be nonnegative, got {lambda4}")
    if lambda4 == 0.0:
        return as_tensor(seg_term)
    return as_tensor(seg_term) + lambda4 * class_ce(logits, targets)


@dataclass(frozen=True)
class ClsTrainConfig:
    """Knobs for classifier pretraining on frozen segmenter outputs."""

    epochs: int = 60
    batch_size: int = 8
    lr0: float = 1e-3
    weight_decay: float = 1e-5
    patience: int = 25
    seed: int = 0
    net: ClsNetConfig = ClsNetConfig()

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")


@dataclass
class ClsTrainResult:
    net: DenseClassifier
    state: dict[str, np.ndarray]
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    mode: str
    config: ClsTrainConfig


def _frozen_inputs(
    seg_net: AttentionUNet | None,
    man: CohortManifest,
    split: str,
    mode: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Precomputed classifier inputs and class indices for one split."""
    xs, ys = [], []
    for rec in man.subjects_in(split):
        image = man.load_volume(rec.image).data.astype(np.float32)
        proba = None
        if mode != "image":
            if seg_net is None:
                raise ValueError(f"mode {mode!r} needs a segmenter")
            proba = seg_net.forward(image[None, None]).value
        x = build_cls_input(mode, image[None], proba)
        xs.append(x.value[0])
        ys.append(anomaly_index(rec.anomaly))
    if not xs:
        raise ValueError(f"cohort has no {split} subjects")
    return np.stack(xs), np.asarray(ys)


def train_classifier_frozen(
    seg_net: AttentionUNet | None,
    man: CohortManifest,
    mode: str,
    cfg: ClsTrainConfig = ClsTrainConfig(),
) -> ClsTrainResult:
    """Pretrain the classifier with segmenter weights fixed.

    Inputs are computed once from the frozen segmenter (or raw images for
    image mode) and the best validation-CE epoch is kept.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected {set(MODES)}")
    x_train, y_train = _frozen_inputs(seg_net, man, "train", mode)
    x_val, y_val = _frozen_inputs(seg_net, man, "val", mode)
    net = DenseClassifier(replace(cfg.net, mode=mode, seed=cfg.seed))
    labels = [ANOMALIES[i] for i in y_train]
    sampler = weighted_sampler(labels, seed=cfg.seed)
    steps_per_epoch = max(1, math.ceil(len(labels) / cfg.batch_size))
    ocfg = OptimizerConfig(
        kind="adamw",
        lr0=cfg.lr0,
        weight_decay=cfg.weight_decay,
        total_iters=cfg.epochs * steps_per_epoch,
    )
    train_losses: list[float] = []
    val_losses: list[float] = []
    best = math.inf
    best_state = net.ps.copy_values()
    best_epoch = 0
    t = 0
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for _ in range(steps_per_epoch):
            idx = np.asarray([next(sampler) for _ in range(cfg.batch_size)])
            net.ps.zero_grad()
            logits = net.forward(x_train[idx], training=True)
            loss = class_ce(logits, y_train[idx])
            if not np.isfinite(loss.item()):
                raise RuntimeError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            step(net.ps, ocfg, t)
            t += 1
            epoch_loss += loss.item()
        train_losses.append(epoch_loss / steps_per_epoch)
        vl = class_ce(net.forward(x_val), y_val).item()
        val_losses.append(vl)
        if vl < best:
            best = vl
            best_state = net.ps.copy_values()
            best_epoch = epoch
        elif epoch - best_epoch >= cfg.patience:
            break
    net.ps.load_state(best_state)
    return ClsTrainResult(
        net=net,
        state=best_state,
        train_losses=train_losses,
        val_losses=val_losses,
        best_epoch=best_epoch,
        mode=mode,
        config=cfg,
    )


@dataclass(frozen=True)
class JointConfig:
    """Shared-loss fine-tuning of segmenter and classifier together."""

    lambda4: float = 8.0
    epochs: int = 10
    batch_size: int = 2
    seg_lr0: float = 2e-4
    cls_lr0: float = 2e-4
    weight_decay: float = 1e-5
    guard_factor: float = 0.2  # abort when val seg loss degrades past this
    augment: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lambda4 <= 0:
            raise ValueError("joint mode needs lambda4 > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.guard_factor <= 0:
            raise ValueError("guard_factor must be positive")


class JointAbort(RuntimeWarning):
    """Validation segmentation loss degraded past the stability guard."""


@dataclass
class JointResult:
    seg_net: AttentionUNet
    cls_net: DenseClassifier
    seg_state: dict[str, np.ndarray]
    cls_state: dict[str, np.ndarray]
    train_losses: list[float]
    val_seg_losses: list[float]
    val_cls_losses: list[float]
    best_epoch: int
    aborted: bool


def train_joint(
    seg_net: AttentionUNet,
    cls_net: DenseClassifier,
    man: CohortManifest,
    propagated: Mapping[str, LabelMap] | None,
    variant: str,
    lambda2: float,
    cfg: JointConfig = JointConfig(),
    seg_cfg: TrainConfig = TrainConfig(),
) -> JointResult:
    """Fine-tune both networks on L_seg + lambda4 * L_class.

    The segmentation term keeps the pretraining supervision with the
    binary weight frozen at ``lambda2``; each step backpropagates one
    shared loss and applies separate optimizer updates to the two
    parameter sets. If the validation segmentation loss degrades by more
    than ``guard_factor`` relative to its starting value, training aborts
    with a warning and the best checkpoint is restored.
    """
    mode = cls_net.cfg.mode
    with_prop = variant in ("lp", "lp-man")
    weak = (
        select_weak(man, seg_cfg.weak_fraction, seg_cfg.seed)
        if variant != "lp"
        else None
    )
    cases = _load_cases(man, "train", propagated, with_prop, weak)
    if not cases:
        raise ValueError("no training subject carries any supervision")
    _, lambda3 = _variant_weights(variant, seg_cfg, 0)
    val = [
        (
            man.load_volume(rec.image).data.astype(np.float32),
            man.load_labels(rec.multi).codes,
            anomaly_index(rec.anomaly),
        )
        for rec in man.subjects_in("val")
    ]
    if not val:
        raise ValueError("cohort has no validation subjects")

    def val_losses_now() -> tuple[float, float]:
        seg_total, cls_total = 0.0, 0.0
        for image, codes, y in val:
            pred = seg_net.forward(image[None, None])
            tgt = one_hot(codes, seg_net.cfg.n_classes)[None]
            seg_total += dice_ce_loss(pred, tgt).item()
            logits = classifier_forward(cls_net, image[None], pred.value)
            cls_total += class_ce(logits, np.asarray([y])).item()
        return seg_total / len(val), cls_total / len(val)

    sampler = weighted_sampler([c.anomaly for c in cases], seed=cfg.seed)
    rng_drop = np.random.default_rng(cfg.seed + 2)
    steps_per_epoch = max(1, math.ceil(len(cases) / cfg.batch_size))
    seg_ocfg = OptimizerConfig(
        kind="adamw",
        lr0=cfg.seg_lr0,
        weight_decay=cfg.weight_decay,
        total_iters=cfg.epochs * steps_per_epoch,
    )
    cls_ocfg = OptimizerConfig(
        kind="adamw",
        lr0=cfg.cls_lr0,
        weight_decay=cfg.weight_decay,
        total_iters=cfg.epochs * steps_per_epoch,
    )
    val_seg0, _ = val_losses_now()
    guard = (1.0 + cfg.guard_factor) * val_seg0
    train_losses: list[float] = []
    val_seg_losses: list[float] = []
    val_cls_losses: list[float] = []
    best = math.inf
    best_seg = seg_net.ps.copy_values()
    best_cls = cls_net.ps.copy_values()
    best_epoch = -1
    aborted = False
    t = 0
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for _ in range(steps_per_epoch):
            batch = [cases[next(sampler)] for _ in range(cfg.batch_size)]
            x = np.stack([c.image for c in batch])[:, None]
            props = [
                None if c.prop is None else one_hot(c.prop, seg_net.cfg.n_classes)
                for c in batch
            ]
            mans = [None if c.man is None else one_hot(c.man, 2) for c in batch]
            targets = np.asarray([anomaly_index(c.anomaly) for c in batch])
            seg_net.ps.zero_grad()
            cls_net.ps.zero_grad()
            pred = seg_net.forward(x, training=True, rng=rng_drop)
            seg_term = seg_loss(pred, props, mans, lambda2, lambda3)
            logits = classifier_forward(cls_net, x[:, 0], pred, training=True)
            loss = joint_loss(seg_term, logits, targets, cfg.lambda4)
            if not np.isfinite(loss.item()):
                raise RuntimeError(f"non-finite joint loss at epoch {epoch}")
            loss.backward()
            step(seg_net.ps, seg_ocfg, t)
            step(cls_net.ps, cls_ocfg, t)
            t += 1
            epoch_loss += loss.item()
        train_losses.append(epoch_loss / steps_per_epoch)
        vs, vc = val_losses_now()
        val_seg_losses.append(vs)
        val_cls_losses.append(vc)
        total = vs + cfg.lambda4 * vc
        if total < best:
            best = total
            best_seg = seg_net.ps.copy_values()
            best_cls = cls_net.ps.copy_values()
            best_epoch = epoch
        if vs > guard:
            warnings.warn(
                f"validation seg loss {vs:.4f} degraded past "
                f"{guard:.4f} at epoch {epoch}; stopping joint training",
                JointAbort,
            )
            aborted = True
            break
    seg_net.ps.load_state(best_seg)
    cls_net.ps.load_state(best_cls)
    return JointResult(
        seg_net=seg_net,
        cls_net=cls_net,
        seg_state=best_seg,
        cls_state=best_cls,
        train_losses=train_losses,
        val_seg_losses=val_seg_losses,
        val_cls_losses=val_cls_losses,
        best_epoch=best_epoch,
        aborted=aborted,
    )


def predict_anomaly(
    net: DenseClassifier,
    image: np.ndarray | None = None,
    seg_proba: np.ndarray | None = None,
) -> tuple[str, np.ndarray]:
    """Eval-mode prediction: (anomaly name, class probabilities)."""
    if image is not None and image.ndim == 3:
        image = image[None]
    if seg_proba is not None and seg_proba.ndim == 4:
        seg_proba = seg_proba[None]
    logits = classifier_forward(net, image, seg_proba)
    proba = ops.softmax(logits, axis=1).value[0]
    return ANOMALIES[int(proba.argmax())], proba
