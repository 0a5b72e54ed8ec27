"""Attention-gated encoder-decoder segmentation with mixed supervision.

The segmenter predicts a 12-channel softmax (11 vessel regions plus
background) and trains against any combination of propagated multi-class
labels and manual binary labels; the binary weight follows a stepped
schedule. A splitting network with the same backbone converts binary
masks into multi-class maps.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, replace

import numpy as np

from archseg.augment import AugmentationConfig, augment_case
from archseg.autodiff import ops
from archseg.autodiff.optim import OptimizerConfig, step
from archseg.autodiff.params import ParamSet
from archseg.autodiff.tensor import Tensor, as_tensor
from archseg.cohort import CohortManifest
from archseg.grid import N_CLASSES, LabelMap, Volume3D, one_hot
from archseg.sampling import weighted_sampler

DICE_SMOOTH = 1e-5
SIMPLEX_TOL = 1e-5

VARIANTS = ("lp", "man", "lp-man")

# called after each epoch with (epoch, net, val_loss)
EpochCallback = Callable[[int, "AttentionUNet", float], None]


@dataclass(frozen=True)
class SegNetConfig:
    """Backbone shape: five levels of paired convolutions, gated skips."""

    levels: int = 5
    channels: tuple[int, ...] = (8, 16, 32, 64, 128)
    kernel: int = 3
    in_channels: int = 1
    n_classes: int = N_CLASSES
    dropout: float = 0.5
    # softmax head bias starts at log class priors (this much background,
    # the rest split evenly); saves the optimizer thousands of small steps
    # that would otherwise go into learning the class imbalance
    background_prior: float = 0.98
    seed: int = 0

    def __post_init__(self) -> None:
        if self.levels != len(self.channels):
            raise ValueError(
                f"{self.levels} levels need {self.levels} channel widths, "
                f"got {self.channels}"
            )
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channels must strictly increase: {self.channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and positive, got {self.kernel}")
        if self.n_classes < 2:
            raise ValueError("need at least background and one class")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")
        if not 0.0 < self.background_prior < 1.0:
            raise ValueError("background_prior must lie strictly in (0, 1)")
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")


def attention_gate(
    skip: Tensor | np.ndarray,
    gating: Tensor | np.ndarray,
    w_x: Tensor,
    w_g: Tensor,
    b_g: Tensor,
    w_psi: Tensor,
    b_psi: Tensor,
) -> tuple[Tensor, Tensor]:
    """Additive attention on a skip connection, gated from the coarser level.

    The gating signal is upsampled to skip resolution, both inputs pass
    through 1x1x1 projections, and a sigmoid head yields one coefficient
    per voxel that multiplies every skip channel. Returns (gated skip,
    coefficients).
    """
    skip, gating = as_tensor(skip), as_tensor(gating)
    if skip.value.ndim != 5 or gating.value.ndim != 5:
        raise ValueError("attention_gate expects (N, C, D, H, W) inputs")
    up = ops.upsample2x(gating)
    if up.value.shape[0] != skip.value.shape[0] or up.value.shape[2:] != skip.value.shape[2:]:
        raise ValueError(
            f"gating {gating.value.shape} does not sit one level below "
            f"skip {skip.value.shape}"
        )
    q = ops.relu(ops.conv3d(skip, w_x, None, pad=0) + ops.conv3d(up, w_g, b_g, pad=0))
    coeff = ops.sigmoid(ops.conv3d(q, w_psi, b_psi, pad=0))
    return skip * coeff, coeff


class AttentionUNet:
    """Encoder-decoder with attention-gated skips and a softmax head.

    Each level applies two convolution + batch norm + ReLU pairs; resolution
    halves by average pooling on the way down and doubles by trilinear
    upsampling on the way up. Dropout acts on the bottleneck only. After a
    forward pass ``last_attention`` holds the gate coefficients (coarsest
    first) and ``last_bottleneck`` the pre-dropout bottleneck features.
    """

    def __init__(self, cfg: SegNetConfig = SegNetConfig()) -> None:
        self.cfg = cfg
        self.ps = ParamSet()
        self.last_attention: list[np.ndarray] = []
        self.last_bottleneck: np.ndarray | None = None
        rng = np.random.default_rng(cfg.seed)
        ch = cfg.channels
        for i, c in enumerate(ch):
            cin = cfg.in_channels if i == 0 else ch[i - 1]
            self._add_conv_bn(f"enc{i}a", cin, c, cfg.kernel, rng)
            self._add_conv_bn(f"enc{i}b", c, c, cfg.kernel, rng)
        for i in range(cfg.levels - 2, -1, -1):
            self._add_conv_bn(f"up{i}", ch[i + 1], ch[i], cfg.kernel, rng)
            inter = max(1, ch[i] // 2)
            self._add_param(f"gate{i}.wx", (inter, ch[i], 1, 1, 1), ch[i], rng)
            self._add_param(f"gate{i}.wg", (inter, ch[i + 1], 1, 1, 1), ch[i + 1], rng)
            self.ps.param(f"gate{i}.bg", np.zeros(inter, dtype=np.float32))
            self._add_param(f"gate{i}.wpsi", (1, inter, 1, 1, 1), inter, rng)
            self.ps.param(f"gate{i}.bpsi", np.zeros(1, dtype=np.float32))
            self._add_conv_bn(f"dec{i}a", 2 * ch[i], ch[i], cfg.kernel, rng)
            self._add_conv_bn(f"dec{i}b", ch[i], ch[i], cfg.kernel, rng)
        self._add_param("head.w", (cfg.n_classes, ch[0], 1, 1, 1), ch[0], rng)
        prior = np.full(
            cfg.n_classes, (1.0 - cfg.background_prior) / (cfg.n_classes - 1)
        )
        prior[0] = cfg.background_prior
        self.ps.param("head.b", np.log(prior).astype(np.float32))

    def _add_param(
        self, name: str, shape: tuple[int, ...], fan_in_ch: int, rng
    ) -> None:
        fan_in = fan_in_ch * int(np.prod(shape[2:]))
        self.ps.param(name, rng.normal(0.0, math.sqrt(2.0 / fan_in), shape))

    def _add_conv_bn(self, name: str, cin: int, cout: int, k: int, rng) -> None:
        self._add_param(f"{name}.w", (cout, cin, k, k, k), cin, rng)
        self.ps.param(f"{name}.b", np.zeros(cout, dtype=np.float32))
        self.ps.param(f"{name}.g", np.ones(cout, dtype=np.float32))
        self.ps.param(f"{name}.beta", np.zeros(cout, dtype=np.float32))
        self.ps.buffer(f"{name}.rm", np.zeros(cout, dtype=np.float32))
        self.ps.buffer(f"{name}.rv", np.ones(cout, dtype=np.float32))

    def _conv_bn(self, name: str, t: Tensor, training: bool) -> Tensor:
        ps = self.ps
        t = ops.conv3d(t, ps[f"{name}.w"], ps[f"{name}.b"])
        t = ops.batch_norm(
            t,
            ps[f"{name}.g"],
            ps[f"{name}.beta"],
            ps.buffers()[f"{name}.rm"],
            ps.buffers()[f"{name}.rv"],
            training,
        )
        return ops.relu(t)

    def forward(
        self,
        x: np.ndarray | Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """(N, in_channels, D, H, W) -> softmax probabilities (N, C, ...)."""
        x = as_tensor(x)
        if x.value.ndim != 5 or x.value.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected (N, {self.cfg.in_channels}, D, H, W), "
                f"got {x.value.shape}"
            )
        depth = 2 ** (self.cfg.levels - 1)
        if any(s % depth for s in x.value.shape[2:]):
            raise ValueError(f"dims {x.value.shape[2:]} must divide {depth}")
        t = Tensor(x.value.astype(np.float32, copy=False)) if not x.requires_grad else x
        feats = []
        for i in range(self.cfg.levels):
            if i:
                t = ops.avg_pool2(t)
            t = self._conv_bn(f"enc{i}a", t, training)
            t = self._conv_bn(f"enc{i}b", t, training)
            feats.append(t)
        self.last_bottleneck = feats[-1].value
        if training and self.cfg.dropout > 0.0:
            if rng is None:
                raise ValueError("training forward with dropout needs an rng")
            t = ops.dropout(t, self.cfg.dropout, rng, training)
        atts: list[np.ndarray] = []
        for i in range(self.cfg.levels - 2, -1, -1):
            ps = self.ps
            gated, coeff = attention_gate(
                feats[i],
                t,
                ps[f"gate{i}.wx"],
                ps[f"gate{i}.wg"],
                ps[f"gate{i}.bg"],
                ps[f"gate{i}.wpsi"],
                ps[f"gate{i}.bpsi"],
            )
            up = self._conv_bn(f"up{i}", ops.upsample2x(t), training)
            t = ops.concat([up, gated], axis=1)
            t = self._conv_bn(f"dec{i}a", t, training)
            t = self._conv_bn(f"dec{i}b", t, training)
            atts.append(coeff.value)
        self.last_attention = atts
        logits = ops.conv3d(t, self.ps["head.w"], self.ps["head.b"])
        return ops.softmax(logits, axis=1)

    def bottleneck_latent(self) -> np.ndarray:
        """Globally pooled bottleneck features of the last forward pass."""
        if self.last_bottleneck is None:
            raise RuntimeError("no forward pass recorded")
        return self.last_bottleneck.mean(axis=(2, 3, 4))


def predict_proba(net: AttentionUNet, image: Volume3D | np.ndarray) -> np.ndarray:
    """Eval-mode softmax probabilities (C, D, H, W) for one volume."""
    data = image.data if isinstance(image, Volume3D) else np.asarray(image)
    return net.forward(data[None, None].astype(np.float32)).value[0]


def predict_labels(net: AttentionUNet, image: Volume3D) -> LabelMap:
    """Argmax multi-class prediction."""
    proba = predict_proba(net, image)
    return LabelMap(proba.argmax(axis=0).astype(np.uint8), image.spacing)


def predict_binary(net: AttentionUNet, image: Volume3D) -> LabelMap:
    """Joined foreground prediction: 1 - background probability >= 0.5."""
    proba = predict_proba(net, image)
    return LabelMap(((1.0 - proba[0]) >= 0.5).astype(np.uint8), image.spacing)


def bottleneck_features(net: AttentionUNet, image: Volume3D) -> np.ndarray:
    """Eval-mode globally pooled bottleneck vector for one volume."""
    predict_proba(net, image)
    return net.bottleneck_latent()[0]


def _check_simplex(pred: Tensor) -> None:
    v = pred.value
    if v.ndim < 2:
        raise ValueError("prediction needs a channel axis")
    sums = v.sum(axis=1)
    if v.min() < -SIMPLEX_TOL or np.abs(sums - 1.0).max() > SIMPLEX_TOL:
        raise ValueError("prediction is not simplex-valued per voxel")


def _check_one_hot(target: np.ndarray, pred_shape: tuple[int, ...]) -> None:
    if target.shape != pred_shape:
        raise ValueError(f"target shape {target.shape} != pred {pred_shape}")
    if not np.array_equal(target, target.astype(bool)):
        raise ValueError("target must be one-hot (0/1 entries)")
    if not np.all(target.sum(axis=1) == 1.0):
        raise ValueError("target channels must sum to one per voxel")


def dice_ce_loss(pred: Tensor | np.ndarray, target: np.ndarray) -> Tensor:
    """Equal-weight soft Dice + cross-entropy over (N, C, spatial...).

    Dice averages over samples and classes with smoothing 1e-5 in both
    numerator and denominator; cross-entropy averages over voxels.
    """
    pred = as_tensor(pred)
    _check_simplex(pred)
    target = np.asarray(target, dtype=pred.value.dtype)
    _check_one_hot(target, pred.value.shape)
    spatial = tuple(range(2, pred.value.ndim))
    inter = ops.tsum(pred * target, axis=spatial)
    psum = ops.tsum(pred, axis=spatial)
    tsum = target.sum(axis=spatial)
    dice = (2.0 * inter + DICE_SMOOTH) / (psum + (tsum + DICE_SMOOTH))
    dice_loss = 1.0 - ops.tmean(dice)
    n_vox = pred.value.shape[0] * int(np.prod(pred.value.shape[2:]))
    ce = ops.tsum(ops.safe_log(pred) * target) * (-1.0 / n_vox)
    return 0.5 * dice_loss + 0.5 * ce


def generalized_dice_loss(pred: Tensor | np.ndarray, target: np.ndarray) -> Tensor:
    """Class-reweighted overlap loss, weights 1/max(class volume, 1)^2.

    The max() floor caps the weight assigned to classes absent from the
    target; per-sample losses are averaged over the batch.
    """
    pred = as_tensor(pred)
    _check_simplex(pred)
    target = np.asarray(target, dtype=pred.value.dtype)
    _check_one_hot(target, pred.value.shape)
    spatial = tuple(range(2, pred.value.ndim))
    tsum = target.sum(axis=spatial)
    w = 1.0 / np.maximum(tsum, 1.0) ** 2
    inter = ops.tsum(pred * target, axis=spatial)
    psum = ops.tsum(pred, axis=spatial)
    num = 2.0 * ops.tsum(inter * w, axis=1) + DICE_SMOOTH
    den = ops.tsum((psum + tsum) * w, axis=1) + DICE_SMOOTH
    return ops.tmean(1.0 - num / den)


def focal_loss(
    pred: Tensor | np.ndarray, target: np.ndarray, gamma: float = 2.0
) -> Tensor:
    """Mean of -(1 - p_true)^gamma * log p_true; gamma 0 is cross-entropy."""
    if gamma < 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    pred = as_tensor(pred)
    _check_simplex(pred)
    target = np.asarray(target, dtype=pred.value.dtype)
    _check_one_hot(target, pred.value.shape)
    p_true = ops.tsum(pred * target, axis=1)
    scale = ops.power(1.0 - p_true, gamma) if gamma != 0.0 else 1.0
    return ops.tmean(ops.safe_log(p_true) * scale) * -1.0


def join_pred(pred: Tensor | np.ndarray) -> Tensor:
    """Foreground probability (N, 1, spatial): 1 - background channel."""
    pred = as_tensor(pred)
    _check_simplex(pred)
    bg = pred[:, 0:1]
    return 1.0 - bg


def _binary_pair(fg: Tensor) -> Tensor:
    return ops.concat([1.0 - fg, fg], axis=1)


def seg_loss(
    pred: Tensor,
    propagated: Sequence[np.ndarray | None],
    manual: Sequence[np.ndarray | None],
    lambda2: float,
    lambda3: float,
) -> Tensor:
    """Combined loss: lambda3 * DiceCE(multi) + lambda2 * DiceCE(joined, binary).

    ``propagated`` holds per-sample one-hot multi-class targets and
    ``manual`` per-sample one-hot [background, foreground] pairs; a None
    entry drops that sample from the corresponding term. A sample with
    neither source is an error.
    """
    pred = as_tensor(pred)
    n = pred.value.shape[0]
    if len(propagated) != n or len(manual) != n:
        raise ValueError("per-sample target lists must match the batch size")
    for i in range(n):
        if propagated[i] is None and manual[i] is None:
            raise ValueError(f"sample {i} has no supervision source")
    total: Tensor | None = None
    idx = [i for i in range(n) if propagated[i] is not None]
    if idx and lambda3 != 0.0:
        sub = pred if len(idx) == n else ops.index(pred, np.asarray(idx))
        tgt = np.stack([propagated[i] for i in idx])
        total = lambda3 * dice_ce_loss(sub, tgt)
    idx = [i for i in range(n) if manual[i] is not None]
    if idx and lambda2 != 0.0:
        sub = pred if len(idx) == n else ops.index(pred, np.asarray(idx))
        tgt = np.stack([manual[i] for i in idx])
        term = lambda2 * dice_ce_loss(_binary_pair(join_pred(sub)), tgt)
        total = term if total is None else total + term
    if total is None:
        total = as_tensor(np.asarray(0.0, dtype=pred.value.dtype))
    return total


def lambda2_schedule(
    epoch: int, lambda2_0: float, increment: float = 0.05, period: int = 50
) -> float:
    """Stepped binary-term weight: lambda2_0 + increment * (epoch // period)."""
    if epoch < 0:
        raise ValueError(f"epoch must be nonnegative, got {epoch}")
    if period < 1:
        raise ValueError(f"period must be positive, got {period}")
    return lambda2_0 + increment * (epoch // period)


def select_weak(
    man: CohortManifest, fraction: float, seed: int = 0
) -> frozenset[str]:
    """Choose which training subjects expose their manual binary labels.

    Per anomaly class, round(fraction * n) subjects are taken from a seeded
    permutation; selections are nested, so a larger fraction is a superset
    of a smaller one at the same seed.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside [0, 1]")
    rng = np.random.default_rng(seed)
    chosen: set[str] = set()
    by_class: dict[str, list[str]] = {}
    for rec in man.subjects_in("train"):
        by_class.setdefault(rec.anomaly, []).append(rec.sid)
    for anomaly in sorted(by_class):
        sids = sorted(by_class[anomaly])
        order = rng.permutation(len(sids))
        k = int(round(fraction * len(sids)))
        chosen.update(sids[j] for j in order[:k])
    return frozenset(chosen)


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for segmenter training; None weights defer to the variant."""

    epochs: int = 40
    batch_size: int = 2
    # tuned for the compressed schedules used on phantom cohorts, which
    # run an order of magnitude fewer steps than a full-size training
    lr0: float = 3e-3
    weight_decay: float = 1e-5
    lambda3: float | None = None
    lambda2_0: float | None = None
    lambda2_increment: float = 0.05
    lambda2_period: int = 50
    weak_fraction: float = 1.0
    patience: int = 30
    augment: bool = True
    seed: int = 0
    net: SegNetConfig = SegNetConfig()

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.patience < 1:
            raise ValueError("patience must be positive")
        if not 0.0 <= self.weak_fraction <= 1.0:
            raise ValueError(f"weak_fraction {self.weak_fraction} outside [0, 1]")


@dataclass
class TrainResult:
    """Best-validation weights plus the curves that chose them."""

    net: AttentionUNet
    state: dict[str, np.ndarray]
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    lambda2_at_best: float
    variant: str
    config: TrainConfig


def _variant_weights(variant: str, cfg: TrainConfig, epoch: int) -> tuple[float, float]:
    """(lambda2, lambda3) for one epoch under the named supervision variant."""
    if variant == "lp":
        return 0.0, cfg.lambda3 if cfg.lambda3 is not None else 1.0
    if variant == "man":
        return (cfg.lambda2_0 if cfg.lambda2_0 is not None else 1.0), (
            cfg.lambda3 if cfg.lambda3 is not None else 0.0
        )
    if variant == "lp-man":
        l20 = cfg.lambda2_0 if cfg.lambda2_0 is not None else 0.0
        l2 = lambda2_schedule(epoch, l20, cfg.lambda2_increment, cfg.lambda2_period)
        return l2, cfg.lambda3 if cfg.lambda3 is not None else 1.0
    raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")


@dataclass
class _Case:
    image: np.ndarray
    prop: np.ndarray | None  # integer codes
    man: np.ndarray | None  # 0/1 codes
    anomaly: str


def _load_cases(
    man: CohortManifest,
    split: str,
    propagated: Mapping[str, LabelMap] | None,
    with_prop: bool,
    with_man: Iterable[str] | None,
) -> list[_Case]:
    cases = []
    for rec in man.subjects_in(split):
        prop = None
        if with_prop:
            if propagated is None or rec.sid not in propagated:
                raise ValueError(f"no propagated labels for subject {rec.sid}")
            prop = propagated[rec.sid].codes
        manual = None
        if with_man is not None and rec.sid in with_man:
            manual = man.load_labels(rec.binary).codes.astype(np.uint8)
        if prop is None and manual is None:
            continue
        cases.append(
            _Case(
                image=man.load_volume(rec.image).data.astype(np.float32),
                prop=prop,
                man=manual,
                anomaly=rec.anomaly,
            )
        )
    return cases


def _epoch_val_loss(
    net: AttentionUNet,
    val: list[tuple[np.ndarray, np.ndarray]],
    binary: bool,
) -> float:
    total = 0.0
    for image, codes in val:
        pred = net.forward(image[None, None])
        if binary:
            pred = _binary_pair(join_pred(pred))
            target = one_hot((codes > 0).astype(np.uint8), 2)[None]
        else:
            target = one_hot(codes, net.cfg.n_classes)[None]
        total += dice_ce_loss(pred, target).item()
    return total / len(val)


def _train_loop(
    net: AttentionUNet,
    cases: list[_Case],
    val: list[tuple[np.ndarray, np.ndarray]],
    variant: str,
    cfg: TrainConfig,
    spacing: tuple[float, float, float],
    on_epoch: EpochCallback | None = None,
) -> TrainResult:
    sampler = weighted_sampler([c.anomaly for c in cases], seed=cfg.seed)
    rng_aug = np.random.default_rng(cfg.seed + 1)
    rng_drop = np.random.default_rng(cfg.seed + 2)
    aug_cfg = AugmentationConfig()
    steps_per_epoch = max(1, math.ceil(len(cases) / cfg.batch_size))
    ocfg = OptimizerConfig(
        kind="adamw",
        lr0=cfg.lr0,
        weight_decay=cfg.weight_decay,
        total_iters=cfg.epochs * steps_per_epoch,
    )
    val_binary = _variant_weights(variant, cfg, 0)[1] == 0.0
    train_losses: list[float] = []
    val_losses: list[float] = []
    best = math.inf
    best_state = net.ps.copy_values()
    best_epoch = 0
    lambda2_at_best = _variant_weights(variant, cfg, 0)[0]
    t = 0
    for epoch in range(cfg.epochs):
        l2, l3 = _variant_weights(variant, cfg, epoch)
        epoch_loss = 0.0
        for _ in range(steps_per_epoch):
            batch = [cases[next(sampler)] for _ in range(cfg.batch_size)]
            images, props, mans = [], [], []
            for case in batch:
                image, prop, manual = case.image, case.prop, case.man
                if cfg.augment:
                    labs = [
                        LabelMap(arr, spacing)
                        for arr in (prop, manual)
                        if arr is not None
                    ]
                    vol, labs = augment_case(
                        Volume3D(image, spacing), labs, rng_aug, aug_cfg
                    )
                    image = vol.data
                    labs = iter(labs)
                    prop = next(labs).codes if prop is not None else None
                    manual = next(labs).codes if manual is not None else None
                images.append(image)
                props.append(
                    None if prop is None else one_hot(prop, net.cfg.n_classes)
                )
                mans.append(None if manual is None else one_hot(manual, 2))
            x = np.stack(images)[:, None]
            net.ps.zero_grad()
            pred = net.forward(x, training=True, rng=rng_drop)
            loss = seg_loss(pred, props, mans, l2, l3)
            if not np.isfinite(loss.item()):
                raise RuntimeError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            step(net.ps, ocfg, t)
            t += 1
            epoch_loss += loss.item()
        train_losses.append(epoch_loss / steps_per_epoch)
        vl = _epoch_val_loss(net, val, val_binary)
        val_losses.append(vl)
        if on_epoch is not None:
            on_epoch(epoch, net, vl)
        if vl < best:
            best = vl
            best_state = net.ps.copy_values()
            best_epoch = epoch
            lambda2_at_best = l2
        elif epoch - best_epoch >= cfg.patience:
            break
    net.ps.load_state(best_state)
    return TrainResult(
        net=net,
        state=best_state,
        train_losses=train_losses,
        val_losses=val_losses,
        best_epoch=best_epoch,
        lambda2_at_best=lambda2_at_best,
        variant=variant,
        config=cfg,
    )


def train_segmenter(
    man: CohortManifest,
    propagated: Mapping[str, LabelMap] | None,
    variant: str,
    cfg: TrainConfig = TrainConfig(),
    on_epoch: EpochCallback | None = None,
) -> TrainResult:
    """Train one segmenter under a supervision variant.

    ``lp`` uses propagated multi-class labels only, ``man`` manual binary
    labels only (restricted to the weak-fraction subset), ``lp-man`` both
    with the scheduled binary weight. Validation selects the best epoch by
    multi-class DiceCE against reference labels, or binary DiceCE for the
    pure-binary variant.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    with_prop = variant in ("lp", "lp-man")
    weak = select_weak(man, cfg.weak_fraction, cfg.seed) if variant != "lp" else None
    cases = _load_cases(man, "train", propagated, with_prop, weak)
    if not cases:
        raise ValueError("no training subject carries any supervision")
    val = [
        (
            man.load_volume(rec.image).data.astype(np.float32),
            man.load_labels(rec.multi).codes,
        )
        for rec in man.subjects_in("val")
    ]
    if not val:
        raise ValueError("cohort has no validation subjects")
    net = AttentionUNet(replace(cfg.net, seed=cfg.seed))
    spacing = (man.spacing,) * 3
    return _train_loop(net, cases, val, variant, cfg, spacing, on_epoch)


def train_splitting_net(
    man: CohortManifest,
    propagated: Mapping[str, LabelMap],
    cfg: TrainConfig = TrainConfig(),
    on_epoch: EpochCallback | None = None,
) -> TrainResult:
    """Learn binary -> multi-class splitting from propagated label pairs.

    Inputs are the joined propagated masks, targets the propagated
    multi-class maps; validation pairs come from the val split the same
    way, so the net never sees reference labels.
    """
    spacing: tuple[float, float, float] | None = None
    cases = []
    for rec in man.subjects_in("train"):
        if rec.sid not in propagated:
            raise ValueError(f"no propagated labels for subject {rec.sid}")
        lab = propagated[rec.sid]
        spacing = lab.spacing
        cases.append(
            _Case(
                image=(lab.codes > 0).astype(np.float32),
                prop=lab.codes,
                man=None,
                anomaly=rec.anomaly,
            )
        )
    if not cases:
        raise ValueError("no training subject carries propagated labels")
    val = []
    for rec in man.subjects_in("val"):
        if rec.sid not in propagated:
            raise ValueError(f"no propagated labels for subject {rec.sid}")
        lab = propagated[rec.sid]
        val.append(((lab.codes > 0).astype(np.float32), lab.codes))
    if not val:
        raise ValueError("no validation subject carries propagated labels")
    net = AttentionUNet(replace(cfg.net, seed=cfg.seed))
    return _train_loop(net, cases, val, "lp", cfg, spacing, on_epoch)


def apply_split(net: AttentionUNet, binary: LabelMap) -> LabelMap:
    """Split a binary mask into classes; output foreground == input foreground.

    Background voxels stay background, foreground voxels take the argmax
    over the foreground channels only.
    """
    fg = binary.codes > 0
    proba = predict_proba(net, binary.codes.astype(np.float32))
    codes = np.zeros(binary.codes.shape, dtype=np.uint8)
    codes[fg] = proba[1:, fg].argmax(axis=0).astype(np.uint8) + 1
    return LabelMap(codes, binary.spacing)
