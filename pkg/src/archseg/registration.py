"""Deformable atlas-to-subject registration and label propagation.

The similarity term is local normalized cross-correlation (LNCC) over
truncated cubic windows; the regularizer is the bending energy of the
displacement field. Both are differentiable through the in-house autodiff
layer, so the same loss drives three optimizers:

* ``affine_align``: 12-parameter pre-alignment by gradient descent,
* ``instance_optimize``: multiresolution direct descent on the field,
* ``train_reg_net``: an amortized encoder-decoder predicting the field
  from a concatenated (fixed, moving) pair.

Displacement fields are in voxel units on the fixed grid; warping samples
the moving image at identity + field.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from archseg import kernels
from archseg.autodiff import OptimizerConfig, ParamSet, Tensor, ops
from archseg.autodiff import step as opt_step
from archseg.autodiff.tensor import as_tensor
from archseg.grid import (
    AffineTransform,
    DisplacementField,
    LabelMap,
    VesselScheme,
    Volume3D,
    identity_coords,
    warp_labels,
)

VAR_FLOOR = 1e-5


class RegistrationError(RuntimeError):
    """Optimization diverged or inputs are incompatible."""


@dataclass(frozen=True)
class RegConfig:
    """Knobs shared by the amortized and instance registration modes.

    ``iterations`` counts optimizer steps: total steps for the amortized
    network, steps per pyramid level for instance mode.
    """

    lambda1: float = 1.5
    lncc_window: int = 9
    mode: str = "instance"  # "amortized" | "instance"
    iterations: int = 80
    pyramid_levels: int = 3
    lr0: float = 5e-4  # amortized network (linear decay, AdamW)
    instance_lr: float = 0.25  # voxel step scale for direct descent
    weight_decay: float = 1e-5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be nonnegative")
        if self.lncc_window < 3 or self.lncc_window % 2 == 0:
            raise ValueError(f"lncc_window must be odd and >= 3, got {self.lncc_window}")
        if self.mode not in ("amortized", "instance"):
            raise ValueError(f"unknown registration mode {self.mode!r}")
        if self.iterations < 1 or self.pyramid_levels < 1:
            raise ValueError("iterations and pyramid_levels must be positive")
        if self.lr0 <= 0 or self.instance_lr <= 0:
            raise ValueError("learning rates must be positive")


# ---------------------------------------------------------------------------
# similarity: local normalized cross-correlation
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def _window_counts(dims: tuple[int, int, int], r: int) -> np.ndarray:
    """Per-voxel count of in-bounds neighbors in a (2r+1)^3 window.

    Windows are truncated at the volume border, so the count is the outer
    product of per-axis clipped extents.
    """
    axes = []
    for n in dims:
        i = np.arange(n)
        axes.append(np.minimum(i + r, n - 1) - np.maximum(i - r, 0) + 1.0)
    return axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]


def _box(x: np.ndarray, r: int) -> np.ndarray:
    return kernels.box_sum3d(x, r)


def lncc_t(a, b, window: int = 9) -> Tensor:
    """Differentiable mean local NCC between two 3D tensors, in [-1, 1].

    Statistics are accumulated in float64; per-window variances are floored
    at VAR_FLOOR before the division, which pins flat-window correlations
    to 0 instead of blowing up. The backward pass reduces to four box
    filters per argument.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"dims mismatch {a.value.shape} vs {b.value.shape}")
    if a.value.ndim != 3:
        raise ValueError("lncc expects 3D volumes")
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    r = window // 2
    av = np.asarray(a.value, dtype=np.float64)
    bv = np.asarray(b.value, dtype=np.float64)
    n = _window_counts(a.value.shape, r)

    sa, sb = _box(av, r), _box(bv, r)
    cov = _box(av * bv, r) - sa * sb / n
    va = _box(av * av, r) - sa * sa / n
    vb = _box(bv * bv, r) - sb * sb / n
    va_f = np.maximum(va, VAR_FLOOR)
    vb_f = np.maximum(vb, VAR_FLOOR)
    inv_d = 1.0 / np.sqrt(va_f * vb_f)
    out = Tensor(np.asarray(np.mean(cov * inv_d)), parents=(a, b))

    def bw(g):
        scale = float(g) / cov.size
        # d(ncc)/d(variance) vanishes wherever the floor is active
        qa = np.where(va > VAR_FLOOR, -0.5 * cov / va_f, 0.0) * inv_d
        qb = np.where(vb > VAR_FLOOR, -0.5 * cov / vb_f, 0.0) * inv_d
        if a.requires_grad:
            ga = (
                bv * _box(inv_d, r)
                - _box(sb * inv_d / n, r)
                + 2.0 * av * _box(qa, r)
                - 2.0 * _box(qa * sa / n, r)
            )
            a.accumulate(scale * ga)
        if b.requires_grad:
            gb = (
                av * _box(inv_d, r)
                - _box(sa * inv_d / n, r)
                + 2.0 * bv * _box(qb, r)
                - 2.0 * _box(qb * sb / n, r)
            )
            b.accumulate(scale * gb)

    out._backward_fn = bw if out.requires_grad else None
    return out


def lncc(f: Volume3D, g: Volume3D, window: int = 9) -> float:
    """Mean local normalized cross-correlation of two volumes."""
    if f.dims != g.dims:
        raise ValueError(f"dims mismatch {f.dims} vs {g.dims}")
    return float(lncc_t(Tensor(f.data), Tensor(g.data), window).value)


# ---------------------------------------------------------------------------
# regularizer: bending energy
# ---------------------------------------------------------------------------


def bending_energy_t(phi) -> Tensor:
    """Mean squared second derivatives of a (3, nx, ny, nz) field tensor.

    Central differences on the common interior; mixed terms counted twice
    (thin-plate form). The mean runs over interior voxels and the three
    components jointly.
    """
    phi = as_tensor(phi)
    if phi.value.ndim != 4 or phi.value.shape[0] != 3:
        raise ValueError(f"expected (3, nx, ny, nz) field, got {phi.value.shape}")
    dims = phi.value.shape[1:]
    if min(dims) < 3:
        raise ValueError("bending energy needs at least 3 voxels per axis")

    def shift(dx: int, dy: int, dz: int) -> Tensor:
        idx = (slice(None),) + tuple(
            slice(1 + d, n - 1 + d if n - 1 + d != 0 else None)
            for d, n in zip((dx, dy, dz), dims)
        )
        return phi[idx]

    c = shift(0, 0, 0)
    terms = []
    for ax in range(3):
        lo = shift(*(-(k == ax) for k in range(3)))
        hi = shift(*(+(k == ax) for k in range(3)))
        d2 = hi - 2.0 * c + lo
        terms.append(d2 * d2)
    for ax, bx in ((0, 1), (0, 2), (1, 2)):
        def off(sa: int, sb: int) -> Tensor:
            d = [0, 0, 0]
            d[ax], d[bx] = sa, sb
            return shift(*d)

        mixed = (off(1, 1) - off(1, -1) - off(-1, 1) + off(-1, -1)) * 0.25
        terms.append(2.0 * (mixed * mixed))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ops.tmean(total)


def bending_energy(phi: DisplacementField) -> float:
    return float(bending_energy_t(Tensor(phi.vectors)).value)


# ---------------------------------------------------------------------------
# differentiable warps
# ---------------------------------------------------------------------------


def warp_t(vol, phi) -> Tensor:
    """Warp channels (C, nx, ny, nz) by a (3, nx, ny, nz) field tensor.

    Gradients flow to both the channels and the field; field gradients are
    zeroed where border clamping saturates the interpolation.
    """
    vol, phi = as_tensor(vol), as_tensor(phi)
    if vol.value.ndim != 4 or phi.value.shape != (3, *vol.value.shape[1:]):
        raise ValueError(
            f"warp shapes incompatible: {vol.value.shape} vs {phi.value.shape}"
        )
    dims = vol.value.shape[1:]
    coords = (identity_coords(dims, dtype=vol.value.dtype) + phi.value).reshape(3, -1)
    sampled = kernels.trilinear_gather(vol.value, coords)
    out = Tensor(sampled.reshape(vol.value.shape), parents=(vol, phi))

    def bw(g):
        gflat = np.ascontiguousarray(g.reshape(g.shape[0], -1))
        gvol, gcoords = kernels.trilinear_gather_grad(vol.value, coords, gflat)
        if vol.requires_grad:
            vol.accumulate(gvol)
        if phi.requires_grad:
            phi.accumulate(gcoords.reshape(phi.value.shape))

    out._backward_fn = bw if out.requires_grad else None
    return out


def reg_loss_t(f, m, phi, lambda1: float, window: int = 9) -> Tensor:
    """-lncc(f, m warped by phi) + lambda1 * bending_energy(phi)."""
    f, m, phi = as_tensor(f), as_tensor(m), as_tensor(phi)
    warped = warp_t(ops.reshape(m, (1, *m.value.shape)), phi)[0]
    loss = -lncc_t(f, warped, window)
    if lambda1 != 0.0:
        loss = loss + float(lambda1) * bending_energy_t(phi)
    return loss


def reg_loss(
    f: Volume3D, m: Volume3D, phi: DisplacementField, lambda1: float, window: int = 9
) -> float:
    if not (f.dims == m.dims == phi.dims):
        raise ValueError(f"dims mismatch {f.dims} / {m.dims} / {phi.dims}")
    return float(
        reg_loss_t(
            Tensor(f.data), Tensor(m.data), Tensor(phi.vectors), lambda1, window
        ).value
    )


# ---------------------------------------------------------------------------
# affine pre-alignment
# ---------------------------------------------------------------------------


def _intensity_centroid(v: Volume3D) -> np.ndarray:
    """Physical centroid weighted by inverted intensity (vessels are dark)."""
    data = v.data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    w = (hi - data) / (hi - lo) if hi > lo else np.ones_like(data)
    total = float(w.sum())
    coords = identity_coords(v.dims) * np.asarray(v.spacing).reshape(3, 1, 1, 1)
    return (coords * w).sum(axis=(1, 2, 3)) / total


def _affine_warp_t(
    m64: np.ndarray,
    mat: Tensor,
    trans: Tensor,
    dims_f: tuple[int, int, int],
    spacing_f: tuple[float, float, float],
    spacing_m: tuple[float, float, float],
) -> Tensor:
    """Resample the moving image through q = M p + t (physical mm)."""
    p = identity_coords(dims_f) * np.asarray(spacing_f).reshape(3, 1, 1, 1)
    p2 = p.reshape(3, -1)
    sm = np.asarray(spacing_m, dtype=np.float64).reshape(3, 1)
    a = mat.value.astype(np.float64).reshape(3, 3)
    t = trans.value.astype(np.float64).reshape(3, 1)
    coords = (a @ p2 + t) / sm
    sampled = kernels.trilinear_gather(m64[None], coords)
    out = Tensor(sampled.reshape(dims_f), parents=(mat, trans))

    def bw(g):
        gflat = np.ascontiguousarray(g.reshape(1, -1), dtype=np.float64)
        _, gcoords = kernels.trilinear_gather_grad(m64[None], coords, gflat)
        gq = gcoords / sm
        mat.accumulate((gq @ p2.T).reshape(9).astype(mat.value.dtype))
        trans.accumulate(gq.sum(axis=1).astype(trans.value.dtype))

    out._backward_fn = bw if out.requires_grad else None
    return out


def _affine_stage(
    f64: np.ndarray,
    m64: np.ndarray,
    spacing_f: tuple[float, float, float],
    spacing_m: tuple[float, float, float],
    mat0: np.ndarray,
    t0: np.ndarray,
    window: int,
    iterations: int,
    lr_matrix: float,
    lr_translation: float,
) -> tuple[np.ndarray, np.ndarray]:
    ps_mat = ParamSet()
    ps_tr = ParamSet()
    mat = ps_mat.param("matrix", mat0.reshape(9))
    trans = ps_tr.param("translation", t0)
    cfg_mat = OptimizerConfig(lr0=lr_matrix, total_iters=iterations)
    cfg_tr = OptimizerConfig(lr0=lr_translation, total_iters=iterations)
    f_t = Tensor(f64)
    for it in range(iterations):
        ps_mat.zero_grad()
        ps_tr.zero_grad()
        warped = _affine_warp_t(m64, mat, trans, f64.shape, spacing_f, spacing_m)
        loss = -lncc_t(f_t, warped, window)
        if not np.isfinite(loss.value):
            raise RegistrationError(f"affine alignment diverged at iteration {it}")
        loss.backward()
        opt_step(ps_mat, cfg_mat, it)
        opt_step(ps_tr, cfg_tr, it)
    return (
        mat.value.astype(np.float64).reshape(3, 3),
        trans.value.astype(np.float64),
    )


def affine_align(
    f: Volume3D,
    m: Volume3D,
    window: int = 9,
    iterations: int = 150,
    lr_matrix: float = 0.01,
    lr_translation: float = 0.4,
) -> AffineTransform:
    """12-parameter affine mapping fixed physical points into moving space.

    Gradient descent on -lncc(f, m resampled through the affine), with the
    translation initialized from inverted-intensity centroids. Parameters
    live in physical space, so a half-resolution pass warms up the
    full-resolution one whenever the grids allow it. Raises on a non-finite
    loss or a collapsed matrix.
    """
    f64 = f.data.astype(np.float64)
    m64 = np.ascontiguousarray(m.data, dtype=np.float64)
    mat0 = np.eye(3)
    t0 = _intensity_centroid(m) - _intensity_centroid(f)

    coarse_ok = all(s % 2 == 0 and s >= 16 for s in (*f.dims, *m.dims))
    if coarse_ok:
        sf2 = tuple(2.0 * s for s in f.spacing)
        sm2 = tuple(2.0 * s for s in m.spacing)
        mat0, t0 = _affine_stage(
            _downsample2(f64),
            np.ascontiguousarray(_downsample2(m64)),
            sf2,
            sm2,
            mat0,
            t0,
            window,
            iterations - iterations // 2,
            lr_matrix,
            lr_translation,
        )
    a, t = _affine_stage(
        f64,
        m64,
        f.spacing,
        m.spacing,
        mat0,
        t0,
        window,
        iterations // 2 if coarse_ok else iterations,
        lr_matrix,
        lr_translation,
    )
    if abs(np.linalg.det(a)) <= 1e-8:
        raise RegistrationError("affine alignment collapsed to a singular matrix")
    return AffineTransform(a, t)


# ---------------------------------------------------------------------------
# instance mode: multiresolution direct descent on the field
# ---------------------------------------------------------------------------


def _downsample2(vol: np.ndarray) -> np.ndarray:
    d, h, w = vol.shape
    return vol.reshape(d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(1, 3, 5))


def _upsample_field2(phi: np.ndarray) -> np.ndarray:
    """Double a (3, d, h, w) field spatially; offsets scale with the grid."""
    dims = phi.shape[1:]
    axes = [(np.arange(2 * s, dtype=np.float64) + 0.5) / 2.0 - 0.5 for s in dims]
    grid = np.stack(np.meshgrid(*axes, indexing="ij")).reshape(3, -1)
    up = kernels.trilinear_gather(phi.astype(np.float64), grid)
    return 2.0 * up.reshape(3, *(2 * s for s in dims))


def instance_optimize(f: Volume3D, m: Volume3D, cfg: RegConfig) -> DisplacementField:
    """Optimize a displacement field for one (fixed, moving) pair.

    Coarse-to-fine over cfg.pyramid_levels average-pooled octaves; Adam on
    the raw field values with cfg.iterations steps per level. Dims must be
    divisible by 2**(levels-1).
    """
    if f.dims != m.dims:
        raise ValueError(f"dims mismatch {f.dims} vs {m.dims}")
    factor = 2 ** (cfg.pyramid_levels - 1)
    if any(s % factor for s in f.dims):
        raise ValueError(
            f"dims {f.dims} not divisible by {factor} for {cfg.pyramid_levels} levels"
        )

    pyr_f = [f.data.astype(np.float64)]
    pyr_m = [m.data.astype(np.float64)]
    for _ in range(cfg.pyramid_levels - 1):
        pyr_f.append(_downsample2(pyr_f[-1]))
        pyr_m.append(_downsample2(pyr_m[-1]))

    phi_val = np.zeros((3, *pyr_f[-1].shape), dtype=np.float32)
    for level in range(cfg.pyramid_levels - 1, -1, -1):
        f_l, m_l = pyr_f[level], pyr_m[level]
        ps = ParamSet()
        phi = ps.param("phi", phi_val)
        opt_cfg = OptimizerConfig(lr0=cfg.instance_lr, total_iters=cfg.iterations)
        f_t, m_t = Tensor(f_l), Tensor(m_l)
        # Adam steps are scale-free, so rounding-noise gradients near an
        # exact optimum still move the field; keep the best iterate instead
        # of the last one.
        best_loss = np.inf
        best_phi = phi.value.copy()
        for it in range(cfg.iterations + 1):
            ps.zero_grad()
            loss = reg_loss_t(f_t, m_t, phi, cfg.lambda1, cfg.lncc_window)
            if not np.isfinite(loss.value):
                raise RegistrationError(
                    f"instance optimization diverged (level {level}, iteration {it}, "
                    f"loss {float(loss.value)!r})"
                )
            if float(loss.value) < best_loss:
                best_loss = float(loss.value)
                best_phi = phi.value.copy()
            if it == cfg.iterations:
                break
            loss.backward()
            opt_step(ps, opt_cfg, it)
        phi_val = best_phi if level == 0 else _upsample_field2(best_phi).astype(
            np.float32
        )
    return DisplacementField(phi_val.astype(np.float32), f.spacing)


# ---------------------------------------------------------------------------
# amortized mode: displacement network
# ---------------------------------------------------------------------------


def _conv_init(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    fan_in = cin * k**3
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k, k))


class RegNet:
    """Encoder-decoder field predictor over a concatenated (f, m) pair.

    Four stride-2 levels with leaky ReLU, mirrored decoder with skip
    concatenation, and a 3-channel head initialized near zero so training
    starts from an almost-identity warp.
    """

    ENC = (8, 16, 16, 32, 32)  # full-res stem then four stride-2 blocks
    DEC = (32, 16, 16, 16)

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.ps = ParamSet()
        chans = [2, *self.ENC]
        for i in range(len(self.ENC)):
            self.ps.param(f"enc{i}.w", _conv_init(rng, chans[i + 1], chans[i], 3))
            self.ps.param(f"enc{i}.b", np.zeros(chans[i + 1]))
        skip = list(self.ENC[:-1])[::-1]  # finest-last encoder outputs
        up_in = self.ENC[-1]
        for i, cout in enumerate(self.DEC):
            cin = up_in + skip[i]
            self.ps.param(f"dec{i}.w", _conv_init(rng, cout, cin, 3))
            self.ps.param(f"dec{i}.b", np.zeros(cout))
            up_in = cout
        self.ps.param("head.w", 0.01 * _conv_init(rng, 3, self.DEC[-1], 3))
        self.ps.param("head.b", np.zeros(3))

    def forward(self, f: np.ndarray, m: np.ndarray) -> Tensor:
        """(nx, ny, nz) pair -> (3, nx, ny, nz) displacement tensor."""
        x = Tensor(np.stack([f, m]).astype(np.float32)[None])
        feats = []
        for i in range(len(self.ENC)):
            stride = 1 if i == 0 else 2
            x = ops.leaky_relu(
                ops.conv3d(x, self.ps[f"enc{i}.w"], self.ps[f"enc{i}.b"], stride=stride)
            )
            feats.append(x)
        x = feats[-1]
        for i in range(len(self.DEC)):
            x = ops.concat([ops.upsample2x(x), feats[-2 - i]], axis=1)
            x = ops.leaky_relu(
                ops.conv3d(x, self.ps[f"dec{i}.w"], self.ps[f"dec{i}.b"])
            )
        out = ops.conv3d(x, self.ps["head.w"], self.ps["head.b"])
        return out[0]

    def predict(self, f: Volume3D, m: Volume3D) -> DisplacementField:
        if f.dims != m.dims:
            raise ValueError(f"dims mismatch {f.dims} vs {m.dims}")
        phi = self.forward(f.data, m.data)
        return DisplacementField(phi.value.astype(np.float32), f.spacing)


def train_reg_net(
    cohort: list[tuple[Volume3D, Volume3D]], cfg: RegConfig
) -> tuple[RegNet, list[float]]:
    """Train one field predictor over all (fixed, moving) pairs.

    Steps cycle through the pairs in order and minimize the registration
    loss; AdamW with a linearly decaying learning rate. Returns the network
    and the per-step loss trace. Dims must be divisible by 16 (four
    stride-2 levels).
    """
    if not cohort:
        raise ValueError("empty training cohort")
    dims = cohort[0][0].dims
    if any(s % 16 for s in dims):
        raise ValueError(f"dims {dims} must be divisible by 16")
    for f, m in cohort:
        if f.dims != dims or m.dims != dims:
            raise ValueError("all pairs must share dims")

    net = RegNet(seed=cfg.seed)
    opt_cfg = OptimizerConfig(
        kind="adamw",
        lr0=cfg.lr0,
        weight_decay=cfg.weight_decay,
        total_iters=cfg.iterations,
    )
    losses: list[float] = []
    for it in range(cfg.iterations):
        # cyclic order keeps any loss window spanning a multiple of the
        # cohort size exactly balanced across pairs, so moving averages
        # track learning rather than pair difficulty
        f, m = cohort[it % len(cohort)]
        net.ps.zero_grad()
        phi = net.forward(f.data, m.data)
        loss = reg_loss_t(
            Tensor(f.data.astype(np.float32)),
            Tensor(m.data.astype(np.float32)),
            phi,
            cfg.lambda1,
            cfg.lncc_window,
        )
        if not np.isfinite(loss.value):
            raise RegistrationError(
                f"network training diverged at iteration {it} "
                f"(loss {float(loss.value)!r})"
            )
        losses.append(float(loss.value))
        loss.backward()
        opt_step(net.ps, opt_cfg, it)
    return net, losses


# ---------------------------------------------------------------------------
# label propagation
# ---------------------------------------------------------------------------


def propagate_labels(
    atlas_labels: LabelMap,
    phi: DisplacementField,
    expected_scheme: VesselScheme | None = None,
) -> LabelMap:
    """Warp atlas labels through a subject registration field."""
    if atlas_labels.dims != phi.dims:
        raise ValueError(f"dims mismatch {atlas_labels.dims} vs {phi.dims}")
    if (
        expected_scheme is not None
        and atlas_labels.scheme is not None
        and atlas_labels.scheme.anomaly != expected_scheme.anomaly
    ):
        raise ValueError(
            f"scheme mismatch: atlas is {atlas_labels.scheme.anomaly}, "
            f"subject expects {expected_scheme.anomaly}"
        )
    return warp_labels(atlas_labels, phi)
