"""Training-time data augmentation on image/label pairs.

Intensity transforms touch only the image; the single spatial transform (a
small random affine) resamples image and labels through the same map so
correspondence is preserved. All draws come from the caller's generator,
keeping training runs replayable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from archseg.grid import AffineTransform, LabelMap, Volume3D, affine_apply, affine_apply_labels


@dataclass(frozen=True)
class AugmentationConfig:
    """Per-transform probabilities and magnitudes."""

    p_shift: float = 0.3
    shift_max: float = 0.10  # additive intensity offset
    p_noise: float = 0.3
    noise_sigma: float = 0.03
    p_smooth: float = 0.2
    smooth_sigma: tuple[float, float] = (0.4, 1.0)
    p_sharpen: float = 0.15
    sharpen_amount: float = 0.5
    p_contrast: float = 0.3
    contrast_gamma: tuple[float, float] = (0.7, 1.4)
    p_bias: float = 0.2
    bias_amplitude: float = 0.10
    p_affine: float = 0.3
    rotate_deg: float = 4.0
    translate_vox: float = 1.5
    scale_jitter: float = 0.04

    def __post_init__(self) -> None:
        probs = [
            self.p_shift, self.p_noise, self.p_smooth, self.p_sharpen,
            self.p_contrast, self.p_bias, self.p_affine,
        ]
        if any(not (0.0 <= p <= 1.0) for p in probs):
            raise ValueError("augmentation probabilities must lie in [0, 1]")


def _random_affine(
    rng: np.random.Generator, cfg: AugmentationConfig, dims: tuple[int, int, int],
    spacing: tuple[float, float, float],
) -> AffineTransform:
    """Small rotation + isotropic scale jitter + translation about the center."""
    angles = np.deg2rad(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg, size=3))
    rots = []
    for ax, th in enumerate(angles):
        c, s = np.cos(th), np.sin(th)
        r = np.eye(3)
        i, j = [k for k in range(3) if k != ax]
        r[i, i] = c
        r[j, j] = c
        r[i, j] = -s
        r[j, i] = s
        rots.append(r)
    m = rots[2] @ rots[1] @ rots[0]
    m *= 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter)
    center = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0 * np.asarray(spacing)
    shift_mm = rng.uniform(-cfg.translate_vox, cfg.translate_vox, size=3) * np.asarray(
        spacing
    )
    # fixed point at the volume center, then the extra translation
    t = center - m @ center + shift_mm
    return AffineTransform(m, t)


def augment_case(
    image: Volume3D,
    labels: list[LabelMap],
    rng: np.random.Generator,
    cfg: AugmentationConfig | None = None,
) -> tuple[Volume3D, list[LabelMap]]:
    """Randomly perturb an image and its aligned label maps.

    Every label map in ``labels`` receives the identical spatial transform;
    intensity transforms leave them untouched. The image stays in [0, 1].
    """
    cfg = cfg or AugmentationConfig()
    img = image.data.astype(np.float32).copy()
    out_labels = labels

    if rng.random() < cfg.p_affine:
        aff = _random_affine(rng, cfg, image.dims, image.spacing)
        img = affine_apply(Volume3D(img, image.spacing), aff).data
        out_labels = [affine_apply_labels(lab, aff) for lab in labels]

    if rng.random() < cfg.p_shift:
        img = img + rng.uniform(-cfg.shift_max, cfg.shift_max)
    if rng.random() < cfg.p_contrast:
        gamma = rng.uniform(*cfg.contrast_gamma)
        img = np.clip(img, 0.0, None) ** gamma
    if rng.random() < cfg.p_smooth:
        img = ndimage.gaussian_filter(img, rng.uniform(*cfg.smooth_sigma))
    if rng.random() < cfg.p_sharpen:
        blurred = ndimage.gaussian_filter(img, 1.0)
        img = img + cfg.sharpen_amount * (img - blurred)
    if rng.random() < cfg.p_bias:
        field_ = ndimage.gaussian_filter(
            rng.standard_normal(img.shape), max(img.shape) / 5.0
        )
        peak = np.abs(field_).max()
        if peak > 0:
            img = img * (1.0 + cfg.bias_amplitude * field_ / peak)
    if rng.random() < cfg.p_noise:
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)

    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Volume3D(img, image.spacing), list(out_labels)
