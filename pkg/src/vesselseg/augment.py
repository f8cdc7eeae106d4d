"""Stochastic training augmentation and the 8-orientation test-time group.

Spatial transforms move image, mask, and weight map through the identical
geometry (bilinear for image and weight map, nearest for the mask so it
stays binary).  Photometric transforms touch the image only.  All sampling
comes from an explicit numpy Generator, so per-sample streams derived from
(seed, epoch, index) reproduce bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import AugmentConfig
from .preprocess import clahe, gaussian_blur, lab_to_rgb_float, rgb_to_lab


# --- dihedral group ---------------------------------------------------------

@dataclass(frozen=True)
class D4Transform:
    """k counter-clockwise quarter turns, then an optional horizontal flip."""
    rotations: int
    hflip: bool

    def apply(self, arr: np.ndarray) -> np.ndarray:
        out = np.rot90(arr, self.rotations, axes=(-2, -1))
        if self.hflip:
            out = out[..., ::-1]
        return np.ascontiguousarray(out)

    def inverse(self) -> "D4Transform":
        # reflections are involutions; rotations invert to 4-k turns
        if self.hflip:
            return self
        return D4Transform((4 - self.rotations) % 4, False)

    def apply_inverse(self, arr: np.ndarray) -> np.ndarray:
        if self.hflip:
            arr = arr[..., ::-1]
        return np.ascontiguousarray(np.rot90(arr, -self.rotations, axes=(-2, -1)))


D4_TRANSFORMS: tuple[D4Transform, ...] = tuple(
    D4Transform(k, f) for f in (False, True) for k in range(4)
)


def tta_expand(img: np.ndarray) -> list[np.ndarray]:
    """All 8 dihedral orientations of a square [..., H, W] array."""
    if img.shape[-1] != img.shape[-2]:
        raise ValueError(f"tta_expand: input must be square, got {img.shape}")
    return [t.apply(img) for t in D4_TRANSFORMS]


def tta_fold(prob_maps: list[np.ndarray]) -> np.ndarray:
    """Inverse-transform the 8 orientation predictions and average."""
    if len(prob_maps) != len(D4_TRANSFORMS):
        raise ValueError(f"tta_fold: expected {len(D4_TRANSFORMS)} maps, got {len(prob_maps)}")
    acc = np.zeros_like(prob_maps[0], dtype=np.float64)
    for t, pm in zip(D4_TRANSFORMS, prob_maps):
        acc += t.apply_inverse(pm)
    return acc / len(D4_TRANSFORMS)


# --- geometric resampling helpers -------------------------------------------

def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx > n - 1, period - idx, idx)


def _sample_bilinear(arr: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = arr.shape[-2], arr.shape[-1]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    y0r = _reflect_index(y0, h)
    y1r = _reflect_index(y0 + 1, h)
    x0r = _reflect_index(x0, w)
    x1r = _reflect_index(x0 + 1, w)
    top = arr[..., y0r, x0r] * (1 - fx) + arr[..., y0r, x1r] * fx
    bot = arr[..., y1r, x0r] * (1 - fx) + arr[..., y1r, x1r] * fx
    return top * (1 - fy) + bot * fy


def _sample_nearest(arr: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = arr.shape[-2], arr.shape[-1]
    yi = _reflect_index(np.rint(ys).astype(np.int64), h)
    xi = _reflect_index(np.rint(xs).astype(np.int64), w)
    return arr[..., yi, xi]


def _warp_all(img: np.ndarray, mask: np.ndarray, wmap: np.ndarray,
              ys: np.ndarray, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    img_out = np.stack([_sample_bilinear(img[..., c], ys, xs)
                        for c in range(img.shape[-1])], axis=-1)
    return img_out, _sample_nearest(mask, ys, xs), _sample_bilinear(wmap, ys, xs)


# --- spatial augmentation ----------------------------------------------------

def spatial_augment(img: np.ndarray, mask: np.ndarray, wmap: np.ndarray,
                    cfg: AugmentConfig, rng: np.random.Generator
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flips, quarter turns, shift-scale-rotate, and elastic deformation.

    img is [H,W,3] float in [0,1]; mask is [H,W] in {0,1}; wmap is [H,W].
    The same geometric map is applied to all three.
    """
    if img.shape[:2] != mask.shape or mask.shape != wmap.shape:
        raise ValueError("spatial_augment: image/mask/weight shapes must align")
    img = img.copy()
    mask = mask.copy()
    wmap = wmap.copy()

    if rng.random() < cfg.hflip_prob:
        img, mask, wmap = img[:, ::-1], mask[:, ::-1], wmap[:, ::-1]
    if rng.random() < cfg.vflip_prob:
        img, mask, wmap = img[::-1], mask[::-1], wmap[::-1]
    if rng.random() < cfg.rot90_prob:
        k = int(rng.integers(1, 4))
        img = np.rot90(img, k, axes=(0, 1))
        mask = np.rot90(mask, k, axes=(0, 1))
        wmap = np.rot90(wmap, k, axes=(0, 1))
    img, mask, wmap = np.ascontiguousarray(img), np.ascontiguousarray(mask), np.ascontiguousarray(wmap)
    h, w = mask.shape

    if rng.random() < cfg.ssr_prob:
        angle = np.deg2rad(rng.uniform(-cfg.rotate_limit_deg, cfg.rotate_limit_deg))
        scale = 1.0 + rng.uniform(-cfg.scale_limit, cfg.scale_limit)
        tx = rng.uniform(-cfg.shift_limit, cfg.shift_limit) * w
        ty = rng.uniform(-cfg.shift_limit, cfg.shift_limit) * h
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        # inverse map: undo translation, then rotation/scale about center
        dy = yy - cy - ty
        dx = xx - cx - tx
        cos_a, sin_a = np.cos(angle), np.sin(angle)
        ys = (cos_a * dy - sin_a * dx) / scale + cy
        xs = (sin_a * dy + cos_a * dx) / scale + cx
        img, mask, wmap = _warp_all(img, mask, wmap, ys, xs)

    if rng.random() < cfg.elastic_prob:
        k = int(2 * np.ceil(2 * cfg.elastic_sigma) + 1)
        dx = gaussian_blur(rng.uniform(-1.0, 1.0, (h, w)), k, cfg.elastic_sigma) * cfg.elastic_alpha
        dy = gaussian_blur(rng.uniform(-1.0, 1.0, (h, w)), k, cfg.elastic_sigma) * cfg.elastic_alpha
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        img, mask, wmap = _warp_all(img, mask, wmap, yy + dy, xx + dx)

    return img, mask, wmap


# --- photometric augmentation -------------------------------------------------

def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    v = maxc
    span = maxc - minc
    s = np.where(maxc > 0, span / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(span > 0, span, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    hue = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    hue = np.where(span > 0, (hue / 6.0) % 1.0, 0.0)
    return np.stack([hue, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hue, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(hue * 6.0).astype(np.int64) % 6
    f = hue * 6.0 - np.floor(hue * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices_r = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5], [v, q, p, p, t, v])
    choices_g = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5], [t, v, v, q, p, p])
    choices_b = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5], [p, p, t, v, v, q])
    return np.stack([choices_r, choices_g, choices_b], axis=-1)


def photometric_augment(img: np.ndarray, cfg: AugmentConfig,
                        rng: np.random.Generator) -> np.ndarray:
    """Brightness/contrast, HSV jitter, CLAHE, gamma, noise, blur.

    Input and output are [H,W,3] float in [0,1]; masks and weight maps are
    never touched by this stage.
    """
    out = img.copy()

    if rng.random() < cfg.brightness_contrast_prob:
        brightness = rng.uniform(-cfg.brightness_limit, cfg.brightness_limit)
        contrast = rng.uniform(-cfg.contrast_limit, cfg.contrast_limit)
        out = (out - 0.5) * (1.0 + contrast) + 0.5 + brightness

    if rng.random() < cfg.hsv_prob:
        hsv = _rgb_to_hsv(np.clip(out, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-cfg.hue_shift, cfg.hue_shift)) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] + rng.uniform(-cfg.sat_shift, cfg.sat_shift), 0.0, 1.0)
        hsv[..., 2] = np.clip(hsv[..., 2] + rng.uniform(-cfg.val_shift, cfg.val_shift), 0.0, 1.0)
        out = _hsv_to_rgb(hsv)

    if rng.random() < cfg.clahe_prob:
        as_u8 = np.clip(np.round(out * 255.0), 0, 255).astype(np.uint8)
        lab = rgb_to_lab(as_u8)
        lab[0] = clahe(np.clip(lab[0] / 100.0, 0.0, 1.0), cfg.clahe_clip, (8, 8)) * 100.0
        out = lab_to_rgb_float(lab).transpose(1, 2, 0)

    if rng.random() < cfg.gamma_prob:
        gamma = rng.uniform(cfg.gamma_low, cfg.gamma_high)
        out = np.clip(out, 0.0, 1.0) ** gamma

    if rng.random() < cfg.noise_prob:
        out = out + rng.normal(0.0, cfg.noise_sigma, out.shape)

    if rng.random() < cfg.blur_prob:
        sigma = rng.uniform(0.5, max(0.5, cfg.blur_sigma))
        k = int(2 * np.ceil(2 * sigma) + 1)
        out = np.stack([gaussian_blur(out[..., c], k, sigma) for c in range(3)], axis=-1)

    return np.clip(out, 0.0, 1.0)


# --- mixup ---------------------------------------------------------------------

def mixup(sample_a: tuple[np.ndarray, np.ndarray, np.ndarray],
          sample_b: tuple[np.ndarray, np.ndarray, np.ndarray],
          alpha: float, rng: np.random.Generator,
          lam: float | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Convex blend of (image, target, weight map) pairs.

    lam ~ Beta(alpha, alpha) unless given.  The blended target is soft, so
    downstream losses must be told the batch carries soft labels.
    """
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    xa, ga, wa = sample_a
    xb, gb, wb = sample_b
    if xa.shape != xb.shape or ga.shape != gb.shape:
        raise ValueError("mixup: sample shapes must match")
    return (lam * xa + (1.0 - lam) * xb,
            lam * ga + (1.0 - lam) * gb,
            lam * wa + (1.0 - lam) * wb,
            lam)
