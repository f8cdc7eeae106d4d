"""Sample loading and the per-draw augmentation pipeline.

A training sample keeps its native-resolution raw RGB, mask, and weight
map (augmentation happens at native resolution), plus a cached
network-resolution 4-channel tensor of the unaugmented image for
validation and difficulty scoring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import mixup, photometric_augment, spatial_augment
from .config import AugmentConfig
from .engine.nnops import bilinear_resize_array
from .imagefiles import ManifestRow, read_image, read_mask
from .losses import downsample_mask
from .preprocess import assemble_four_channel, locate_optic_disc, weight_map


@dataclass
class TrainSample:
    dataset: str
    image_id: str
    rgb: np.ndarray        # uint8 [H,W,3], native resolution
    mask: np.ndarray       # float64 {0,1} [H,W], native
    wmap: np.ndarray       # float64 [H,W], native
    four: np.ndarray       # float32 [4,R,R], unaugmented, cached
    mask_r: np.ndarray     # float64 {0,1} [R,R]
    wmap_r: np.ndarray     # float64 [R,R]

    @property
    def key(self) -> str:
        return f"{self.dataset}/{self.image_id}"


def load_sample(row: ManifestRow, resolution: int) -> TrainSample:
    rgb = read_image(row.image_path)
    mask = read_mask(row.mask_path).astype(np.float64)
    if mask.shape != rgb.shape[:2]:
        raise ValueError(f"{row.image_path}: mask shape {mask.shape} does not match "
                         f"image {rgb.shape[:2]}")
    disc = locate_optic_disc(rgb)
    wmap = weight_map(disc, *mask.shape)
    return TrainSample(
        dataset=row.dataset,
        image_id=row.image_id,
        rgb=rgb,
        mask=mask,
        wmap=wmap,
        four=assemble_four_channel(rgb, resolution),
        mask_r=downsample_mask(mask, resolution, resolution),
        wmap_r=bilinear_resize_array(wmap, resolution, resolution),
    )


def load_samples(rows: list[ManifestRow], resolution: int) -> list[TrainSample]:
    return [load_sample(r, resolution) for r in rows]


def augmented_draw(sample: TrainSample, resolution: int, cfg: AugmentConfig,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One augmented training instance at network resolution.

    Spatial then photometric augmentation run at native resolution on the
    raw RGB; the enhanced 4-channel assembly runs on the augmented frame
    and everything is resized afterwards.
    """
    img_f = sample.rgb.astype(np.float64) / 255.0
    img_f, mask, wmap = spatial_augment(img_f, sample.mask, sample.wmap, cfg, rng)
    img_f = photometric_augment(img_f, cfg, rng)
    img_u8 = np.clip(np.round(img_f * 255.0), 0, 255).astype(np.uint8)
    four = assemble_four_channel(img_u8, resolution)
    mask_r = downsample_mask(mask, resolution, resolution)
    wmap_r = bilinear_resize_array(wmap, resolution, resolution)
    return four, mask_r, wmap_r


def build_batch(samples: list[TrainSample], indices: np.ndarray, resolution: int,
                cfg: AugmentConfig, aug_rngs: list[np.random.Generator],
                mix_rng: np.random.Generator
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    """Assemble an augmented batch; returns (x, g, w, soft_target).

    Mixup fires per batch with the configured probability, blending the
    batch with its one-step rotation, which turns targets soft for this
    step (the centerline loss term is skipped downstream).
    """
    xs, gs, ws = [], [], []
    for idx, rng in zip(indices, aug_rngs):
        four, mask_r, wmap_r = augmented_draw(samples[int(idx)], resolution, cfg, rng)
        xs.append(four)
        gs.append(mask_r[None])
        ws.append(wmap_r[None])
    x = np.stack(xs).astype(np.float32)
    g = np.stack(gs)
    w = np.stack(ws)
    soft = False
    if len(indices) >= 2 and cfg.mixup_prob > 0 and mix_rng.random() < cfg.mixup_prob:
        lam = float(mix_rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
        xr = np.roll(x, 1, axis=0)
        gr = np.roll(g, 1, axis=0)
        wr = np.roll(w, 1, axis=0)
        x = (lam * x + (1.0 - lam) * xr).astype(np.float32)
        g = lam * g + (1.0 - lam) * gr
        w = lam * w + (1.0 - lam) * wr
        soft = True
    return x, g, w, soft


__all__ = ["TrainSample", "load_sample", "load_samples", "augmented_draw",
           "build_batch", "mixup"]
