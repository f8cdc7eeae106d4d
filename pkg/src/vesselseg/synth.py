"""Procedural vessel trees: surrogate data with exact ground truth.

Each sample is a recursive branching random walk rendered as anti-aliased
capsule strokes on a bright background, darkest in the green channel.
Stroke widths decay toward exactly 1 px at the leaves and local contrast
fades toward the canvas periphery, so the thin/low-contrast regime the
losses target is present by construction.

`skeleton_breaks` is the evaluation-side topology metric: it hard-thins
the ground truth (Zhang-Suen) and counts how many extra 8-connected
fragments a prediction induces along the true centerlines.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .config import SynthConfig
from .imagefiles import ManifestRow, write_image, write_manifest


@dataclass
class Segment:
    y0: float
    x0: float
    y1: float
    x1: float
    width: float
    depth: int


@dataclass
class SynthSample:
    image: np.ndarray            # uint8 [H,W,3]
    mask: np.ndarray             # uint8 {0,1} [H,W]
    segments: list[Segment] = field(default_factory=list)


def _stroke_coverage(canvas: np.ndarray, seg: Segment) -> None:
    """Accumulate the anti-aliased coverage of one capsule stroke in place."""
    h, w = canvas.shape
    half = seg.width / 2.0
    pad = half + 1.5
    y_lo = max(0, int(np.floor(min(seg.y0, seg.y1) - pad)))
    y_hi = min(h, int(np.ceil(max(seg.y0, seg.y1) + pad)) + 1)
    x_lo = max(0, int(np.floor(min(seg.x0, seg.x1) - pad)))
    x_hi = min(w, int(np.ceil(max(seg.x0, seg.x1) + pad)) + 1)
    if y_lo >= y_hi or x_lo >= x_hi:
        return
    yy, xx = np.mgrid[y_lo:y_hi, x_lo:x_hi].astype(np.float64)
    dy = seg.y1 - seg.y0
    dx = seg.x1 - seg.x0
    seg_len2 = dy * dy + dx * dx
    if seg_len2 == 0:
        dist = np.hypot(yy - seg.y0, xx - seg.x0)
    else:
        t = np.clip(((yy - seg.y0) * dy + (xx - seg.x0) * dx) / seg_len2, 0.0, 1.0)
        dist = np.hypot(yy - (seg.y0 + t * dy), xx - (seg.x0 + t * dx))
    cov = np.clip(half + 0.5 - dist, 0.0, 1.0)
    region = canvas[y_lo:y_hi, x_lo:x_hi]
    np.maximum(region, cov, out=region)


def _grow(segments: list[Segment], rng: np.random.Generator, cfg: SynthConfig,
          y: float, x: float, angle: float, depth: int) -> None:
    s = cfg.canvas
    width = max(1.0, cfg.root_width * cfg.width_decay ** depth)
    if depth == cfg.depth:
        width = 1.0
    n_steps = max(3, int(round(s * (0.22 * 0.78 ** depth) / 2.5)))
    step = 2.5
    for _ in range(n_steps):
        angle += rng.normal(0.0, cfg.tortuosity)
        ny = y + step * np.sin(angle)
        nx = x + step * np.cos(angle)
        # steer back toward the canvas when a walk heads out of bounds
        if not (1 <= ny < s - 1 and 1 <= nx < s - 1):
            angle += np.pi / 2.0
            ny = np.clip(ny, 1.0, s - 2.0)
            nx = np.clip(nx, 1.0, s - 2.0)
        segments.append(Segment(y, x, ny, nx, width, depth))
        y, x = ny, nx
    if depth < cfg.depth:
        spread = rng.uniform(0.35, 0.75)
        _grow(segments, rng, cfg, y, x, angle - spread, depth + 1)
        _grow(segments, rng, cfg, y, x, angle + spread, depth + 1)


def generate(cfg: SynthConfig, rng: np.random.Generator) -> SynthSample:
    """One deterministic sample for a given generator state."""
    cfg.validate()
    s = cfg.canvas
    segments: list[Segment] = []
    n_roots = int(rng.integers(cfg.roots_min, cfg.roots_max + 1))
    for _ in range(n_roots):
        side = int(rng.integers(0, 4))
        offset = rng.uniform(0.2, 0.8) * s
        if side == 0:
            y, x, angle = 1.0, offset, rng.uniform(0.25, 0.75) * np.pi
        elif side == 1:
            y, x, angle = s - 2.0, offset, -rng.uniform(0.25, 0.75) * np.pi
        elif side == 2:
            y, x, angle = offset, 1.0, rng.uniform(-0.25, 0.25) * np.pi
        else:
            y, x, angle = offset, s - 2.0, np.pi + rng.uniform(-0.25, 0.25) * np.pi
        _grow(segments, rng, cfg, y, x, angle, 0)

    coverage = np.zeros((s, s), dtype=np.float64)
    for seg in segments:
        _stroke_coverage(coverage, seg)
    mask = (coverage >= 0.5).astype(np.uint8)

    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    center = (s - 1) / 2.0
    dnorm = np.hypot(yy - center, xx - center) / (center * np.sqrt(2.0))
    strength = cfg.contrast * (1.0 - 0.45 * dnorm)

    base = np.empty((s, s, 3), dtype=np.float64)
    base[..., 0] = 0.86
    base[..., 1] = 0.80
    base[..., 2] = 0.62
    depth_drop = coverage * strength
    img = base.copy()
    img[..., 0] -= 0.55 * depth_drop
    img[..., 1] -= 1.00 * depth_drop
    img[..., 2] -= 0.35 * depth_drop
    img += rng.normal(0.0, cfg.noise_sigma, img.shape)
    img_u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return SynthSample(image=img_u8, mask=mask, segments=segments)


# --- hard thinning and the break counter -------------------------------------

def _neighbor_stacks(img: np.ndarray) -> tuple[np.ndarray, ...]:
    p = np.pad(img, 1)
    p2 = p[:-2, 1:-1]   # N
    p3 = p[:-2, 2:]     # NE
    p4 = p[1:-1, 2:]    # E
    p5 = p[2:, 2:]      # SE
    p6 = p[2:, 1:-1]    # S
    p7 = p[2:, :-2]     # SW
    p8 = p[1:-1, :-2]   # W
    p9 = p[:-2, :-2]    # NW
    return p2, p3, p4, p5, p6, p7, p8, p9


def _has_block_at(img: np.ndarray, y: int, x: int) -> bool:
    h, w = img.shape
    for dy in (-1, 0):
        for dx in (-1, 0):
            yy, xx = y + dy, x + dx
            if 0 <= yy < h - 1 and 0 <= xx < w - 1:
                if img[yy, xx] and img[yy + 1, xx] and img[yy, xx + 1] and img[yy + 1, xx + 1]:
                    return True
    return False


_RING_OFF = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))
# true 8-adjacency between ring positions (diagonals skip their corner cell)
_RING_ADJ = tuple(
    tuple(j for j in range(8) if j != i
          and max(abs(_RING_OFF[i][0] - _RING_OFF[j][0]),
                  abs(_RING_OFF[i][1] - _RING_OFF[j][1])) <= 1)
    for i in range(8)
)


def _is_simple(ring: list[int]) -> bool:
    """Whether deleting the center keeps its foreground neighbors one
    8-connected component (and the pixel is not a line endpoint)."""
    fg = [i for i in range(8) if ring[i]]
    if len(fg) < 2:
        return False
    seen = {fg[0]}
    stack = [fg[0]]
    while stack:
        i = stack.pop()
        for j in _RING_ADJ[i]:
            if ring[j] and j not in seen:
                seen.add(j)
                stack.append(j)
    return len(seen) == len(fg)


def _remove_staircases(img: np.ndarray) -> np.ndarray:
    """Sequentially delete simple points sitting in 2x2 blocks.

    The parallel thinning scheme leaves staircase and junction squares; a
    pixel is removed only when its punctured neighborhood stays a single
    8-connected component, so component counts are preserved while strict
    1-px width is restored.
    """
    padded = np.pad(img, 1)
    changed = True
    while changed:
        changed = False
        ys, xs = np.nonzero(img)
        for y, x in zip(ys, xs):
            if not img[y, x] or not _has_block_at(img, y, x):
                continue
            ring = [int(padded[y + 1 + dy, x + 1 + dx]) for dy, dx in _RING_OFF]
            if _is_simple(ring):
                img[y, x] = 0
                padded[y + 1, x + 1] = 0
                changed = True
    return img


def zhang_suen_thin(mask: np.ndarray) -> np.ndarray:
    """Morphological thinning to 1-px centerlines.

    Two-subiteration parallel deletion until stable, followed by a
    staircase cleanup so no 2x2 all-ones block survives.
    """
    img = (np.asarray(mask) > 0).astype(np.uint8)
    while True:
        changed = False
        for step in (0, 1):
            p2, p3, p4, p5, p6, p7, p8, p9 = _neighbor_stacks(img)
            ring = np.stack([p2, p3, p4, p5, p6, p7, p8, p9, p2])
            b = ring[:-1].sum(axis=0)
            a = ((ring[:-1] == 0) & (ring[1:] == 1)).sum(axis=0)
            cond = (img == 1) & (b >= 2) & (b <= 6) & (a == 1)
            if step == 0:
                cond &= (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
            else:
                cond &= (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
            if cond.any():
                img[cond] = 0
                changed = True
        if not changed:
            break
    return _remove_staircases(img)


_CC8_STRUCTURE = np.ones((3, 3), dtype=np.int32)


def count_components8(mask: np.ndarray) -> int:
    """Number of 8-connected foreground components."""
    if not np.any(mask):
        return 0
    _, n = ndimage.label(np.asarray(mask) > 0, structure=_CC8_STRUCTURE)
    return int(n)


def skeleton_breaks(pred: np.ndarray, g: np.ndarray) -> int:
    """Extra centerline fragments a prediction induces on the truth.

    B = max(0, CC8(skel(g) & pred) - CC8(skel(g))).  Total misses score 0
    here by design; they are caught by Sensitivity instead.
    """
    if pred.shape != g.shape:
        raise ValueError(f"skeleton_breaks: shape mismatch {pred.shape} vs {g.shape}")
    if not np.any(g):
        return 0
    skel = zhang_suen_thin(g)
    overlap = skel & (np.asarray(pred) > 0)
    return max(0, count_components8(overlap) - count_components8(skel))


# --- dataset emission ----------------------------------------------------------

def write_synth_dataset(out_dir: str, count: int, cfg: SynthConfig,
                        seed: int, dataset_tag: str = "synth") -> str:
    """Write ``count`` samples plus sidecars and a manifest; returns the
    manifest path.  Sample i is generated from stream (seed, i)."""
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    meta_dir = os.path.join(out_dir, "centerlines")
    for d in (img_dir, mask_dir, meta_dir):
        os.makedirs(d, exist_ok=True)
    rows = []
    for i in range(count):
        sample = generate(cfg, np.random.default_rng((seed, i)))
        name = f"{dataset_tag}_{i:04d}"
        img_path = os.path.join(img_dir, f"{name}.png")
        mask_path = os.path.join(mask_dir, f"{name}_mask.png")
        write_image(img_path, sample.image)
        write_image(mask_path, (sample.mask * 255).astype(np.uint8))
        with open(os.path.join(meta_dir, f"{name}.tsv"), "w", encoding="utf-8") as fh:
            fh.write("y0\tx0\ty1\tx1\twidth\tdepth\n")
            for seg in sample.segments:
                fh.write(f"{seg.y0:.3f}\t{seg.x0:.3f}\t{seg.y1:.3f}\t{seg.x1:.3f}"
                         f"\t{seg.width:.3f}\t{seg.depth}\n")
        rows.append(ManifestRow(dataset_tag, img_path, mask_path))
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    write_manifest(manifest_path, rows)
    return manifest_path
