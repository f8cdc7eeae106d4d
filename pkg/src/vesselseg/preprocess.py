"""Fundus preprocessing: CLAHE-enhanced 4-channel assembly, optic-disc
localization, and the peripheral loss-weight map.

Color conversions use CIE L*a*b* under D65 with sRGB gamma; CLAHE follows
the classic tiled histogram-equalization scheme with clipped histograms,
uniform excess redistribution, and bilinear blending of the per-tile
lookup tables between tile centers.
"""

from __future__ import annotations

import numpy as np

from .engine.nnops import bilinear_resize_array

# sRGB <-> XYZ (D65)
_RGB2XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ2RGB = np.linalg.inv(_RGB2XYZ)
_WHITE = np.array([0.95047, 1.0, 1.08883])
_DELTA = 6.0 / 29.0

# fixed enhancement strengths of the two input paths
CLAHE_LAB_CLIP = 2.0
CLAHE_GREEN_CLIP = 3.0
CLAHE_TILES = (8, 8)


def _srgb_linearize(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _srgb_delinearize(c: np.ndarray) -> np.ndarray:
    c = np.clip(c, 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA ** 3, np.cbrt(t), t / (3 * _DELTA ** 2) + 4.0 / 29.0)


def _lab_f_inv(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA, t ** 3, 3 * _DELTA ** 2 * (t - 4.0 / 29.0))


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """8-bit RGB [H,W,3] -> float64 LAB [3,H,W] with L in [0, 100]."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"rgb_to_lab: expected [H,W,3], got {img.shape}")
    rgb = _srgb_linearize(img.astype(np.float64) / 255.0)
    xyz = np.einsum("ij,hwj->hwi", _RGB2XYZ, rgb) / _WHITE
    f = _lab_f(xyz)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab.transpose(2, 0, 1)


def lab_to_rgb_float(lab: np.ndarray) -> np.ndarray:
    """LAB [3,H,W] -> float RGB [3,H,W] in [0,1], gamut-clamped."""
    l, a, b = lab[0], lab[1], lab[2]
    fy = (l + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    xyz = np.stack([_lab_f_inv(fx), _lab_f_inv(fy), _lab_f_inv(fz)], axis=-1) * _WHITE
    rgb = np.einsum("ij,hwj->hwi", _XYZ2RGB, xyz)
    return _srgb_delinearize(rgb).transpose(2, 0, 1)


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """LAB [3,H,W] -> 8-bit RGB [H,W,3]."""
    rgb = lab_to_rgb_float(lab).transpose(1, 2, 0)
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def gaussian_blur(channel: np.ndarray, kernel_size: int,
                  sigma: float | None = None) -> np.ndarray:
    """Separable Gaussian blur with reflective borders.

    sigma defaults to kernel_size / 6, which puts the kernel's +-3 sigma
    support exactly on the window.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"gaussian_blur: kernel must be odd and positive, got {kernel_size}")
    if sigma is None:
        sigma = kernel_size / 6.0
    half = kernel_size // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k /= k.sum()
    padded = np.pad(channel.astype(np.float64), half, mode="reflect")
    rows = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, padded)
    out = np.apply_along_axis(lambda c: np.convolve(c, k, mode="valid"), 0, rows)
    return out


def clahe_tile_luts(q: np.ndarray, clip_limit: float,
                    tiles: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-tile equalization LUTs for a uint8-quantized image.

    Returns (luts[Tr,Tc,256], row_centers, col_centers).  Tiles are sized by
    ceiling division, so edge tiles may be smaller; a constant tile keeps
    the identity mapping.
    """
    h, w = q.shape
    th = max(1, -(-h // tiles[0]))
    tw = max(1, -(-w // tiles[1]))
    row_starts = list(range(0, h, th))
    col_starts = list(range(0, w, tw))
    nr, nc = len(row_starts), len(col_starts)
    luts = np.empty((nr, nc, 256), dtype=np.float64)
    row_centers = np.empty(nr)
    col_centers = np.empty(nc)
    identity = np.arange(256, dtype=np.float64)
    for r, r0 in enumerate(row_starts):
        r1 = min(h, r0 + th)
        row_centers[r] = (r0 + r1 - 1) / 2.0
        for c, c0 in enumerate(col_starts):
            c1 = min(w, c0 + tw)
            if r == 0:
                col_centers[c] = (c0 + c1 - 1) / 2.0
            tile = q[r0:r1, c0:c1]
            npix = tile.size
            if tile.min() == tile.max():
                luts[r, c] = identity
                continue
            hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
            clip_value = clip_limit * npix / 256.0
            excess = np.maximum(hist - clip_value, 0.0).sum()
            hist = np.minimum(hist, clip_value) + excess / 256.0
            cdf = np.cumsum(hist)
            first_nz = int(np.nonzero(hist)[0][0])
            cdf_min = cdf[first_nz]
            denom = npix - cdf_min
            if denom <= 0:
                luts[r, c] = identity
                continue
            luts[r, c] = np.clip(np.round(255.0 * (cdf - cdf_min) / denom), 0.0, 255.0)
    return luts, row_centers, col_centers


def _blend_coords(centers: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos = np.arange(size, dtype=np.float64)
    hi = np.searchsorted(centers, pos, side="right")
    lo = np.clip(hi - 1, 0, len(centers) - 1)
    hi = np.clip(hi, 0, len(centers) - 1)
    span = centers[hi] - centers[lo]
    frac = np.where(span > 0, (pos - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, np.clip(frac, 0.0, 1.0)


def clahe(channel: np.ndarray, clip_limit: float,
          tiles: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on a [0,1] channel.

    The channel is quantized to 256 levels; per-tile histograms are clipped
    at clip_limit * tile_pixels / 256 with the excess spread uniformly, and
    each pixel blends the four surrounding tile mappings bilinearly (edge
    clamped).  Output lives on the 255-step grid back in [0, 1].
    """
    if clip_limit <= 0:
        raise ValueError(f"clahe: clip_limit must be positive, got {clip_limit}")
    q = np.clip(np.round(np.asarray(channel, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    luts, row_centers, col_centers = clahe_tile_luts(q, clip_limit, tiles)
    rlo, rhi, fr = _blend_coords(row_centers, q.shape[0])
    clo, chi, fc = _blend_coords(col_centers, q.shape[1])
    fr = fr[:, None]
    fc = fc[None, :]
    out = ((1 - fr) * (1 - fc) * luts[rlo[:, None], clo[None, :], q]
           + (1 - fr) * fc * luts[rlo[:, None], chi[None, :], q]
           + fr * (1 - fc) * luts[rhi[:, None], clo[None, :], q]
           + fr * fc * luts[rhi[:, None], chi[None, :], q])
    return out / 255.0


def locate_optic_disc(img: np.ndarray) -> tuple[int, int]:
    """Arg-maximum of the Gaussian-blurred LAB L-channel.

    The nominal kernel is 51x51 (sigma = 51/6); images smaller than that
    use the largest odd kernel that fits.  Ties resolve to the smallest
    row-major index.
    """
    lab_l = rgb_to_lab(img)[0]
    h, w = lab_l.shape
    k = min(51, min(h, w))
    if k % 2 == 0:
        k -= 1
    k = max(1, k)
    blurred = gaussian_blur(lab_l, k)
    flat = int(np.argmax(blurred))
    return flat // w, flat % w


def weight_map(center: tuple[int, int], h: int, w: int) -> np.ndarray:
    """Peripheral loss weights 1 + 2*d with d the distance from the disc
    center normalized by the farthest center-to-corner distance."""
    r0, c0 = center
    if not (0 <= r0 < h and 0 <= c0 < w):
        raise ValueError(f"weight_map: center {center} outside {h}x{w} image")
    rows = np.arange(h, dtype=np.float64)[:, None] - r0
    cols = np.arange(w, dtype=np.float64)[None, :] - c0
    dist = np.sqrt(rows ** 2 + cols ** 2)
    corners = [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)]
    denom = max(np.hypot(r0 - cr, c0 - cc) for cr, cc in corners)
    d = dist / denom if denom > 0 else np.zeros_like(dist)
    return 1.0 + 2.0 * d


def assemble_four_channel(img: np.ndarray,
                          target_size: int | None = None) -> np.ndarray:
    """Two-path 4-channel input tensor.

    Channels 1-3: LAB conversion, CLAHE on L (clip 2.0, 8x8 tiles), back to
    RGB.  Channel 4: CLAHE on the raw green channel (clip 3.0, 8x8 tiles).
    Both paths run at native resolution; the stack is bilinearly resized
    to ``target_size`` when given.  Values are float32 in [0, 1].
    """
    lab = rgb_to_lab(img)
    l_eq = clahe(np.clip(lab[0] / 100.0, 0.0, 1.0), CLAHE_LAB_CLIP, CLAHE_TILES) * 100.0
    rgb_eq = lab_to_rgb_float(np.stack([l_eq, lab[1], lab[2]]))
    green_eq = clahe(img[:, :, 1].astype(np.float64) / 255.0, CLAHE_GREEN_CLIP, CLAHE_TILES)
    four = np.concatenate([rgb_eq, green_eq[None]], axis=0)
    if target_size is not None:
        four = bilinear_resize_array(four, target_size, target_size)
    return np.clip(four, 0.0, 1.0).astype(np.float32)
