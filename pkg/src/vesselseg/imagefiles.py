"""Image and manifest IO.

Supported image formats: 8-bit PNG, PPM (P6), and uncompressed baseline
TIFF.  JPEG inputs are rejected with a pointer to pre-conversion (hand-held
acquisitions distributed as JPEG must be converted to PNG first).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

_ALLOWED_EXT = {".png", ".ppm", ".tif", ".tiff", ".pgm"}

JPEG_MESSAGE = ("JPEG inputs are not supported; convert to PNG first "
                "(e.g. with any image tool) and point the manifest at the PNG")


class ImageIOError(IOError):
    pass


def read_image(path: str) -> np.ndarray:
    """Read an RGB image as uint8 [H,W,3]."""
    ext = os.path.splitext(path)[1].lower()
    if ext in (".jpg", ".jpeg"):
        raise ImageIOError(f"{path}: {JPEG_MESSAGE}")
    if ext not in _ALLOWED_EXT:
        raise ImageIOError(f"{path}: unsupported image extension {ext!r} "
                           f"(expected one of {sorted(_ALLOWED_EXT)})")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot decode image: {exc}") from exc


def read_mask(path: str) -> np.ndarray:
    """Read a binary mask as uint8 {0,1} [H,W]; values > 127 count as vessel."""
    ext = os.path.splitext(path)[1].lower()
    if ext in (".jpg", ".jpeg"):
        raise ImageIOError(f"{path}: {JPEG_MESSAGE}")
    try:
        with Image.open(path) as im:
            gray = np.asarray(im.convert("L"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot decode mask: {exc}") from exc
    return (gray > 127).astype(np.uint8)


def write_image(path: str, arr: np.ndarray) -> None:
    """Write uint8 [H,W,3] RGB or [H,W] grayscale; format from extension."""
    if arr.dtype != np.uint8:
        raise ValueError(f"write_image: expected uint8, got {arr.dtype}")
    Image.fromarray(arr).save(path)


@dataclass(frozen=True)
class ManifestRow:
    dataset: str
    image_path: str
    mask_path: str

    @property
    def image_id(self) -> str:
        return os.path.basename(self.image_path)


MANIFEST_HEADER = "dataset\timage\tmask"


def read_manifest(path: str) -> list[ManifestRow]:
    rows: list[ManifestRow] = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != MANIFEST_HEADER:
            raise ImageIOError(f"{path}: manifest header must be {MANIFEST_HEADER!r}, got {header!r}")
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ImageIOError(f"{path}:{lineno}: expected 3 tab-separated fields")
            dataset, image_path, mask_path = parts
            if not os.path.isabs(image_path):
                image_path = os.path.join(base, image_path)
            if not os.path.isabs(mask_path):
                mask_path = os.path.join(base, mask_path)
            rows.append(ManifestRow(dataset, image_path, mask_path))
    return rows


def write_manifest(path: str, rows: list[ManifestRow]) -> None:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        for row in rows:
            img = os.path.relpath(row.image_path, base)
            msk = os.path.relpath(row.mask_path, base)
            fh.write(f"{row.dataset}\t{img}\t{msk}\n")
