"""Decoded image tiles and the PNG codec shared by the fetcher, the corpus writer and the loaders."""
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from core.errors import CorruptResponseError, DomainError

Provenance = Tuple[str, int, int, int]  # (fips, school_index, grid_row, grid_col)


@dataclass
class ImageTile:
    pixels: np.ndarray            # H x W x 3, float, values in [0, 1]
    provenance: Provenance = field(default=("", 0, 0, 0))

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise DomainError(f"tile {self.provenance} must be HxWx3, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min(initial=0.0) < 0.0 or px.max(initial=0.0) > 1.0:
            raise DomainError(f"tile {self.provenance} has values outside [0, 1]")

    @property
    def size(self) -> Tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


def tile_relpath(provenance: Provenance) -> Path:
    """Cache / corpus layout: {fips}/{school}/{row}_{col}.png"""
    fips, school, row, col = provenance
    return Path(str(fips)) / str(int(school)) / f"{int(row)}_{int(col)}.png"


def decode_png(payload: bytes, provenance: Provenance = ("", 0, 0, 0), expected_size=None) -> ImageTile:
    try:
        img = Image.open(io.BytesIO(payload))
        img.load()
    except (UnidentifiedImageError, OSError) as e:
        raise CorruptResponseError(f"payload for {provenance} is not an image: {e}")
    if img.format != "PNG":
        raise CorruptResponseError(f"payload for {provenance} is {img.format}, only PNG is supported")
    if expected_size is not None and img.size != tuple(expected_size):
        raise CorruptResponseError(f"payload for {provenance} is {img.size[0]}x{img.size[1]}, "
                                   f"expected {expected_size[0]}x{expected_size[1]}")
    pixels = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return ImageTile(pixels=pixels, provenance=provenance)


def encode_png(pixels_u8: np.ndarray) -> bytes:
    buf = io.BytesIO()
    # fixed compression level keeps bytes reproducible
    Image.fromarray(np.ascontiguousarray(pixels_u8, dtype=np.uint8)).save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
