"""8-bit RGB raster container shared by rendering, metrics, and evaluation."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass(frozen=True, eq=False)
class ChartImage:
    """Decoded 8-bit RGB raster, row-major, shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected an (h, w, 3) RGB array, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"expected uint8 pixels, got {px.dtype}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        object.__setattr__(self, "pixels", px)
        px.setflags(write=False)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @classmethod
    def from_file(cls, path: str | Path) -> "ChartImage":
        with Image.open(path) as im:
            return cls(np.asarray(im.convert("RGB"), dtype=np.uint8))

    @classmethod
    def from_bytes(cls, data: bytes) -> "ChartImage":
        with Image.open(io.BytesIO(data)) as im:
            return cls(np.asarray(im.convert("RGB"), dtype=np.uint8))

    @classmethod
    def solid(cls, width: int, height: int, rgb: tuple[int, int, int]) -> "ChartImage":
        block = np.empty((height, width, 3), dtype=np.uint8)
        block[:, :] = rgb
        return cls(block)

    def to_png_bytes(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.pixels, mode="RGB").save(buf, format="PNG")
        return buf.getvalue()

    def save_png(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_png_bytes())

    def same_pixels(self, other: "ChartImage") -> bool:
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )


def resize_to_reference(gen: ChartImage, ref: ChartImage) -> ChartImage:
    """Bilinearly resample ``gen`` to the reference dimensions; no-op when they match."""
    if gen.width == ref.width and gen.height == ref.height:
        return gen
    resized = Image.fromarray(gen.pixels, mode="RGB").resize(
        (ref.width, ref.height), Image.BILINEAR
    )
    return ChartImage(np.asarray(resized, dtype=np.uint8))
