"""Square scalar image grids and display windowing.

Two unit conventions run through the pipeline: raw attenuation images in
Hounsfield units ("HU") and display-ready images normalized to [0, 1]
("normalized"). The tag is carried on the grid so downstream code can
refuse mixed-unit operations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_HU = "HU"
UNIT_NORMALIZED = "normalized"
_UNITS = (UNIT_HU, UNIT_NORMALIZED)


class GridError(ValueError):
    """Invalid image grid construction or incompatible grid pair."""


@dataclass
class ImageGrid:
    """Square 2D scalar field with pixel-size metadata.

    values are row-major (row 0 is the top of the image); pixel_size is
    the physical edge length of one pixel in millimetres.
    """

    values: np.ndarray
    pixel_size: float
    unit_tag: str = UNIT_HU

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise GridError(f"expected 2D values, got shape {self.values.shape}")
        h, w = self.values.shape
        if h != w:
            raise GridError(f"image must be square, got {h}x{w}")
        if w <= 0 or w % 2 != 0:
            raise GridError(f"width must be a positive even number, got {w}")
        if self.pixel_size <= 0:
            raise GridError(f"pixel_size must be positive, got {self.pixel_size}")
        if self.unit_tag not in _UNITS:
            raise GridError(f"unknown unit_tag {self.unit_tag!r}")
        if not np.all(np.isfinite(self.values)):
            raise GridError("image contains non-finite values")
        if self.unit_tag == UNIT_NORMALIZED:
            lo, hi = float(self.values.min()), float(self.values.max())
            if lo < 0.0 or hi > 1.0:
                raise GridError(f"normalized image out of [0,1]: min={lo}, max={hi}")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def with_values(self, values: np.ndarray, unit_tag: str | None = None) -> "ImageGrid":
        """New grid sharing this grid's metadata."""
        return ImageGrid(values, self.pixel_size, unit_tag or self.unit_tag)

    def retag(self, unit_tag: str) -> "ImageGrid":
        """Reinterpret the same values under another unit tag (no rescaling)."""
        return ImageGrid(self.values, self.pixel_size, unit_tag)


@dataclass(frozen=True)
class WindowSpec:
    """Display window: center `level` and full `width`, both in HU."""

    level: float
    width: float

    def __post_init__(self):
        if self.width <= 0:
            raise GridError(f"window width must be > 0, got {self.width}")

    @property
    def lower(self) -> float:
        return self.level - self.width / 2.0

    @property
    def upper(self) -> float:
        return self.level + self.width / 2.0


# Lung parenchyma window used throughout: [-1450, 250] HU.
LUNG_WINDOW = WindowSpec(level=-600.0, width=1700.0)


def apply_window(image: ImageGrid, w: WindowSpec = LUNG_WINDOW) -> ImageGrid:
    """Clip an HU image to the window and map it affinely onto [0, 1].

    The window endpoints map exactly: lower -> 0.0, level -> 0.5,
    upper -> 1.0.
    """
    if image.unit_tag != UNIT_HU:
        raise GridError(f"apply_window expects an HU image, got {image.unit_tag!r}")
    clipped = np.clip(image.values, w.lower, w.upper)
    out = (clipped - w.lower) / w.width
    return ImageGrid(out, image.pixel_size, UNIT_NORMALIZED)


def quantize_unit(values: np.ndarray, steps: int = 1 << 16) -> np.ndarray:
    """Snap values in [0, 1] to the grid k/steps (steps a power of two).

    On this grid the residual identity sparse - (sparse - full) == full is
    exact in float32: every k/2**16 with k in [0, 2**16] and every
    difference of two such values is exactly representable.
    """
    return np.round(np.asarray(values) * steps) / steps
