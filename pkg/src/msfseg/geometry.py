"""Box and raster geometry.

Boxes are half-open integer rectangles: pixel ``(x, y)`` lies inside iff
``min_x <= x < max_x`` and ``min_y <= y < max_y``. Rasters are numpy arrays
indexed ``[y, x]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class ImageSize:
    width: int
    height: int

    def __post_init__(self) -> None:
        if int(self.width) != self.width or int(self.height) != self.height:
            raise GeometryError(f"image size must be integral: {self.width}x{self.height}")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"image size must be positive: {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        """numpy ``(rows, cols)`` shape."""
        return (self.height, self.width)

    @classmethod
    def parse(cls, text: str) -> "ImageSize":
        """Parse ``"WxH"`` (``x`` or ``×``)."""
        w, h = text.lower().replace("×", "x").split("x")
        return cls(int(w), int(h))

    @classmethod
    def of(cls, raster: np.ndarray) -> "ImageSize":
        return cls(int(raster.shape[1]), int(raster.shape[0]))

    def __str__(self) -> str:
        return f"{self.width}x{self.height}"


@dataclass(frozen=True, order=True)
class BoundingBox:
    min_x: int
    min_y: int
    max_x: int
    max_y: int

    def __post_init__(self) -> None:
        for v in (self.min_x, self.min_y, self.max_x, self.max_y):
            if int(v) != v:
                raise GeometryError(f"box coordinates must be integers: {self}")
        if self.min_x < 0 or self.min_y < 0:
            raise GeometryError(f"negative box coordinate: {self}")
        if not (self.min_x < self.max_x and self.min_y < self.max_y):
            raise GeometryError(f"empty box: {self}")

    @property
    def width(self) -> int:
        return self.max_x - self.min_x

    @property
    def height(self) -> int:
        return self.max_y - self.min_y

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def slices(self) -> tuple[slice, slice]:
        """``raster[box.slices]`` selects the box interior."""
        return (slice(self.min_y, self.max_y), slice(self.min_x, self.max_x))

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.min_x, self.min_y, self.max_x, self.max_y)

    def within(self, size: ImageSize) -> bool:
        return self.max_x <= size.width and self.max_y <= size.height

    def contains(self, other: "BoundingBox") -> bool:
        return (
            self.min_x <= other.min_x
            and self.min_y <= other.min_y
            and other.max_x <= self.max_x
            and other.max_y <= self.max_y
        )

    def contains_pixel(self, x: int, y: int) -> bool:
        return self.min_x <= x < self.max_x and self.min_y <= y < self.max_y


def box_area(b: BoundingBox) -> int:
    return (b.max_x - b.min_x) * (b.max_y - b.min_y)


def intersection(a: BoundingBox, b: BoundingBox) -> BoundingBox | None:
    """Overlap of two boxes, or ``None`` when they share no pixel."""
    x0, y0 = max(a.min_x, b.min_x), max(a.min_y, b.min_y)
    x1, y1 = min(a.max_x, b.max_x), min(a.max_y, b.max_y)
    if x0 >= x1 or y0 >= y1:
        return None
    return BoundingBox(x0, y0, x1, y1)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = intersection(a, b)
    if inter is None:
        return 0.0
    i = box_area(inter)
    return i / (box_area(a) + box_area(b) - i)


def clip_box(b: BoundingBox, size: ImageSize) -> BoundingBox:
    """Clip to the frame; raises when nothing of the box remains."""
    x1, y1 = min(b.max_x, size.width), min(b.max_y, size.height)
    if b.min_x >= x1 or b.min_y >= y1:
        raise GeometryError(f"box {b.as_tuple()} lies outside {size}")
    return BoundingBox(b.min_x, b.min_y, x1, y1)


def tight_box(mask: np.ndarray) -> BoundingBox | None:
    """Smallest box holding every set pixel of ``mask``."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def _floor_div(num: int, den: int) -> int:
    return num // den


def _ceil_div(num: int, den: int) -> int:
    return -((-num) // den)


def scale_box(b: BoundingBox, src: ImageSize, dst: ImageSize) -> BoundingBox:
    """Map a box between frames, rounding min down and max up.

    Integer arithmetic only, so the mapping is exact and outward rounding
    never shrinks coverage.
    """
    if not b.within(src):
        raise GeometryError(f"box {b.as_tuple()} is outside source frame {src}")
    return BoundingBox(
        _floor_div(b.min_x * dst.width, src.width),
        _floor_div(b.min_y * dst.height, src.height),
        _ceil_div(b.max_x * dst.width, src.width),
        _ceil_div(b.max_y * dst.height, src.height),
    )


@dataclass(frozen=True)
class PatchTransform:
    """Exact record of a window-to-patch nearest-neighbor resampling."""

    source_window: BoundingBox
    patch_size: ImageSize
    resampling: str = "nearest"

    @property
    def scale_x(self) -> Fraction:
        return Fraction(self.patch_size.width, self.source_window.width)

    @property
    def scale_y(self) -> Fraction:
        return Fraction(self.patch_size.height, self.source_window.height)

    def patch_to_source(self) -> tuple[np.ndarray, np.ndarray]:
        """Source column/row sampled by each patch column/row."""
        w = self.source_window
        p = self.patch_size
        xs = w.min_x + (np.arange(p.width, dtype=np.int64) * w.width) // p.width
        ys = w.min_y + (np.arange(p.height, dtype=np.int64) * w.height) // p.height
        return xs, ys

    def source_to_patch(self) -> tuple[np.ndarray, np.ndarray]:
        """Patch column/row read by each window column/row on the way back."""
        w = self.source_window
        p = self.patch_size
        xs = (np.arange(w.width, dtype=np.int64) * p.width) // w.width
        ys = (np.arange(w.height, dtype=np.int64) * p.height) // w.height
        return xs, ys


def resize_nearest(raster: np.ndarray, out: ImageSize) -> np.ndarray:
    """Nearest-neighbor resize of a whole raster (same index rule as patches)."""
    size = ImageSize.of(raster)
    t = PatchTransform(BoundingBox(0, 0, size.width, size.height), out)
    xs, ys = t.patch_to_source()
    return raster[np.ix_(ys, xs)]


def extract_patch(
    image: np.ndarray, window: BoundingBox, out: ImageSize
) -> tuple[np.ndarray, PatchTransform]:
    if not window.within(ImageSize.of(image)):
        raise GeometryError(f"window {window.as_tuple()} exceeds image {ImageSize.of(image)}; clip first")
    t = PatchTransform(window, out)
    xs, ys = t.patch_to_source()
    return image[np.ix_(ys, xs)], t


def reconstruct_mask(patch_mask: np.ndarray, t: PatchTransform, canvas: ImageSize) -> np.ndarray:
    """Resample a patch mask back into its window on an all-zero canvas."""
    if ImageSize.of(patch_mask) != t.patch_size:
        raise GeometryError(
            f"patch mask is {ImageSize.of(patch_mask)}, transform expects {t.patch_size}"
        )
    if not t.source_window.within(canvas):
        raise GeometryError(f"window {t.source_window.as_tuple()} does not fit canvas {canvas}")
    full = np.zeros(canvas.shape, dtype=bool)
    xs, ys = t.source_to_patch()
    full[t.source_window.slices] = np.asarray(patch_mask, dtype=bool)[np.ix_(ys, xs)]
    return full
