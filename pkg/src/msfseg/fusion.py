"""Multi-scale fusion (MSF) of detection boxes.

Every box predicted at some scale is mapped to the native frame and paints
its confidence into a confidence mask. The masks are summed and normalized
by ``N * max(confidence)`` with ``N`` the number of prediction scales, so a
box found with equal confidence at every scale scores exactly 1. Pixels at
or above the voting threshold are grouped into 8-connected components whose
tight boxes are the fused candidates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .geometry import BoundingBox, GeometryError, ImageSize, scale_box

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise FusionError(f"confidence must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class ScaleDetectionSet:
    """Boxes and confidences predicted at one input resolution."""

    scale: ImageSize
    detections: tuple[Detection, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "detections", tuple(self.detections))
        for d in self.detections:
            if not d.box.within(self.scale):
                raise FusionError(f"box {d.box.as_tuple()} is outside its scale frame {self.scale}")


@dataclass(frozen=True, eq=False)
class FusionMask:
    size: ImageSize
    values: np.ndarray

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FusionMask):
            return NotImplemented
        return self.size == other.size and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class FusedCandidate:
    box: BoundingBox
    peak: float
    component_id: int


def _exact_numerators(scores: Sequence[float]) -> list[int]:
    """Scores as integers over one common power-of-two denominator."""
    ratios = [float(s).as_integer_ratio() for s in scores]
    den = max(q for _, q in ratios)
    return [p * (den // q) for p, q in ratios]


def build_fused_mask(sets: Sequence[ScaleDetectionSet], native: ImageSize) -> FusionMask:
    """Fused, normalized confidence mask in the native frame.

    Each pixel holds the correctly rounded float of the exact rational
    ``sum(c_i covering pixel) / (N * max c)``. Computing it exactly makes the
    result independent of box order and keeps ties such as 3 of 5 equal
    votes at exactly 0.6.
    """
    if not sets:
        raise FusionError("at least one scale set is required")
    if not isinstance(native, ImageSize):
        raise FusionError(f"native frame must be an ImageSize, got {native!r}")
    n_scales = len(sets)

    boxes: list[BoundingBox] = []
    scores: list[float] = []
    for s in sets:
        for d in s.detections:
            try:
                boxes.append(scale_box(d.box, s.scale, native))
            except GeometryError as exc:
                raise FusionError(str(exc)) from exc
            scores.append(d.score)

    values = np.zeros(native.shape, dtype=np.float64)
    if not boxes or max(scores) == 0.0:
        return FusionMask(native, values)

    nums = _exact_numerators(scores)
    denom = n_scales * max(nums)

    # Box edges cut the frame into cells of constant coverage.
    xs = sorted({0, native.width, *(b.min_x for b in boxes), *(b.max_x for b in boxes)})
    ys = sorted({0, native.height, *(b.min_y for b in boxes), *(b.max_y for b in boxes)})
    xi = {x: i for i, x in enumerate(xs)}
    yi = {y: i for i, y in enumerate(ys)}
    diff = np.zeros((len(ys), len(xs)), dtype=object)
    diff[:] = 0
    for b, n in zip(boxes, nums):
        x0, x1, y0, y1 = xi[b.min_x], xi[b.max_x], yi[b.min_y], yi[b.max_y]
        diff[y0, x0] += n
        diff[y0, x1] -= n
        diff[y1, x0] -= n
        diff[y1, x1] += n
    cells = diff.cumsum(axis=0).cumsum(axis=1)[:-1, :-1]
    # int / int is correctly rounded in Python.
    cell_values = np.array([[int(v) / denom for v in row] for row in cells], dtype=np.float64)
    values = np.repeat(np.repeat(cell_values, np.diff(ys), axis=0), np.diff(xs), axis=1)
    return FusionMask(native, np.ascontiguousarray(values))


def threshold_mask(m: FusionMask, lam: float) -> np.ndarray:
    """Majority vote: keep pixels whose fused value is at least ``lam``.

    Untouched pixels (fused value 0) are never kept, so ``lam = 0`` keeps the
    union of all detections rather than the whole image.
    """
    if not math.isfinite(lam) or lam < 0:
        raise FusionError(f"threshold must be a finite value >= 0, got {lam}")
    return (m.values >= lam) & (m.values > 0)


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected labels ``1..K`` numbered in raster-scan discovery order."""
    labels, count = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)
    return labels, int(count)


def components_to_candidates(labels: np.ndarray, m: FusionMask) -> list[FusedCandidate]:
    out = []
    for label, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        ys, xs = sl
        peak = float(m.values[sl][labels[sl] == label].max())
        out.append(FusedCandidate(BoundingBox(xs.start, ys.start, xs.stop, ys.stop), peak, label))
    out.sort(key=lambda c: (-c.peak, c.box.min_y, c.box.min_x))
    return out


def candidates_at(m: FusionMask, lam: float) -> list[FusedCandidate]:
    labels, _ = label_components(threshold_mask(m, lam))
    return components_to_candidates(labels, m)


def msf(sets: Sequence[ScaleDetectionSet], native: ImageSize, lam: float) -> list[FusedCandidate]:
    return candidates_at(build_fused_mask(sets, native), lam)


def single_scale_in_native(s: ScaleDetectionSet, native: ImageSize) -> list[Detection]:
    """Pass-through of one scale's detections, mapped to the native frame."""
    return [Detection(scale_box(d.box, s.scale, native), d.score) for d in s.detections]

