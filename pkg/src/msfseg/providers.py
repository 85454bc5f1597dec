"""Stage-1 detectors and stage-2 segmenters.

The built-in providers are classical stand-ins that let the pipeline run end
to end; trained networks plug in through the ``external_files`` binding.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .fusion import Detection, ScaleDetectionSet, label_components
from .geometry import BoundingBox, ImageSize, resize_nearest
from .ingest import hist_equalize
from .interchange import DetectionRecord, group_by_image, read_records
from .pgm import read_mask


class ProviderError(ValueError):
    pass


def otsu_threshold(image: np.ndarray) -> int | None:
    """Gray level ``t`` maximizing between-class variance of ``<= t`` vs ``> t``.

    ``None`` when the image has a single gray level.
    """
    hist = np.bincount(np.asarray(image, dtype=np.uint8).ravel(), minlength=256).astype(np.float64)
    if np.count_nonzero(hist) < 2:
        return None
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    s0 = np.cumsum(hist * levels)
    total, total_sum = w0[-1], s0[-1]
    w1 = total - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (s0 * total - total_sum * w0) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = -1.0
    return int(np.argmax(between[:255]))


class Detector(Protocol):
    def detect(self, image_id: str, image: np.ndarray, scales: Sequence[ImageSize]) -> list[ScaleDetectionSet]: ...


class Segmenter(Protocol):
    def segment(self, image_id: str, patches: Sequence[np.ndarray]) -> list[np.ndarray]: ...


@dataclass(frozen=True)
class BlobDetector:
    """Otsu threshold at each scale, one box per bright 8-connected blob.

    The image is box-filtered over the downsampling footprint before
    nearest sampling, so each scale sees area-averaged pixels. Confidence is
    the blob's mean intensity above the mean background, divided by 255.
    Blobs below ``min_contrast`` gray levels or smaller than ``min_area``
    scale pixels are dropped.
    """

    min_contrast: float = 30.0
    min_area: int = 4

    def detect_one(self, image: np.ndarray, scale: ImageSize) -> ScaleDetectionSet:
        native = ImageSize.of(image)
        footprint = (max(1, -(-native.height // scale.height)), max(1, -(-native.width // scale.width)))
        smooth = image
        if footprint != (1, 1):
            smooth = np.rint(ndimage.uniform_filter(image.astype(np.float64), size=footprint)).astype(np.uint8)
        small = resize_nearest(smooth, scale)
        t = otsu_threshold(small)
        if t is None:
            return ScaleDetectionSet(scale, ())
        fg = small > t
        labels, count = label_components(fg)
        if count == 0:
            return ScaleDetectionSet(scale, ())
        bg = float(small[~fg].mean()) if (~fg).any() else 0.0
        index = np.arange(1, count + 1)
        means = np.atleast_1d(ndimage.mean(small.astype(np.float64), labels, index))
        areas = np.bincount(labels.ravel(), minlength=count + 1)[1:]
        dets = []
        for sl, mean, area in zip(ndimage.find_objects(labels), means, areas):
            contrast = mean - bg
            if contrast < self.min_contrast or area < self.min_area:
                continue
            ys, xs = sl
            dets.append(Detection(BoundingBox(xs.start, ys.start, xs.stop, ys.stop),
                                  float(np.clip(contrast / 255.0, 0.0, 1.0))))
        return ScaleDetectionSet(scale, tuple(dets))

    def detect(self, image_id: str, image: np.ndarray, scales: Sequence[ImageSize]) -> list[ScaleDetectionSet]:
        return [self.detect_one(image, s) for s in scales]


@dataclass(frozen=True)
class ThresholdSegmenter:
    """Otsu inside the patch, keep the largest 8-connected foreground blob.

    A patch whose two Otsu classes differ by less than ``min_contrast`` gray
    levels has no separable foreground and yields an empty mask.
    """

    min_contrast: float = 20.0
    equalize: bool = False

    def segment_one(self, patch: np.ndarray) -> np.ndarray:
        patch = np.asarray(patch, dtype=np.uint8)
        empty = np.zeros(patch.shape, dtype=bool)
        work = hist_equalize(patch) if self.equalize else patch
        t = otsu_threshold(work)
        if t is None:
            return empty
        fg = work > t
        if not fg.any() or fg.all():
            return empty
        if patch[fg].mean() - patch[~fg].mean() < self.min_contrast:
            return empty
        labels, count = label_components(fg)
        sizes = np.bincount(labels.ravel(), minlength=count + 1)
        sizes[0] = 0
        return labels == int(np.argmax(sizes))

    def segment(self, image_id: str, patches: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [self.segment_one(p) for p in patches]


class ExternalDetections:
    """Per-scale detections read verbatim from a JSONL interchange file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.is_file():
            raise ProviderError(f"detections file {self.path} does not exist")
        self.records: dict[str, dict[ImageSize, DetectionRecord]] = group_by_image(read_records(self.path))

    def detect(self, image_id: str, image: np.ndarray, scales: Sequence[ImageSize]) -> list[ScaleDetectionSet]:
        per_scale = self.records.get(image_id, {})
        out = []
        for s in scales:
            if s not in per_scale:
                raise ProviderError(f"{self.path}: no detections for image {image_id!r} at scale {s}")
            out.append(per_scale[s].to_set())
        return out


class ExternalMasks:
    """Patch masks read from ``<dir>/<image_id>_<k>.pgm`` (k = candidate rank)."""

    def __init__(self, directory: str | Path, patch_size: ImageSize):
        self.dir = Path(directory)
        if not self.dir.is_dir():
            raise ProviderError(f"mask directory {self.dir} does not exist")
        self.patch_size = patch_size

    def path_for(self, image_id: str, k: int) -> Path:
        return self.dir / f"{image_id}_{k:03d}.pgm"

    def segment(self, image_id: str, patches: Sequence[np.ndarray]) -> list[np.ndarray]:
        out = []
        for k in range(len(patches)):
            p = self.path_for(image_id, k)
            if not p.is_file():
                raise ProviderError(f"missing patch mask {p}")
            m = read_mask(p)
            if ImageSize.of(m) != self.patch_size:
                raise ProviderError(f"{p} is {ImageSize.of(m)}, expected {self.patch_size}")
            out.append(m)
        return out
