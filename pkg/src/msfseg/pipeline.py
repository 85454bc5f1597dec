"""Two-stage orchestration: multi-scale detection, fusion, patch
segmentation, full-image reconstruction and evaluation.

Ground truth is loaded only after every image has been processed, so no
step between detection and reconstruction can see it.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import fusion
from .fusion import FusedCandidate, FusionMask, ScaleDetectionSet
from .geometry import BoundingBox, ImageSize, PatchTransform, clip_box, extract_patch, reconstruct_mask
from .ingest import Dataset, ManifestEntry, rasterize_truth
from .metrics import EvalReport, FrocPoint, evaluate, operating_point
from .pgm import read_pgm, write_mask
from .providers import (
    BlobDetector,
    Detector,
    ExternalDetections,
    ExternalMasks,
    Segmenter,
    ThresholdSegmenter,
)

log = logging.getLogger(__name__)

DEFAULT_SCALES = ("160x320", "256x512", "320x640", "416x832", "480x960")


def _size(v) -> tuple[int, int]:
    if isinstance(v, str):
        s = ImageSize.parse(v)
        return (s.width, s.height)
    if isinstance(v, dict):
        return (int(v["width"]), int(v["height"]))
    w, h = v
    return (int(w), int(h))


class ProviderBinding(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["builtin_blob_detector", "builtin_threshold_segmenter", "external_files"]
    params: dict = Field(default_factory=dict)


class PipelineConfig(BaseModel):
    """Pipeline settings; sizes are ``[width, height]`` or ``"WxH"``."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    scales: list[tuple[int, int]] = Field(default_factory=lambda: [_size(s) for s in DEFAULT_SCALES])
    lam: float = Field(0.6, alias="lambda", ge=0.0)
    patch_size: tuple[int, int] = (256, 256)
    iou_threshold: float = Field(0.5, gt=0.0, le=1.0)
    detector: ProviderBinding = Field(default_factory=lambda: ProviderBinding(kind="builtin_blob_detector"))
    segmenter: ProviderBinding = Field(default_factory=lambda: ProviderBinding(kind="builtin_threshold_segmenter"))
    workers: int = Field(1, ge=1)

    @field_validator("scales", mode="before")
    @classmethod
    def _parse_scales(cls, v):
        return [_size(s) for s in v]

    @field_validator("patch_size", mode="before")
    @classmethod
    def _parse_patch(cls, v):
        return _size(v)

    @model_validator(mode="after")
    def _check(self) -> "PipelineConfig":
        if not self.scales:
            raise ValueError("at least one prediction scale is required")
        for w, h in [*self.scales, self.patch_size]:
            ImageSize(w, h)
        if self.detector.kind not in ("builtin_blob_detector", "external_files"):
            raise ValueError(f"{self.detector.kind} cannot act as a detector")
        if self.segmenter.kind not in ("builtin_threshold_segmenter", "external_files"):
            raise ValueError(f"{self.segmenter.kind} cannot act as a segmenter")
        for b, key in ((self.detector, "path"), (self.segmenter, "dir")):
            if b.kind == "external_files" and key not in b.params:
                raise ValueError(f"external_files binding needs a {key!r} parameter")
        return self

    @property
    def scale_sizes(self) -> list[ImageSize]:
        return [ImageSize(w, h) for w, h in self.scales]

    @property
    def patch(self) -> ImageSize:
        return ImageSize(*self.patch_size)


def make_detector(b: ProviderBinding) -> Detector:
    if b.kind == "external_files":
        return ExternalDetections(b.params["path"])
    return BlobDetector(**b.params)


def make_segmenter(b: ProviderBinding, patch: ImageSize) -> Segmenter:
    if b.kind == "external_files":
        return ExternalMasks(b.params["dir"], patch)
    return ThresholdSegmenter(**b.params)


def detect_stage(image_id: str, image: np.ndarray, scales: Sequence[ImageSize], detector: Detector) -> list[ScaleDetectionSet]:
    sets = detector.detect(image_id, image, scales)
    if [s.scale for s in sets] != list(scales):
        raise ValueError(f"{image_id}: detector returned scales {[str(s.scale) for s in sets]}")
    return sets


def segment_stage(image_id: str, patches: Sequence[np.ndarray], segmenter: Segmenter, patch: ImageSize) -> list[np.ndarray]:
    masks = segmenter.segment(image_id, patches)
    if len(masks) != len(patches):
        raise ValueError(f"{image_id}: {len(masks)} masks for {len(patches)} patches")
    for m in masks:
        if ImageSize.of(m) != patch:
            raise ValueError(f"{image_id}: segmenter returned a {ImageSize.of(m)} mask, expected {patch}")
    return masks


@dataclass
class ImageResult:
    image_id: str
    native: ImageSize
    sets: list[ScaleDetectionSet] = field(default_factory=list)
    candidates: list[FusedCandidate] = field(default_factory=list)
    transforms: list[PatchTransform] = field(default_factory=list)
    mask: np.ndarray | None = None
    timings: dict[str, float] = field(default_factory=dict)


@dataclass
class PipelineResult:
    images: list[ImageResult]
    failures: list[dict]

    @property
    def exit_code(self) -> int:
        return 2 if self.failures else 0


def load_image(ds: Dataset, entry: ManifestEntry) -> np.ndarray:
    image = read_pgm(ds.resolve(entry.image_path))
    if ImageSize.of(image) != entry.native:
        raise ValueError(f"{entry.image_id}: image is {ImageSize.of(image)}, manifest says {entry.native}")
    return image


def process_image(
    image_id: str,
    image: np.ndarray,
    config: PipelineConfig,
    detector: Detector,
    segmenter: Segmenter,
) -> ImageResult:
    """Detection through reconstruction for one image; no ground truth involved."""
    native = ImageSize.of(image)
    res = ImageResult(image_id, native)
    t0 = time.perf_counter()
    res.sets = detect_stage(image_id, image, config.scale_sizes, detector)
    t1 = time.perf_counter()
    res.candidates = fusion.msf(res.sets, native, config.lam)
    t2 = time.perf_counter()
    patches = []
    for c in res.candidates:
        patch, t = extract_patch(image, clip_box(c.box, native), config.patch)
        patches.append(patch)
        res.transforms.append(t)
    masks = segment_stage(image_id, patches, segmenter, config.patch)
    t3 = time.perf_counter()
    full = np.zeros(native.shape, dtype=bool)
    for m, t in zip(masks, res.transforms):
        full |= reconstruct_mask(m, t, native)
    res.mask = full
    t4 = time.perf_counter()
    res.timings = {"detect": t1 - t0, "fuse": t2 - t1, "segment": t3 - t2, "reconstruct": t4 - t3}
    return res


def _ordered_map(fn, items: Sequence, workers: int) -> list:
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _guarded(fn):
    def run(entry: ManifestEntry):
        try:
            return fn(entry), None
        except Exception as exc:  # noqa: BLE001 - reported per image
            log.warning("image %s failed: %s", entry.image_id, exc)
            return None, {"image_id": entry.image_id, "error": f"{type(exc).__name__}: {exc}"}
    return run


def run_pipeline(
    ds: Dataset,
    config: PipelineConfig,
    out_dir: str | Path | None = None,
    workers: int | None = None,
) -> tuple[PipelineResult, EvalReport]:
    detector = make_detector(config.detector)
    segmenter = make_segmenter(config.segmenter, config.patch)
    entries = sorted(ds.entries, key=lambda e: e.image_id)

    def one(entry: ManifestEntry) -> ImageResult:
        return process_image(entry.image_id, load_image(ds, entry), config, detector, segmenter)

    outcomes = _ordered_map(_guarded(one), entries, workers or config.workers)
    images = [r for r, _ in outcomes if r is not None]
    failures = [f for _, f in outcomes if f is not None]
    result = PipelineResult(images, failures)

    if out_dir is not None:
        mask_dir = Path(out_dir) / "masks"
        mask_dir.mkdir(parents=True, exist_ok=True)
        for r in images:
            write_mask(mask_dir / f"{r.image_id}.pgm", r.mask)

    # ground truth enters only here
    by_id = {e.image_id: e for e in entries}
    truths = [rasterize_truth(by_id[r.image_id], ds.base_dir) for r in images]
    report = evaluate(
        [r.image_id for r in images],
        [[(c.box, c.peak) for c in r.candidates] for r in images],
        [t[1] for t in truths],
        pred_masks=[r.mask for r in images],
        truth_masks=[t[0] for t in truths],
        iou_threshold=config.iou_threshold,
    )
    report.failures = failures
    report.extra = {
        "lambda": config.lam,
        "scales": [f"{w}x{h}" for w, h in config.scales],
        "patch_size": f"{config.patch_size[0]}x{config.patch_size[1]}",
        "n_images": len(images),
    }
    return result, report


@dataclass
class SweepRow:
    label: str
    lam: float | None
    point: FrocPoint


def _distinct(lams: Sequence[float]) -> list[float]:
    out = sorted(set(float(x) for x in lams))
    if not out:
        raise ValueError("at least one threshold is required")
    return out


def candidates_by_lambda(m: FusionMask, lams: Sequence[float]) -> dict[float, list[FusedCandidate]]:
    return {lam: fusion.candidates_at(m, lam) for lam in _distinct(lams)}


def msf_rows(
    per_image: Sequence[dict[float, list[FusedCandidate]]],
    truths: Sequence[Sequence[BoundingBox]],
    iou_threshold: float = 0.5,
) -> list[SweepRow]:
    rows = []
    for lam in sorted(per_image[0]):
        preds = [[(c.box, c.peak) for c in cands[lam]] for cands in per_image]
        rows.append(SweepRow(f"msf@{lam:g}", lam, operating_point(preds, truths, iou_threshold)))
    return rows


def single_scale_rows(
    sets_per_image: Sequence[Sequence[ScaleDetectionSet]],
    natives: Sequence[ImageSize],
    truths: Sequence[Sequence[BoundingBox]],
    iou_threshold: float = 0.5,
) -> list[SweepRow]:
    """Pass-through operating point of every individual prediction scale."""
    rows = []
    for j in range(len(sets_per_image[0])):
        preds = [
            [(d.box, d.score) for d in fusion.single_scale_in_native(sets[j], n)]
            for sets, n in zip(sets_per_image, natives)
        ]
        rows.append(SweepRow(f"scale {sets_per_image[0][j].scale}", None, operating_point(preds, truths, iou_threshold)))
    return rows


def sweep_lambda(
    ds: Dataset,
    config: PipelineConfig,
    lams: Sequence[float],
    workers: int | None = None,
) -> list[SweepRow]:
    """Single-scale rows followed by one MSF row per distinct threshold.

    Detection and fusion run once per image; only the threshold varies.
    """
    lams = _distinct(lams)
    detector = make_detector(config.detector)
    entries = sorted(ds.entries, key=lambda e: e.image_id)

    def one(entry: ManifestEntry):
        sets = detect_stage(entry.image_id, load_image(ds, entry), config.scale_sizes, detector)
        return sets, candidates_by_lambda(fusion.build_fused_mask(sets, entry.native), lams)

    outcomes = _ordered_map(one, entries, workers or config.workers)
    truths = [rasterize_truth(e, ds.base_dir)[1] for e in entries]
    rows = single_scale_rows([o[0] for o in outcomes], [e.native for e in entries], truths, config.iou_threshold)
    rows += msf_rows([o[1] for o in outcomes], truths, config.iou_threshold)
    return rows


def sweep_table(rows: Sequence[SweepRow]) -> list[dict]:
    return [{"label": r.label, "lambda": r.lam, "tpr": r.point.tpr, "fp_avg": r.point.fp_avg} for r in rows]
