"""JSON Lines detection interchange.

One record per ``(image_id, scale)``::

    {"image_id": "...", "scale_w": 320, "scale_h": 640,
     "boxes": [{"min_x": 0, "min_y": 0, "max_x": 10, "max_y": 10, "score": 0.9}]}

Fused output uses the same layout with the native frame as scale and an
extra ``peak`` per box.
"""

from __future__ import annotations

import json
import os
from collections import defaultdict
from pathlib import Path
from typing import Iterable

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .fusion import Detection, FusedCandidate, ScaleDetectionSet
from .geometry import BoundingBox, ImageSize


class InterchangeError(ValueError):
    pass


class BoxRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    min_x: int = Field(ge=0)
    min_y: int = Field(ge=0)
    max_x: int
    max_y: int
    score: float
    peak: float | None = None

    def box(self) -> BoundingBox:
        return BoundingBox(self.min_x, self.min_y, self.max_x, self.max_y)


class DetectionRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_id: str
    scale_w: int = Field(gt=0)
    scale_h: int = Field(gt=0)
    boxes: list[BoxRecord] = Field(default_factory=list)

    @property
    def scale(self) -> ImageSize:
        return ImageSize(self.scale_w, self.scale_h)

    def to_set(self) -> ScaleDetectionSet:
        return ScaleDetectionSet(self.scale, tuple(Detection(b.box(), b.score) for b in self.boxes))

    def scored_boxes(self) -> list[tuple[BoundingBox, float]]:
        return [(b.box(), b.score) for b in self.boxes]


def read_records(path: str | os.PathLike) -> list[DetectionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(DetectionRecord.model_validate_json(line))
            except ValidationError as exc:
                raise InterchangeError(f"{path}:{lineno}: {exc}") from exc
    return out


def group_by_image(records: Iterable[DetectionRecord]) -> dict[str, dict[ImageSize, DetectionRecord]]:
    grouped: dict[str, dict[ImageSize, DetectionRecord]] = defaultdict(dict)
    for r in records:
        if r.scale in grouped[r.image_id]:
            raise InterchangeError(f"duplicate record for image {r.image_id!r} at scale {r.scale}")
        grouped[r.image_id][r.scale] = r
    return dict(grouped)


def set_record(image_id: str, s: ScaleDetectionSet) -> DetectionRecord:
    return DetectionRecord(
        image_id=image_id,
        scale_w=s.scale.width,
        scale_h=s.scale.height,
        boxes=[BoxRecord(**_box_fields(d.box), score=d.score) for d in s.detections],
    )


def fused_record(image_id: str, native: ImageSize, cands: Iterable[FusedCandidate]) -> DetectionRecord:
    return DetectionRecord(
        image_id=image_id,
        scale_w=native.width,
        scale_h=native.height,
        boxes=[BoxRecord(**_box_fields(c.box), score=c.peak, peak=c.peak) for c in cands],
    )


def _box_fields(b: BoundingBox) -> dict:
    return {"min_x": b.min_x, "min_y": b.min_y, "max_x": b.max_x, "max_y": b.max_y}


def write_records(path: str | os.PathLike, records: Iterable[DetectionRecord]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.model_dump(exclude_none=True), sort_keys=False) + "\n")
