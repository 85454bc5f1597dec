"""Dataset manifests, ground-truth rasterization, contrast equalization and
anchor clustering."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy import ndimage

from .fusion import label_components
from .geometry import BoundingBox, ImageSize, tight_box
from .pgm import read_mask


class ManifestError(ValueError):
    pass


class TruthSpec(BaseModel):
    """Ground truth of one image.

    ``polygons`` are contours in pixel-edge coordinates, filled with the
    even-odd rule on pixel centers. ``boxes`` are rectangular regions,
    filled as-is. ``mask_path`` is an optional PGM mask whose 8-connected
    components each contribute one box.
    """

    model_config = ConfigDict(extra="forbid")

    polygons: list[list[tuple[float, float]]] = Field(default_factory=list)
    boxes: list[tuple[int, int, int, int]] = Field(default_factory=list)
    mask_path: str | None = None


class ManifestEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_id: str
    image_path: str
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    truth: TruthSpec = Field(default_factory=TruthSpec)

    @property
    def native(self) -> ImageSize:
        return ImageSize(self.width, self.height)

    @model_validator(mode="after")
    def _truth_inside_image(self) -> "ManifestEntry":
        for poly in self.truth.polygons:
            for x, y in poly:
                if not (0 <= x <= self.width and 0 <= y <= self.height):
                    raise ValueError(
                        f"{self.image_id}: polygon vertex ({x}, {y}) outside {self.width}x{self.height}"
                    )
        for b in self.truth.boxes:
            x0, y0, x1, y1 = b
            if not (0 <= x0 < x1 <= self.width and 0 <= y0 < y1 <= self.height):
                raise ValueError(f"{self.image_id}: box {b} invalid or outside {self.width}x{self.height}")
        return self


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: int = 1
    entries: list[ManifestEntry] = Field(default_factory=list)

    @model_validator(mode="after")
    def _unique_ids(self) -> "DatasetManifest":
        seen = set()
        for e in self.entries:
            if e.image_id in seen:
                raise ValueError(f"duplicate image_id {e.image_id!r}")
            seen.add(e.image_id)
        return self


@dataclass
class Dataset:
    """A validated manifest plus the directory its relative paths hang off."""

    manifest: DatasetManifest
    base_dir: Path = field(default_factory=Path.cwd)

    @property
    def entries(self) -> list[ManifestEntry]:
        return self.manifest.entries

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p


def load_manifest(path: str | os.PathLike) -> Dataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    try:
        manifest = DatasetManifest.model_validate_json(text)
    except ValidationError as exc:
        raise ManifestError(f"invalid manifest {path}:\n{exc}") from exc
    return Dataset(manifest, path.parent)


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    Path(path).write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")


def fill_polygon(vertices: list[tuple[float, float]], size: ImageSize) -> np.ndarray:
    """Even-odd fill on pixel centers; centers exactly on an edge are inside."""
    if len(vertices) < 3:
        raise ManifestError(f"degenerate polygon with {len(vertices)} vertices")
    pts = np.asarray(vertices, dtype=np.float64)
    mask = np.zeros(size.shape, dtype=bool)
    x0 = max(int(np.floor(pts[:, 0].min())) - 1, 0)
    x1 = min(int(np.ceil(pts[:, 0].max())) + 1, size.width)
    y0 = max(int(np.floor(pts[:, 1].min())) - 1, 0)
    y1 = min(int(np.ceil(pts[:, 1].max())) + 1, size.height)
    if x0 >= x1 or y0 >= y1:
        return mask
    cx, cy = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
    inside = np.zeros(cx.shape, dtype=bool)
    on_edge = np.zeros(cx.shape, dtype=bool)
    for (ax, ay), (bx, by) in zip(pts, np.roll(pts, -1, axis=0)):
        crosses = (ay > cy) != (by > cy)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = ax + (cy - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (cx < x_at)
        cross = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        on_edge |= (
            (cross == 0)
            & (cx >= min(ax, bx)) & (cx <= max(ax, bx))
            & (cy >= min(ay, by)) & (cy <= max(ay, by))
        )
    mask[y0:y1, x0:x1] = inside | on_edge
    return mask


def rasterize_truth(entry: ManifestEntry, base_dir: Path | None = None) -> tuple[np.ndarray, list[BoundingBox]]:
    """Ground-truth mask and one tight box per contour, box or mask component."""
    size = entry.native
    mask = np.zeros(size.shape, dtype=bool)
    boxes: list[BoundingBox] = []
    for poly in entry.truth.polygons:
        fill = fill_polygon(poly, size)
        box = tight_box(fill)
        if box is None:
            raise ManifestError(f"{entry.image_id}: polygon covers no pixel center")
        mask |= fill
        boxes.append(box)
    for b in entry.truth.boxes:
        box = BoundingBox(*b)
        mask[box.slices] = True
        boxes.append(box)
    if entry.truth.mask_path is not None:
        p = Path(entry.truth.mask_path)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        raster = read_mask(p)
        if raster.shape != size.shape:
            raise ManifestError(f"{entry.image_id}: truth mask is {raster.shape[::-1]}, image is {size}")
        labels, _ = label_components(raster)
        for ys, xs in ndimage.find_objects(labels):
            boxes.append(BoundingBox(xs.start, ys.start, xs.stop, ys.stop))
        mask |= raster
    return mask, boxes


def hist_equalize(image: np.ndarray) -> np.ndarray:
    """Global histogram equalization of an 8-bit image by CDF remapping."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError("histogram equalization expects an 8-bit image")
    hist = np.bincount(image.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    cdf_min = int(cdf[hist > 0][0])
    n = image.size
    if n == cdf_min:
        return image.copy()
    lut = np.rint((cdf - cdf_min) / (n - cdf_min) * 255.0)
    lut = np.clip(lut, 0, 255).astype(np.uint8)
    return lut[image]


@dataclass(frozen=True)
class AnchorSet:
    anchors: np.ndarray  # (k, 2) widths and heights, ascending area
    objective_history: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        a = np.asarray(self.anchors, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != 2 or a.shape[0] < 1:
            raise ValueError("anchors must be a (k, 2) array")
        if not np.all(a > 0):
            raise ValueError("anchor sizes must be positive")
        object.__setattr__(self, "anchors", a)

    def to_cfg(self) -> str:
        """Darknet cfg style: ``w,h,  w,h, ...`` with integer pixels."""
        return ",  ".join(f"{round(w)},{round(h)}" for w, h in self.anchors)


def centered_iou(wh: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """IoU of boxes sharing a center, shape ``(len(wh), len(anchors))``."""
    w = np.minimum(wh[:, None, 0], anchors[None, :, 0])
    h = np.minimum(wh[:, None, 1], anchors[None, :, 1])
    inter = w * h
    union = (wh[:, 0] * wh[:, 1])[:, None] + (anchors[:, 0] * anchors[:, 1])[None, :] - inter
    return inter / union


def _kmeanspp(wh: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(wh)
    centers = [wh[rng.integers(n)]]
    for _ in range(1, k):
        d = (1.0 - centered_iou(wh, np.asarray(centers))).min(axis=1)
        weights = d * d
        total = weights.sum()
        idx = rng.choice(n, p=weights / total) if total > 0 else rng.integers(n)
        centers.append(wh[idx])
    return np.array(centers, dtype=np.float64)


def _lloyd(wh: np.ndarray, centers: np.ndarray, max_iter: int, tol: float):
    history = []
    dist = 1.0 - centered_iou(wh, centers)
    assign = dist.argmin(axis=1)
    obj = float(dist[np.arange(len(wh)), assign].mean())
    history.append(obj)
    for _ in range(max_iter):
        new = centers.copy()
        for j in range(len(centers)):
            members = wh[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        new_dist = 1.0 - centered_iou(wh, new)
        new_assign = new_dist.argmin(axis=1)
        new_obj = float(new_dist[np.arange(len(wh)), new_assign].mean())
        if new_obj > obj:
            # mean update is not the 1-IoU minimizer; refuse a worsening step
            break
        centers, assign = new, new_assign
        history.append(new_obj)
        if obj - new_obj < tol:
            break
        obj = new_obj
    return centers, history


def kmeans_anchors(
    wh: np.ndarray,
    k: int = 9,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
    n_init: int = 10,
) -> AnchorSet:
    """Cluster box sizes with distance ``1 - IoU`` of centered boxes.

    k-means++ seeding, ``n_init`` seeded restarts, best objective kept.
    """
    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    if len(wh) < k:
        raise ValueError(f"need at least {k} boxes to fit {k} anchors, got {len(wh)}")
    if not np.all(wh > 0):
        raise ValueError("box widths and heights must be positive")
    best = None
    for stream in np.random.SeedSequence(seed).spawn(n_init):
        rng = np.random.default_rng(stream)
        centers, history = _lloyd(wh, _kmeanspp(wh, k, rng), max_iter, tol)
        if best is None or history[-1] < best[1][-1]:
            best = (centers, history)
    centers, history = best
    order = np.lexsort((centers[:, 0], centers[:, 0] * centers[:, 1]))
    return AnchorSet(centers[order], tuple(history))
