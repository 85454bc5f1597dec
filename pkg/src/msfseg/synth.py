"""Seeded synthetic phantoms and noisy multi-scale detections.

All randomness comes from Philox (a counter-based 4x64 generator) keyed by
``SeedSequence(seed, spawn_key=...)``. Image ``i`` draws its geometry from
key ``(i, 0)`` and its detections at scale ``j`` from ``(i, 1, j)``, so any
image can be regenerated alone and in any order.

Masses are rotated ellipses whose radius is modulated by a few random
harmonics (``boundary_irregularity`` bounds the relative modulation). The
intensity is a shallow dome of height ``mass_contrast`` on top of a flat
background with Gaussian noise; values are rounded half-to-even and clipped
to 0..255.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fusion import Detection, ScaleDetectionSet
from .geometry import BoundingBox, ImageSize, intersection, scale_box, tight_box

HARMONICS = (2, 3, 4, 5)


class PhantomError(ValueError):
    pass


def substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass(frozen=True)
class PhantomSpec:
    native: ImageSize = ImageSize(1024, 2048)
    mass_count_range: tuple[int, int] = (1, 3)
    mass_radius_range: tuple[float, float] = (40.0, 120.0)
    boundary_irregularity: float = 0.15
    background_noise_sigma: float = 8.0
    background_level: float = 60.0
    mass_contrast: float = 110.0
    margin: int = 16
    max_tries: int = 1000
    seed: int = 42

    def __post_init__(self) -> None:
        lo, hi = self.mass_count_range
        if not 0 <= lo <= hi:
            raise PhantomError(f"bad mass count range {self.mass_count_range}")
        rlo, rhi = self.mass_radius_range
        if not 0 < rlo <= rhi:
            raise PhantomError(f"bad radius range {self.mass_radius_range}")
        if not 0 <= self.boundary_irregularity < 1:
            raise PhantomError("boundary irregularity must be in [0, 1)")
        if self.background_noise_sigma < 0:
            raise PhantomError("noise sigma must be >= 0")
        reach = 2 * rhi * (1 + self.boundary_irregularity) + 2
        if hi > 0 and (reach > self.native.width or reach > self.native.height):
            raise PhantomError(f"masses of radius {rhi} do not fit in {self.native}")


@dataclass(frozen=True)
class Mass:
    center: tuple[float, float]
    semi_axes: tuple[float, float]
    angle: float
    amplitudes: tuple[float, ...]
    phases: tuple[float, ...]
    irregularity: float

    @property
    def reach(self) -> float:
        return max(self.semi_axes) * (1 + self.irregularity)

    def outer_box(self, size: ImageSize) -> BoundingBox:
        cx, cy = self.center
        r = self.reach
        return BoundingBox(
            max(0, math.floor(cx - r)),
            max(0, math.floor(cy - r)),
            min(size.width, math.ceil(cx + r) + 1),
            min(size.height, math.ceil(cy + r) + 1),
        )

    def rasterize(self, size: ImageSize) -> tuple[np.ndarray, np.ndarray, BoundingBox]:
        """(inside, relative radius) over the outer box, plus the box itself."""
        box = self.outer_box(size)
        xs = np.arange(box.min_x, box.max_x) + 0.5 - self.center[0]
        ys = np.arange(box.min_y, box.max_y) + 0.5 - self.center[1]
        dx, dy = np.meshgrid(xs, ys)
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = (dx * c + dy * s) / self.semi_axes[0]
        v = (-dx * s + dy * c) / self.semi_axes[1]
        rho = np.hypot(u, v)
        boundary = np.ones_like(rho)
        if self.irregularity > 0:
            phi = np.arctan2(v, u)
            wobble = np.zeros_like(rho)
            for k, a, p in zip(HARMONICS, self.amplitudes, self.phases):
                wobble += a * np.cos(k * phi + p)
            boundary = 1.0 + self.irregularity * wobble
        rel = rho / boundary
        return rel <= 1.0, rel, box


@dataclass
class Phantom:
    image: np.ndarray | None
    mask: np.ndarray
    boxes: list[BoundingBox]
    masses: list[Mass] = field(default_factory=list)


def _draw_mass(spec: PhantomSpec, rng: np.random.Generator, placed: list[BoundingBox]) -> Mass:
    rlo, rhi = spec.mass_radius_range
    a, b = rng.uniform(rlo, rhi, size=2)
    angle = rng.uniform(0.0, math.pi)
    amps = rng.uniform(-1.0, 1.0, size=len(HARMONICS))
    amps = amps / np.abs(amps).sum()
    phases = rng.uniform(0.0, 2 * math.pi, size=len(HARMONICS))
    reach = max(a, b) * (1 + spec.boundary_irregularity)
    W, H = spec.native.width, spec.native.height
    for _ in range(spec.max_tries):
        cx = rng.uniform(reach + 1, W - reach - 1)
        cy = rng.uniform(reach + 1, H - reach - 1)
        m = Mass(
            (float(cx), float(cy)), (float(a), float(b)), float(angle),
            tuple(float(x) for x in amps), tuple(float(x) for x in phases),
            spec.boundary_irregularity,
        )
        ob = m.outer_box(spec.native)
        grown = BoundingBox(
            max(0, ob.min_x - spec.margin), max(0, ob.min_y - spec.margin),
            ob.max_x + spec.margin, ob.max_y + spec.margin,
        )
        if all(intersection(grown, p) is None for p in placed):
            return m
    raise PhantomError(f"could not place a mass after {spec.max_tries} tries")


def generate_phantom(spec: PhantomSpec, index: int = 0, render: bool = True) -> Phantom:
    """Phantom number ``index`` of the seeded family ``spec``.

    With ``render=False`` only the geometry (mask and boxes) is produced;
    the geometry is identical either way.
    """
    rng = substream(spec.seed, index, 0)
    lo, hi = spec.mass_count_range
    count = int(rng.integers(lo, hi + 1))
    size = spec.native
    mask = np.zeros(size.shape, dtype=bool)
    bump = np.zeros(size.shape, dtype=np.float64)
    masses, boxes, placed = [], [], []
    for _ in range(count):
        m = _draw_mass(spec, rng, placed)
        inside, rel, ob = m.rasterize(size)
        placed.append(ob)
        masses.append(m)
        box = tight_box(inside)
        if box is None:
            raise PhantomError("mass rasterized to zero pixels")
        boxes.append(BoundingBox(box.min_x + ob.min_x, box.min_y + ob.min_y,
                                 box.max_x + ob.min_x, box.max_y + ob.min_y))
        mask[ob.slices] |= inside
        bump[ob.slices] += np.where(inside, spec.mass_contrast * (1.0 - 0.25 * rel * rel), 0.0)
    image = None
    if render:
        noise = rng.normal(0.0, spec.background_noise_sigma, size=size.shape) if spec.background_noise_sigma > 0 else 0.0
        image = np.clip(np.rint(spec.background_level + bump + noise), 0, 255).astype(np.uint8)
    return Phantom(image, mask, boxes, masses)


@dataclass(frozen=True)
class DetectionNoiseSpec:
    """Behaviour of a simulated detector at one prediction scale.

    Jitter sigmas are fractions of the truth box size. False positives are
    Poisson distributed per image, sized uniformly within ``fp_size_range``
    (native pixels) and kept clear of every truth box grown by
    ``exclusion_margin`` times its size on each side.
    """

    detection_probability: float = 0.8
    center_jitter_sigma: float = 0.05
    size_jitter_sigma: float = 0.05
    confidence_mean: float = 0.9
    confidence_sigma: float = 0.0
    false_positive_rate: float = 1.5
    fp_size_range: tuple[int, int] = (60, 240)
    exclusion_margin: float = 0.5
    max_fp_tries: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.detection_probability <= 1.0:
            raise ValueError("detection probability must be in [0, 1]")
        if min(self.center_jitter_sigma, self.size_jitter_sigma, self.confidence_sigma) < 0:
            raise ValueError("sigmas must be >= 0")
        if self.false_positive_rate < 0:
            raise ValueError("false positive rate must be >= 0")
        if not 0 < self.fp_size_range[0] <= self.fp_size_range[1]:
            raise ValueError(f"bad false-positive size range {self.fp_size_range}")


def _native_box(x0: float, y0: float, x1: float, y1: float, native: ImageSize) -> BoundingBox | None:
    ix0, iy0 = max(0, round(x0)), max(0, round(y0))
    ix1, iy1 = min(native.width, round(x1)), min(native.height, round(y1))
    if ix0 >= ix1 or iy0 >= iy1:
        return None
    return BoundingBox(ix0, iy0, ix1, iy1)


def _confidence(noise: DetectionNoiseSpec, rng: np.random.Generator) -> float:
    return float(np.clip(rng.normal(noise.confidence_mean, noise.confidence_sigma), 0.0, 1.0))


def simulate_detections(
    truth_boxes: Sequence[BoundingBox],
    native: ImageSize,
    scale: ImageSize,
    noise: DetectionNoiseSpec,
    rng: np.random.Generator | None = None,
) -> ScaleDetectionSet:
    """Noisy detector output at ``scale`` for an image with ``truth_boxes``."""
    if rng is None:
        rng = substream(noise.seed)
    dets: list[Detection] = []
    for t in truth_boxes:
        # fixed draw count per truth keeps streams aligned across settings
        hit = rng.random() < noise.detection_probability
        jc = rng.normal(0.0, 1.0, size=2) * noise.center_jitter_sigma
        js = rng.normal(0.0, 1.0, size=2) * noise.size_jitter_sigma
        conf = _confidence(noise, rng)
        if not hit:
            continue
        cx = (t.min_x + t.max_x) / 2 + jc[0] * t.width
        cy = (t.min_y + t.max_y) / 2 + jc[1] * t.height
        w = max(1.0, t.width * (1.0 + js[0]))
        h = max(1.0, t.height * (1.0 + js[1]))
        box = _native_box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, native)
        if box is not None:
            dets.append(Detection(scale_box(box, native, scale), conf))

    zones = []
    for t in truth_boxes:
        gx, gy = noise.exclusion_margin * t.width, noise.exclusion_margin * t.height
        zones.append((t.min_x - gx, t.min_y - gy, t.max_x + gx, t.max_y + gy))
    n_fp = int(rng.poisson(noise.false_positive_rate))
    lo, hi = noise.fp_size_range
    for _ in range(n_fp):
        conf = _confidence(noise, rng)
        for _ in range(noise.max_fp_tries):
            w, h = rng.integers(lo, hi + 1, size=2)
            w, h = min(int(w), native.width), min(int(h), native.height)
            x0 = int(rng.integers(0, native.width - w + 1))
            y0 = int(rng.integers(0, native.height - h + 1))
            clear = all(
                x0 + w <= zx0 or zx1 <= x0 or y0 + h <= zy0 or zy1 <= y0
                for zx0, zy0, zx1, zy1 in zones
            )
            if clear:
                dets.append(Detection(scale_box(BoundingBox(x0, y0, x0 + w, y0 + h), native, scale), conf))
                break
    return ScaleDetectionSet(scale, tuple(dets))


@dataclass
class BenchmarkImage:
    image_id: str
    phantom: Phantom
    sets: list[ScaleDetectionSet]


def benchmark_image(
    index: int,
    phantom: PhantomSpec,
    scales: Sequence[ImageSize],
    noise: DetectionNoiseSpec | Sequence[DetectionNoiseSpec],
    render: bool = True,
) -> BenchmarkImage:
    noises = [noise] * len(scales) if isinstance(noise, DetectionNoiseSpec) else list(noise)
    if len(noises) != len(scales):
        raise ValueError("one noise spec per scale is required")
    ph = generate_phantom(phantom, index, render=render)
    sets = [
        simulate_detections(ph.boxes, phantom.native, s, n, substream(phantom.seed, index, 1, j))
        for j, (s, n) in enumerate(zip(scales, noises))
    ]
    return BenchmarkImage(f"phantom_{index:05d}", ph, sets)
