"""Multi-scale detection fusion and two-stage mass segmentation pipeline."""

from .fusion import Detection, FusedCandidate, FusionMask, ScaleDetectionSet, build_fused_mask, msf
from .geometry import BoundingBox, ImageSize, PatchTransform, box_area, iou, scale_box

__all__ = [
    "BoundingBox",
    "Detection",
    "FusedCandidate",
    "FusionMask",
    "ImageSize",
    "PatchTransform",
    "ScaleDetectionSet",
    "box_area",
    "build_fused_mask",
    "iou",
    "msf",
    "scale_box",
]
