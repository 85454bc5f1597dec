"""Detection and segmentation scoring.

Detections are matched to ground truth greedily by descending score at an
IoU threshold; the matching drives the PR curve, AP and FROC. Segmentations
are scored by pixel confusion counts and Dice.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .geometry import BoundingBox, iou

ScoredBox = tuple[BoundingBox, float]


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class MatchResult:
    pairs: list[tuple[int, int, float]]
    unmatched_predictions: list[int]
    unmatched_truths: list[int]


@dataclass(frozen=True)
class PrPoint:
    recall: float
    precision: float
    threshold: float


@dataclass(frozen=True)
class FrocPoint:
    tpr: float
    fp_avg: float
    threshold: float | None = None


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


def _score_order(preds: Sequence[ScoredBox]) -> list[int]:
    # Stable sort: equal scores keep input order.
    return sorted(range(len(preds)), key=lambda i: -preds[i][1])


def match_detections(
    preds: Sequence[ScoredBox], truths: Sequence[BoundingBox], iou_threshold: float = 0.5
) -> MatchResult:
    """Greedy one-to-one matching.

    Predictions are visited by descending score; each takes the free truth
    with the highest IoU (lowest index on ties) if that IoU reaches the
    threshold.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise MetricsError(f"IoU threshold must be in (0, 1], got {iou_threshold}")
    taken = [False] * len(truths)
    pairs = []
    unmatched = []
    for pi in _score_order(preds):
        box = preds[pi][0]
        best, best_iou = -1, -1.0
        for ti, t in enumerate(truths):
            if taken[ti]:
                continue
            v = iou(box, t)
            if v > best_iou:
                best, best_iou = ti, v
        if best >= 0 and best_iou >= iou_threshold:
            taken[best] = True
            pairs.append((pi, best, best_iou))
        else:
            unmatched.append(pi)
    return MatchResult(
        pairs=pairs,
        unmatched_predictions=sorted(unmatched),
        unmatched_truths=[i for i, t in enumerate(taken) if not t],
    )


def _scored_outcomes(
    preds_per_image: Sequence[Sequence[ScoredBox]],
    truths_per_image: Sequence[Sequence[BoundingBox]],
    iou_threshold: float,
) -> tuple[np.ndarray, np.ndarray, int]:
    """(scores, is_tp) over all predictions, plus the total truth count."""
    if len(preds_per_image) != len(truths_per_image):
        raise MetricsError("predictions and truths cover different image counts")
    scores, hits = [], []
    for preds, truths in zip(preds_per_image, truths_per_image):
        res = match_detections(preds, truths, iou_threshold)
        matched = {p for p, _, _ in res.pairs}
        for i, (_, s) in enumerate(preds):
            scores.append(float(s))
            hits.append(i in matched)
    n_truth = sum(len(t) for t in truths_per_image)
    return np.asarray(scores, dtype=np.float64), np.asarray(hits, dtype=bool), n_truth


def _cumulative(scores: np.ndarray, hits: np.ndarray):
    """Cumulative TP/FP counts at each unique score, highest score first."""
    if scores.size == 0:
        return np.empty(0), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    if not np.all(np.isfinite(scores)):
        raise MetricsError("scores must be finite")
    order = np.argsort(-scores, kind="stable")
    s, h = scores[order], hits[order]
    tp = np.cumsum(h)
    fp = np.cumsum(~h)
    # last index of every run of equal scores
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    return s[ends], tp[ends], fp[ends]


def pr_curve(
    preds_per_image: Sequence[Sequence[ScoredBox]],
    truths_per_image: Sequence[Sequence[BoundingBox]],
    iou_threshold: float = 0.5,
) -> list[PrPoint]:
    scores, hits, n_truth = _scored_outcomes(preds_per_image, truths_per_image, iou_threshold)
    if n_truth == 0:
        raise MetricsError("recall is undefined without ground-truth boxes")
    thresholds, tp, fp = _cumulative(scores, hits)
    return [
        PrPoint(int(t) / n_truth, int(t) / int(t + f), float(th))
        for th, t, f in zip(thresholds, tp, fp)
    ]


def average_precision(curve: Sequence[PrPoint]) -> float:
    """All-point interpolated AP: area under the precision envelope."""
    if not curve:
        return 0.0
    recalls = [0.0] + [p.recall for p in curve]
    precisions = [p.precision for p in curve]
    envelope = precisions[:]
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    return float(sum((recalls[i + 1] - recalls[i]) * envelope[i] for i in range(len(curve))))


def froc(
    preds_per_image: Sequence[Sequence[ScoredBox]],
    truths_per_image: Sequence[Sequence[BoundingBox]],
    iou_threshold: float = 0.5,
) -> list[FrocPoint]:
    n_images = len(preds_per_image)
    if n_images == 0:
        raise MetricsError("FROC needs at least one image")
    scores, hits, n_truth = _scored_outcomes(preds_per_image, truths_per_image, iou_threshold)
    if n_truth == 0:
        raise MetricsError("TPR is undefined without ground-truth boxes")
    thresholds, tp, fp = _cumulative(scores, hits)
    if thresholds.size == 0:
        return [FrocPoint(0.0, 0.0, None)]
    return [
        FrocPoint(int(t) / n_truth, int(f) / n_images, float(th))
        for th, t, f in zip(thresholds, tp, fp)
    ]


def operating_point(
    preds_per_image: Sequence[Sequence[ScoredBox]],
    truths_per_image: Sequence[Sequence[BoundingBox]],
    iou_threshold: float = 0.5,
) -> FrocPoint:
    """TPR and FPs per image of a fixed decision, no score sweep."""
    n_images = len(preds_per_image)
    if n_images == 0:
        raise MetricsError("an operating point needs at least one image")
    _, hits, n_truth = _scored_outcomes(preds_per_image, truths_per_image, iou_threshold)
    if n_truth == 0:
        raise MetricsError("TPR is undefined without ground-truth boxes")
    return FrocPoint(int(hits.sum()) / n_truth, int((~hits).sum()) / n_images)


def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise MetricsError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def dice_from_counts(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    """2TP / (2TP + FP + FN); two empty masks score 1."""
    return dice_from_counts(confusion(pred, truth))


@dataclass
class ImageScore:
    image_id: str
    dice: float | None
    tp_boxes: int
    fp_boxes: int
    fn_boxes: int


@dataclass
class EvalReport:
    iou_threshold: float
    ap: float | None
    pr_points: list[PrPoint]
    froc_points: list[FrocPoint]
    operating_point: FrocPoint | None
    per_image: list[ImageScore]
    mean_dice: float | None
    pooled_dice: float | None
    failures: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pr_points"] = [asdict(p) for p in self.pr_points]
        d["froc_points"] = [asdict(p) for p in self.froc_points]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    def write_curves_csv(self, pr_path: str | os.PathLike, froc_path: str | os.PathLike) -> None:
        with open(pr_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "recall", "precision"])
            for p in self.pr_points:
                w.writerow([repr(p.threshold), repr(p.recall), repr(p.precision)])
        with open(froc_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fp_avg", "tpr"])
            for p in self.froc_points:
                w.writerow(["" if p.threshold is None else repr(p.threshold), repr(p.fp_avg), repr(p.tpr)])


def evaluate(
    image_ids: Sequence[str],
    preds_per_image: Sequence[Sequence[ScoredBox]],
    truths_per_image: Sequence[Sequence[BoundingBox]],
    pred_masks: Sequence[np.ndarray] | None = None,
    truth_masks: Sequence[np.ndarray] | None = None,
    iou_threshold: float = 0.5,
) -> EvalReport:
    """Full detection (and optionally segmentation) report over a dataset.

    Mean Dice averages per-image scores; pooled Dice sums the pixel counts
    over all images first. Detection metrics are ``None`` when there is no
    ground-truth box to score against.
    """
    scorable = len(image_ids) > 0 and any(len(t) for t in truths_per_image)
    curve = pr_curve(preds_per_image, truths_per_image, iou_threshold) if scorable else []
    per_image = []
    pooled = ConfusionCounts(0, 0, 0, 0)
    dices = []
    for k, (iid, preds, truths) in enumerate(zip(image_ids, preds_per_image, truths_per_image)):
        res = match_detections(preds, truths, iou_threshold)
        d = None
        if pred_masks is not None and truth_masks is not None:
            c = confusion(pred_masks[k], truth_masks[k])
            pooled = pooled + c
            d = dice_from_counts(c)
            dices.append(d)
        per_image.append(
            ImageScore(iid, d, len(res.pairs), len(res.unmatched_predictions), len(res.unmatched_truths))
        )
    have_masks = pred_masks is not None and truth_masks is not None
    return EvalReport(
        iou_threshold=iou_threshold,
        ap=average_precision(curve) if scorable else None,
        pr_points=curve,
        froc_points=froc(preds_per_image, truths_per_image, iou_threshold) if scorable else [],
        operating_point=operating_point(preds_per_image, truths_per_image, iou_threshold) if scorable else None,
        per_image=per_image,
        mean_dice=float(np.mean(dices)) if dices else None,
        pooled_dice=dice_from_counts(pooled) if dices else None,
    )
