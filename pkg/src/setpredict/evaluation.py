"""Detection metrics: greedy IoU matching, PR/F1, average precision with
the monotone precision envelope, and the threshold-sweep summary.

Matching is per image and per class: detections sorted by descending score
greedily claim the unclaimed ground truth of highest overlap at or above
the threshold. Scores tie-break by insertion order, which keeps every
number reproducible. Degenerate (zero-area) boxes are dropped on entry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundingBox, iou_matrix
from .matching import GroundTruthObject

COCO_THRESHOLDS = tuple(np.arange(0.50, 0.96, 0.05).round(2))
SWEEP_THRESHOLDS = tuple(np.arange(0.50, 1.001, 0.05).round(2))
MAX_DETECTIONS_PER_IMAGE = 100
LARGE_AREA_CUTOFF = (96.0 / 640.0) ** 2  # COCO 96px at a 640px reference side


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: BoundingBox


@dataclass
class MatchedDetections:
    """Score-ordered TP/FP records for one (class, threshold) slice."""

    records: list[tuple[float, bool]] = field(default_factory=list)  # (score, is_tp)
    false_negatives: int = 0
    total_gt: int = 0

    @property
    def tp(self) -> int:
        return sum(1 for _, flag in self.records if flag)

    @property
    def fp(self) -> int:
        return sum(1 for _, flag in self.records if not flag)


@dataclass
class MetricsReport:
    ap: dict[tuple[int, float], float]
    map_all: float
    ap50: float
    ap75: float
    ar: float
    precision: float
    recall: float
    f1: float
    ap_by_threshold: dict[float, float]
    classes: tuple[int, ...]
    ar_large: float | None = None

    @property
    def map50(self) -> float:
        return self.ap50


def _clean(dets: list[Detection], gts: list[GroundTruthObject]):
    dets = [d for d in dets if not d.box.is_degenerate()]
    gts = [g for g in gts if not g.box.is_degenerate()]
    return dets, gts


def match_at_iou(
    dets: list[Detection],
    gts: list[GroundTruthObject],
    iou_thresh: float,
    class_id: int | None = None,
) -> MatchedDetections:
    """Greedy one-to-one matching for a single image.

    With class_id given, only that class participates; otherwise each class
    is matched independently and the records are merged in score order.
    """
    dets, gts = _clean(dets, gts)
    if class_id is None:
        classes = sorted({d.class_id for d in dets} | {g.class_id for g in gts})
        merged = MatchedDetections()
        for c in classes:
            part = match_at_iou(dets, gts, iou_thresh, class_id=c)
            merged.records.extend(part.records)
            merged.false_negatives += part.false_negatives
            merged.total_gt += part.total_gt
        merged.records.sort(key=lambda r: -r[0])
        return merged

    cls_dets = [d for d in dets if d.class_id == class_id]
    cls_gts = [g for g in gts if g.class_id == class_id]
    out = MatchedDetections(total_gt=len(cls_gts))
    if not cls_dets:
        out.false_negatives = len(cls_gts)
        return out
    order = sorted(range(len(cls_dets)), key=lambda i: (-cls_dets[i].score, i))
    if cls_gts:
        ious = iou_matrix(
            np.stack([cls_dets[i].box.as_array() for i in order]),
            np.stack([g.box.as_array() for g in cls_gts]),
        )
    claimed = np.zeros(len(cls_gts), dtype=bool)
    for rank, i in enumerate(order):
        matched = False
        if cls_gts:
            row = np.where(claimed, -1.0, ious[rank])
            j = int(np.argmax(row))
            if row[j] >= iou_thresh:
                claimed[j] = True
                matched = True
        out.records.append((cls_dets[i].score, matched))
    out.false_negatives = int((~claimed).sum()) if cls_gts else 0
    return out


def precision_recall_f1(m: MatchedDetections) -> tuple[float, float, float]:
    """TP/(TP+FP), TP/(TP+FN), and their harmonic mean; empty cases are 0."""
    tp, fp, fn = m.tp, m.fp, m.false_negatives
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def average_precision(flags: list[bool], total_gt: int) -> float:
    """AP from score-ordered TP/FP flags using the precision envelope.

    Raw precision/recall points are smoothed so precision at each recall is
    the maximum precision at any recall at least as large, then summed as
    sum over points of (R_n - R_{n-1}) * P_n. No ground truth means 0.
    """
    if total_gt == 0 or not flags:
        return 0.0
    tp_cum = np.cumsum(np.asarray(flags, dtype=np.float64))
    precisions = tp_cum / np.arange(1, len(flags) + 1, dtype=np.float64)
    recalls = tp_cum / float(total_gt)
    envelope = np.maximum.accumulate(precisions[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recalls.tolist(), envelope.tolist()):
        ap += (r - prev_r) * p
        prev_r = r
    return ap


def _collect_class_records(
    dets_per_image: list[list[Detection]],
    gts_per_image: list[list[GroundTruthObject]],
    class_id: int,
    thr: float,
    max_dets: int | None = None,
):
    """Score-ordered flags across the whole image set for one class."""
    records = []  # (score, image_order, det_rank, flag)
    total_gt = 0
    fn = 0
    for s_idx, (dets, gts) in enumerate(zip(dets_per_image, gts_per_image)):
        if max_dets is not None and len(dets) > max_dets:
            keep = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))[:max_dets]
            dets = [dets[i] for i in sorted(keep)]
        m = match_at_iou(dets, gts, thr, class_id=class_id)
        total_gt += m.total_gt
        fn += m.false_negatives
        for rank, (score, flag) in enumerate(m.records):
            records.append((score, s_idx, rank, flag))
    records.sort(key=lambda r: (-r[0], r[1], r[2]))
    flags = [r[3] for r in records]
    scores = [r[0] for r in records]
    return flags, scores, total_gt, fn


def coco_summary(
    dets_per_image: list[list[Detection]],
    gts_per_image: list[list[GroundTruthObject]],
    classes: tuple[int, ...] | list[int],
    pr_iou: float = 0.5,
    with_large: bool = False,
) -> MetricsReport:
    """AP per class and threshold, their means, AR, and PR/F1 at pr_iou."""
    if len(dets_per_image) != len(gts_per_image) or not gts_per_image:
        raise ValueError("need matching, non-empty detection/ground-truth lists")
    classes = tuple(sorted(classes))
    known = set(classes)
    for dets in dets_per_image:
        for d in dets:
            if d.class_id not in known:
                raise ValueError(f"detection with unknown class id {d.class_id}")

    ap: dict[tuple[int, float], float] = {}
    recall_acc: list[float] = []
    for cls in classes:
        for thr in COCO_THRESHOLDS:
            flags, _, total_gt, _ = _collect_class_records(
                dets_per_image, gts_per_image, cls, thr,
                max_dets=MAX_DETECTIONS_PER_IMAGE,
            )
            ap[(cls, thr)] = average_precision(flags, total_gt)
            tp = sum(flags)
            recall_acc.append(tp / total_gt if total_gt else 0.0)

    values = np.array([ap[(c, t)] for c in classes for t in COCO_THRESHOLDS])
    ap50 = float(np.mean([ap[(c, 0.5)] for c in classes]))
    ap75 = float(np.mean([ap[(c, 0.75)] for c in classes]))

    totals = MatchedDetections()
    for dets, gts in zip(dets_per_image, gts_per_image):
        m = match_at_iou(dets, gts, pr_iou)
        totals.records.extend(m.records)
        totals.false_negatives += m.false_negatives
        totals.total_gt += m.total_gt
    p, r, f1 = precision_recall_f1(totals)

    ar_large = None
    if with_large:
        big_dets = [
            [d for d in dets if d.box.w * d.box.h > LARGE_AREA_CUTOFF]
            for dets in dets_per_image
        ]
        big_gts = [
            [g for g in gts if g.box.w * g.box.h > LARGE_AREA_CUTOFF]
            for gts in gts_per_image
        ]
        acc = []
        for cls in classes:
            for thr in COCO_THRESHOLDS:
                flags, _, total_gt, _ = _collect_class_records(
                    big_dets, big_gts, cls, thr, max_dets=MAX_DETECTIONS_PER_IMAGE
                )
                acc.append(sum(flags) / total_gt if total_gt else 0.0)
        ar_large = float(np.mean(acc))

    return MetricsReport(
        ap=ap,
        map_all=float(values.mean()),
        ap50=ap50,
        ap75=ap75,
        ar=float(np.mean(recall_acc)),
        precision=p,
        recall=r,
        f1=f1,
        ap_by_threshold={
            float(t): float(np.mean([ap[(c, t)] for c in classes]))
            for t in COCO_THRESHOLDS
        },
        classes=classes,
        ar_large=ar_large,
    )


def ap_vs_iou_sweep(
    dets_per_image: list[list[Detection]],
    gts_per_image: list[list[GroundTruthObject]],
    classes: tuple[int, ...] | list[int],
) -> list[tuple[float, int, float]]:
    """Rows of (threshold, class, AP) for thresholds 0.50..1.00."""
    classes = tuple(sorted(classes))
    rows = []
    for thr in SWEEP_THRESHOLDS:
        for cls in classes:
            flags, _, total_gt, _ = _collect_class_records(
                dets_per_image, gts_per_image, cls, float(thr)
            )
            rows.append((float(thr), cls, average_precision(flags, total_gt)))
    return rows
