"""Box primitives in normalized image coordinates.

Boxes are (cx, cy, w, h) with every component a fraction of the image side
in [0, 1]. Pixel-space conversion happens only at dataset ingestion and
rendering boundaries. All arithmetic is double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Center-size box. w > 0 and h > 0 for any real object."""

    cx: float
    cy: float
    w: float
    h: float

    def validate(self) -> None:
        for name, v in (("cx", self.cx), ("cy", self.cy), ("w", self.w), ("h", self.h)):
            if not math.isfinite(v):
                raise ValueError(f"box field {name} is not finite: {v}")
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"box field {name} outside [0, 1]: {v}")

    def is_degenerate(self) -> bool:
        return self.w <= 0.0 or self.h <= 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class CornerBox:
    """Internal corner form (x0, y0, x1, y1) with x0 <= x1 and y0 <= y1."""

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def area(self) -> float:
        return max(0.0, self.x1 - self.x0) * max(0.0, self.y1 - self.y0)


def to_corners(b: BoundingBox, clip: bool = False) -> CornerBox:
    """Convert center-size to corners; clips to [0, 1] only when asked."""
    x0 = b.cx - b.w / 2.0
    x1 = b.cx + b.w / 2.0
    y0 = b.cy - b.h / 2.0
    y1 = b.cy + b.h / 2.0
    if clip:
        x0, y0 = max(0.0, x0), max(0.0, y0)
        x1, y1 = min(1.0, x1), min(1.0, y1)
    return CornerBox(x0, y0, x1, y1)


def from_corners(c: CornerBox) -> BoundingBox:
    return BoundingBox(
        cx=(c.x0 + c.x1) / 2.0,
        cy=(c.y0 + c.y1) / 2.0,
        w=c.x1 - c.x0,
        h=c.y1 - c.y0,
    )


def _intersection_area(a: CornerBox, b: CornerBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 for a zero-area union (degenerate inputs)."""
    ca, cb = to_corners(a), to_corners(b)
    inter = _intersection_area(ca, cb)
    union = ca.area + cb.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def generalized_iou(a: BoundingBox, b: BoundingBox) -> float:
    """IoU minus the enclosing-box penalty; ranges over [-1, 1]."""
    ca, cb = to_corners(a), to_corners(b)
    inter = _intersection_area(ca, cb)
    union = ca.area + cb.area - inter
    enclose = CornerBox(
        min(ca.x0, cb.x0), min(ca.y0, cb.y0), max(ca.x1, cb.x1), max(ca.y1, cb.y1)
    ).area
    if enclose <= 0.0:
        return 0.0
    base = inter / union if union > 0.0 else 0.0
    return base - (enclose - union) / enclose


def l1_distance(a: BoundingBox, b: BoundingBox) -> float:
    """Sum of absolute differences over the four (cx, cy, w, h) components."""
    return (
        abs(a.cx - b.cx) + abs(a.cy - b.cy) + abs(a.w - b.w) + abs(a.h - b.h)
    )


# Vectorized forms over (n, 4) cxcywh arrays; used by the cost matrix and
# the evaluator hot paths. They agree with the scalar functions exactly.


def boxes_to_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=-1)


def corners_to_boxes(corners: np.ndarray) -> np.ndarray:
    corners = np.asarray(corners, dtype=np.float64)
    x0, y0, x1, y1 = corners[..., 0], corners[..., 1], corners[..., 2], corners[..., 3]
    return np.stack([(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) cxcywh arrays, shape (n, m)."""
    iou_m, _, _ = _iou_union_enclose(a, b)
    return iou_m


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise generalized IoU, shape (n, m)."""
    iou_m, union, enclose = _iou_union_enclose(a, b)
    out = np.where(enclose > 0.0, iou_m - (enclose - union) / np.where(enclose > 0.0, enclose, 1.0), 0.0)
    return out


def l1_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise component-wise L1 distance, shape (n, m)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=-1)


def _iou_union_enclose(a: np.ndarray, b: np.ndarray):
    ca = boxes_to_corners(a)[:, None, :]
    cb = boxes_to_corners(b)[None, :, :]
    iw = np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0])
    ih = np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1])
    inter = np.where((iw > 0.0) & (ih > 0.0), iw * ih, 0.0)
    area_a = np.maximum(0.0, ca[..., 2] - ca[..., 0]) * np.maximum(0.0, ca[..., 3] - ca[..., 1])
    area_b = np.maximum(0.0, cb[..., 2] - cb[..., 0]) * np.maximum(0.0, cb[..., 3] - cb[..., 1])
    union = area_a + area_b - inter
    iou_m = np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)
    ew = np.maximum(ca[..., 2], cb[..., 2]) - np.minimum(ca[..., 0], cb[..., 0])
    eh = np.maximum(ca[..., 3], cb[..., 3]) - np.minimum(ca[..., 1], cb[..., 1])
    enclose = np.maximum(0.0, ew) * np.maximum(0.0, eh)
    return iou_m, union, enclose
