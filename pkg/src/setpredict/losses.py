"""Training objectives: the set-prediction loss over the optimal assignment
plus the auxiliary losses on noised-anchor query groups.

The assignment is computed on detached values; gradients flow through the
class probabilities and box coordinates only. Class terms use the negative
log-likelihood while the matching cost uses raw probabilities, which keeps
the cost matrix bounded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import BoundingBox
from .matching import (
    CostWeights,
    GroundTruthObject,
    MatchAssignment,
    Prediction,
    match,
)
from .queries import QueryGroup, QuerySet

PROB_FLOOR = 1e-12
AREA_FLOOR = 1e-12

# linear map from (cx, cy, w, h) rows to (x0, y0, x1, y1) rows
_CORNER_MAP = np.array(
    [
        [1.0, 0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0, 1.0],
        [-0.5, 0.0, 0.5, 0.0],
        [0.0, -0.5, 0.0, 0.5],
    ]
)


@dataclass(frozen=True)
class LossConfig:
    w_class: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_dn: float = 1.0
    noobj_weight: float = 0.1
    aux_layers: bool = True

    def validate(self) -> None:
        if min(self.w_class, self.w_l1, self.w_giou, self.w_dn) < 0.0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.noobj_weight <= 1.0:
            raise ValueError("noobj_weight must lie in (0, 1]")


@dataclass
class LossBreakdown:
    """Component sums; total applies the configured weights.

    l1 and giou are raw sums over matched real targets; dn_box already
    folds the configured w_l1/w_giou weights, mirroring how it enters the
    total. node carries the differentiable scalar when one was built.
    """

    class_nll: float = 0.0
    l1: float = 0.0
    giou: float = 0.0
    dn_class: float = 0.0
    dn_box: float = 0.0
    total: float = 0.0
    node: ad.Tensor | None = field(default=None, repr=False, compare=False)
    clamped: bool = field(default=False, compare=False)

    CSV_FIELDS = ("total", "class_nll", "l1", "giou", "dn_class", "dn_box")


def tensors_from_predictions(preds: list[Prediction]) -> tuple[ad.Tensor, ad.Tensor]:
    """Constant probability and box tensors for a list of predictions."""
    probs = np.stack([p.class_probs for p in preds])
    boxes = np.stack([p.box.as_array() for p in preds])
    return ad.constant(probs), ad.constant(boxes)


def _nll_at(probs: ad.Tensor, rows: np.ndarray, classes: np.ndarray) -> tuple[ad.Tensor, bool]:
    """Per-slot negative log-likelihood; zero probabilities clamp and flag."""
    picked = probs[rows, classes]
    clamped = bool(np.any(picked.data < PROB_FLOOR))
    return ad.neg(ad.log(ad.maximum(picked, PROB_FLOOR))), clamped


def _box_terms(pred_boxes: ad.Tensor, gt_boxes: np.ndarray) -> tuple[ad.Tensor, ad.Tensor]:
    """Aligned-pair L1 sum and (1 - GIoU) sum, both differentiable."""
    pc = ad.matmul(pred_boxes, ad.constant(_CORNER_MAP))
    gc = np.asarray(gt_boxes, dtype=np.float64) @ _CORNER_MAP

    l1 = ad.sum_(ad.abs_(ad.sub(pred_boxes, ad.constant(gt_boxes))))

    ix0 = ad.maximum(pc[:, 0], gc[:, 0])
    iy0 = ad.maximum(pc[:, 1], gc[:, 1])
    ix1 = ad.minimum(pc[:, 2], gc[:, 2])
    iy1 = ad.minimum(pc[:, 3], gc[:, 3])
    inter = ad.mul(ad.relu(ad.sub(ix1, ix0)), ad.relu(ad.sub(iy1, iy0)))

    area_p = ad.mul(ad.sub(pc[:, 2], pc[:, 0]), ad.sub(pc[:, 3], pc[:, 1]))
    area_g = (gc[:, 2] - gc[:, 0]) * (gc[:, 3] - gc[:, 1])
    union = ad.sub(ad.add(area_p, area_g), inter)
    iou = ad.div(inter, ad.maximum(union, AREA_FLOOR))

    ex0 = ad.minimum(pc[:, 0], gc[:, 0])
    ey0 = ad.minimum(pc[:, 1], gc[:, 1])
    ex1 = ad.maximum(pc[:, 2], gc[:, 2])
    ey1 = ad.maximum(pc[:, 3], gc[:, 3])
    enclose = ad.maximum(ad.mul(ad.sub(ex1, ex0), ad.sub(ey1, ey0)), AREA_FLOOR)

    giou = ad.sub(iou, ad.div(ad.sub(enclose, union), enclose))
    giou_term = ad.sum_(ad.sub(1.0, giou))
    return l1, giou_term


def hungarian_loss(
    pred_probs: ad.Tensor,
    pred_boxes: ad.Tensor,
    gts: list[GroundTruthObject],
    assignment: MatchAssignment,
    cfg: LossConfig = LossConfig(),
) -> LossBreakdown:
    """Loss over all prediction slots under a fixed assignment.

    Every slot contributes a class NLL (no-object slots scaled by
    noobj_weight); matched real targets add the box terms.
    """
    cfg.validate()
    n, n_classes_plus = pred_probs.shape
    noobj = n_classes_plus - 1
    classes = np.full(n, noobj, dtype=np.intp)
    for p_idx, t_idx in assignment.pairs:
        classes[p_idx] = gts[t_idx].class_id

    rows = np.arange(n, dtype=np.intp)
    nll, clamped = _nll_at(pred_probs, rows, classes)
    weights = np.where(classes == noobj, cfg.noobj_weight, 1.0)
    class_term = ad.sum_(ad.mul(nll, weights))

    total = ad.mul(class_term, cfg.w_class)
    l1_val = giou_val = 0.0
    if assignment.pairs:
        p_rows = np.array([p for p, _ in assignment.pairs], dtype=np.intp)
        g_rows = np.stack([gts[t].box.as_array() for _, t in assignment.pairs])
        l1, giou_term = _box_terms(ad.take(pred_boxes, p_rows, axis=0), g_rows)
        total = ad.add(total, ad.add(ad.mul(l1, cfg.w_l1), ad.mul(giou_term, cfg.w_giou)))
        l1_val = float(l1.data)
        giou_val = float(giou_term.data)

    return LossBreakdown(
        class_nll=float(class_term.data),
        l1=l1_val,
        giou=giou_val,
        total=float(total.data),
        node=total,
        clamped=clamped,
    )


def denoising_loss(
    dn_probs: ad.Tensor,
    dn_boxes: ad.Tensor,
    qs: QuerySet,
    gts: list[GroundTruthObject],
    cfg: LossConfig = LossConfig(),
) -> LossBreakdown:
    """Loss on the denoising slots; correspondence is known, no matching.

    Positive slots reconstruct their ground truth (class NLL plus box
    terms); negative slots are trained to predict no-object.
    """
    cfg.validate()
    dn_idx = qs.dn_indices
    if dn_probs.shape[0] != len(dn_idx):
        raise ValueError(
            f"{dn_probs.shape[0]} denoising predictions for {len(dn_idx)} queries"
        )
    if not dn_idx:
        zero = ad.constant(0.0)
        return LossBreakdown(node=zero)

    noobj = dn_probs.shape[1] - 1
    classes = np.empty(len(dn_idx), dtype=np.intp)
    pos_rows = []
    pos_gt = []
    for row, q in enumerate(dn_idx):
        gt_i = qs.gt_index[q]
        if gt_i is None:
            raise ValueError(f"denoising query {q} has no ground-truth index")
        if qs.group_of[q] is QueryGroup.POSITIVE_DN:
            classes[row] = gts[gt_i].class_id
            pos_rows.append(row)
            pos_gt.append(gts[gt_i].box.as_array())
        else:
            classes[row] = noobj

    rows = np.arange(len(dn_idx), dtype=np.intp)
    nll, clamped = _nll_at(dn_probs, rows, classes)
    dn_class = ad.sum_(nll)
    node = dn_class
    dn_box_val = 0.0
    if pos_rows:
        l1, giou_term = _box_terms(
            ad.take(dn_boxes, np.array(pos_rows, dtype=np.intp), axis=0),
            np.stack(pos_gt),
        )
        dn_box = ad.add(ad.mul(l1, cfg.w_l1), ad.mul(giou_term, cfg.w_giou))
        node = ad.add(dn_class, dn_box)
        dn_box_val = float(dn_box.data)

    return LossBreakdown(
        dn_class=float(dn_class.data),
        dn_box=dn_box_val,
        total=0.0,
        node=node,
        clamped=clamped,
    )


def total_loss(
    probs: ad.Tensor,
    boxes: ad.Tensor,
    qs: QuerySet,
    gts: list[GroundTruthObject],
    cfg: LossConfig = LossConfig(),
    cost_weights: CostWeights = CostWeights(),
) -> LossBreakdown:
    """Match the matching-group slots, then combine all loss components."""
    cfg.validate()
    m_idx = np.array(qs.matching_indices, dtype=np.intp)
    d_idx = np.array(qs.dn_indices, dtype=np.intp)
    if probs.shape[0] != len(qs):
        raise ValueError(f"{probs.shape[0]} predictions for {len(qs)} queries")

    m_probs = ad.take(probs, m_idx, axis=0)
    m_boxes = ad.take(boxes, m_idx, axis=0)
    preds = [
        Prediction(class_probs=p, box=BoundingBox(*map(float, b)))
        for p, b in zip(m_probs.data, m_boxes.data)
    ]
    assignment = match(preds, gts, cost_weights)
    hung = hungarian_loss(m_probs, m_boxes, gts, assignment, cfg)

    node = hung.node
    dn = LossBreakdown()
    if len(d_idx):
        dn = denoising_loss(
            ad.take(probs, d_idx, axis=0), ad.take(boxes, d_idx, axis=0), qs, gts, cfg
        )
        if cfg.w_dn:
            node = ad.add(node, ad.mul(dn.node, cfg.w_dn))

    return LossBreakdown(
        class_nll=hung.class_nll,
        l1=hung.l1,
        giou=hung.giou,
        dn_class=dn.dn_class,
        dn_box=dn.dn_box,
        total=float(node.data),
        node=node,
        clamped=hung.clamped or dn.clamped,
    )


def combine_breakdowns(parts: list[LossBreakdown], scale: float = 1.0) -> LossBreakdown:
    """Sum breakdowns (for auxiliary layers / batches), scaling every term."""
    if not parts:
        return LossBreakdown(node=ad.constant(0.0))
    node = parts[0].node
    for p in parts[1:]:
        node = ad.add(node, p.node)
    if scale != 1.0:
        node = ad.mul(node, scale)
    return LossBreakdown(
        class_nll=scale * sum(p.class_nll for p in parts),
        l1=scale * sum(p.l1 for p in parts),
        giou=scale * sum(p.giou for p in parts),
        dn_class=scale * sum(p.dn_class for p in parts),
        dn_box=scale * sum(p.dn_box for p in parts),
        total=float(node.data),
        node=node,
        clamped=any(p.clamped for p in parts),
    )
