"""One-to-one assignment between prediction slots and ground-truth objects.

The cost matrix combines a raw-probability class term with L1 and
generalized-IoU box terms; the assignment is solved exactly. The no-object
class always occupies the last slot of a prediction's probability vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import BoundingBox, giou_matrix, l1_matrix

PROB_SUM_TOL = 1e-9


@dataclass(frozen=True)
class GroundTruthObject:
    """A real annotated object; class_id is never the no-object id."""

    class_id: int
    box: BoundingBox


@dataclass
class Prediction:
    """One decoder slot: a (C+1)-way class distribution plus a box.

    The last probability entry is the no-object slot.
    """

    class_probs: np.ndarray
    box: BoundingBox

    def __post_init__(self) -> None:
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        if self.class_probs.ndim != 1 or self.class_probs.size < 2:
            raise ValueError("class_probs must be a vector of length >= 2")
        if np.any(self.class_probs < 0.0):
            raise ValueError("class probabilities must be non-negative")
        if abs(float(self.class_probs.sum()) - 1.0) > PROB_SUM_TOL:
            raise ValueError("class probabilities must sum to 1")

    @property
    def num_classes(self) -> int:
        return self.class_probs.size - 1

    @property
    def noobj_prob(self) -> float:
        return float(self.class_probs[-1])


@dataclass
class MatchAssignment:
    """Pairs of (prediction_index, target_index); leftovers go to no-object."""

    pairs: list[tuple[int, int]]
    unmatched_predictions: list[int] = field(default_factory=list)

    def target_of(self) -> dict[int, int]:
        return {p: t for p, t in self.pairs}


@dataclass(frozen=True)
class CostWeights:
    """Relative weights of the class, L1 and GIoU cost terms."""

    w_class: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0

    def validate(self) -> None:
        if min(self.w_class, self.w_l1, self.w_giou) < 0.0:
            raise ValueError("cost weights must be non-negative")
        if self.w_class == self.w_l1 == self.w_giou == 0.0:
            raise ValueError("cost weights must not all be zero")


def cost_matrix(
    preds: list[Prediction],
    gts: list[GroundTruthObject | None],
    w: CostWeights = CostWeights(),
) -> np.ndarray:
    """Matching cost, shape (#preds, #gts).

    Real targets cost -w_class * p(c) + w_l1 * L1 + w_giou * (1 - GIoU);
    the class term uses the raw probability, not its log. A None entry is a
    no-object padding slot and costs only -w_class * p(no-object).
    """
    if not preds or not gts:
        raise ValueError("cost_matrix needs at least one prediction and one target")
    w.validate()
    n_classes = preds[0].num_classes
    for p in preds:
        if p.num_classes != n_classes:
            raise ValueError(
                f"inconsistent class dimensionality: {p.num_classes} vs {n_classes}"
            )
    for g in gts:
        if g is not None and not 0 <= g.class_id < n_classes:
            raise ValueError(
                f"target class {g.class_id} outside [0, {n_classes})"
            )

    probs = np.stack([p.class_probs for p in preds])  # (n, C+1)
    pboxes = np.stack([p.box.as_array() for p in preds])
    out = np.zeros((len(preds), len(gts)), dtype=np.float64)

    real_cols = [k for k, g in enumerate(gts) if g is not None]
    pad_cols = [k for k, g in enumerate(gts) if g is None]
    if real_cols:
        gboxes = np.stack([gts[k].box.as_array() for k in real_cols])
        classes = np.array([gts[k].class_id for k in real_cols])
        cost = (
            -w.w_class * probs[:, classes]
            + w.w_l1 * l1_matrix(pboxes, gboxes)
            + w.w_giou * (1.0 - giou_matrix(pboxes, gboxes))
        )
        out[:, real_cols] = cost
    if pad_cols:
        out[:, pad_cols] = (-w.w_class * probs[:, -1])[:, None]
    return out


def hungarian(cost: np.ndarray) -> MatchAssignment:
    """Minimum-cost one-to-one assignment covering min(n, m) pairs.

    Deterministic for a fixed input; pairs are returned sorted by
    prediction index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError(f"cost matrix must be 2-D and non-empty, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    matched = {r for r, _ in pairs}
    unmatched = [r for r in range(cost.shape[0]) if r not in matched]
    return MatchAssignment(pairs=pairs, unmatched_predictions=unmatched)


def assignment_cost(cost: np.ndarray, assignment: MatchAssignment) -> float:
    """Total cost of an assignment, summed in ascending prediction order."""
    return float(sum(cost[r, c] for r, c in assignment.pairs))


def pad_targets(
    gts: list[GroundTruthObject], n: int
) -> list[GroundTruthObject | None]:
    """Pad the target list to n slots with no-object (None) sentinels."""
    if n < len(gts):
        raise ValueError(f"cannot pad {len(gts)} targets into {n} slots")
    return list(gts) + [None] * (n - len(gts))


def match(
    preds: list[Prediction],
    gts: list[GroundTruthObject],
    w: CostWeights = CostWeights(),
) -> MatchAssignment:
    """Assign predictions to the real targets only.

    Leftover prediction slots are charged for the no-object class by the
    loss, not by the assignment, so padding columns are omitted here. With
    no targets, every prediction is unmatched.
    """
    if not gts:
        return MatchAssignment(pairs=[], unmatched_predictions=list(range(len(preds))))
    return hungarian(cost_matrix(preds, gts, w))
