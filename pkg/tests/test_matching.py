import numpy as np
import pytest

from oracles import brute_force_assignment_cost
from setpredict.geometry import BoundingBox, generalized_iou, l1_distance
from setpredict.matching import (
    CostWeights,
    GroundTruthObject,
    Prediction,
    assignment_cost,
    cost_matrix,
    hungarian,
    match,
    pad_targets,
)

UNIT = CostWeights(1.0, 1.0, 1.0)


def make_pred(prob_at, class_id, box, n_classes=3):
    probs = np.zeros(n_classes + 1)
    probs[class_id] = prob_at
    probs[-1] = 1.0 - prob_at
    return Prediction(class_probs=probs, box=box)


def test_prediction_validates_simplex():
    with pytest.raises(ValueError):
        Prediction(class_probs=np.array([0.5, 0.6]), box=BoundingBox(0.5, 0.5, 0.1, 0.1))
    with pytest.raises(ValueError):
        Prediction(class_probs=np.array([-0.1, 1.1]), box=BoundingBox(0.5, 0.5, 0.1, 0.1))


def test_cost_perfect_prediction():
    box = BoundingBox(0.5, 0.5, 0.2, 0.2)
    pred = make_pred(1.0, 0, box)
    gt = GroundTruthObject(class_id=0, box=box)
    c = cost_matrix([pred], [gt], UNIT)
    assert c[0, 0] == pytest.approx(-1.0, abs=1e-12)


def test_cost_half_probability_same_box():
    box = BoundingBox(0.5, 0.5, 0.2, 0.2)
    pred = make_pred(0.5, 1, box)
    gt = GroundTruthObject(class_id=1, box=box)
    c = cost_matrix([pred], [gt], UNIT)
    assert c[0, 0] == pytest.approx(-0.5, abs=1e-12)


def test_cost_composed_from_geometry():
    pbox = BoundingBox(0.75, 0.5, 0.5, 0.5)
    gbox = BoundingBox(0.5, 0.5, 0.5, 0.5)
    pred = make_pred(1.0, 0, pbox)
    gt = GroundTruthObject(class_id=0, box=gbox)
    expected = -1.0 + l1_distance(gbox, pbox) + (1.0 - generalized_iou(gbox, pbox))
    c = cost_matrix([pred], [gt], UNIT)
    assert c[0, 0] == pytest.approx(expected, abs=1e-12)
    assert c[0, 0] == pytest.approx(-1.0 + 0.25 + (1.0 - 1.0 / 3.0), abs=1e-12)


def test_cost_rejects_mismatched_class_dims():
    box = BoundingBox(0.5, 0.5, 0.2, 0.2)
    a = make_pred(1.0, 0, box, n_classes=3)
    b = make_pred(1.0, 0, box, n_classes=4)
    with pytest.raises(ValueError):
        cost_matrix([a, b], [GroundTruthObject(0, box)], UNIT)


def test_cost_noobj_column_is_class_only():
    box = BoundingBox(0.5, 0.5, 0.2, 0.2)
    far = BoundingBox(0.9, 0.9, 0.1, 0.1)
    preds = [make_pred(0.7, 0, box), make_pred(0.2, 1, far)]
    gts = pad_targets([GroundTruthObject(0, box)], 3)
    c = cost_matrix(preds, gts, CostWeights(2.0, 5.0, 2.0))
    # padding columns carry only the class term against the no-object slot
    for i, p in enumerate(preds):
        assert c[i, 1] == pytest.approx(-2.0 * p.noobj_prob, abs=1e-12)
        assert c[i, 2] == c[i, 1]


def test_hungarian_diagonal_optimum():
    a = hungarian(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert a.pairs == [(0, 0), (1, 1)]
    assert a.unmatched_predictions == []


def test_hungarian_matches_exhaustive_2x2():
    cost = np.array([[1.0, 2.0], [2.0, 1.0]])
    a = hungarian(cost)
    assert assignment_cost(cost, a) == brute_force_assignment_cost(cost) == 2.0
    assert a.pairs == [(0, 0), (1, 1)]


def test_hungarian_matches_exhaustive_3x3():
    cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
    a = hungarian(cost)
    assert assignment_cost(cost, a) == brute_force_assignment_cost(cost) == 5.0
    assert set(a.pairs) == {(0, 1), (1, 0), (2, 2)}


def test_hungarian_rejects_nan():
    with pytest.raises(ValueError):
        hungarian(np.array([[0.0, np.nan], [1.0, 0.0]]))


def test_hungarian_rectangular():
    cost = np.array([[5.0, 1.0], [2.0, 4.0], [3.0, 3.0]])
    a = hungarian(cost)
    assert len(a.pairs) == 2
    assert len(a.unmatched_predictions) == 1
    assert assignment_cost(cost, a) == brute_force_assignment_cost(cost)


def test_hungarian_oracle_random_small():
    # summation order differs between the two sides for rectangular
    # matrices, hence the hair above float noise
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(2, 8))
        m = int(rng.integers(1, n + 1))
        cost = rng.standard_normal((n, m))
        a = hungarian(cost)
        assert assignment_cost(cost, a) == pytest.approx(
            brute_force_assignment_cost(cost), abs=1e-12
        )


def test_hungarian_row_column_shift_invariance():
    # classical property: shifting a row or column changes the optimal cost
    # by exactly the shift (compare cost deltas, not pair identity)
    rng = np.random.default_rng(5)
    for _ in range(20):
        cost = rng.standard_normal((5, 5))
        base = assignment_cost(cost, hungarian(cost))
        shifted = cost.copy()
        shifted[2, :] += 3.5
        assert assignment_cost(shifted, hungarian(shifted)) == pytest.approx(
            base + 3.5, abs=1e-9
        )
        shifted = cost.copy()
        shifted[:, 1] -= 1.25
        assert assignment_cost(shifted, hungarian(shifted)) == pytest.approx(
            base - 1.25, abs=1e-9
        )


def test_pad_targets_counts():
    box = BoundingBox(0.5, 0.5, 0.2, 0.2)
    gts = [GroundTruthObject(0, box), GroundTruthObject(1, box)]
    padded = pad_targets(gts, 5)
    assert padded[:2] == gts
    assert padded[2:] == [None, None, None]


def test_pad_targets_empty_image():
    assert pad_targets([], 10) == [None] * 10


def test_pad_targets_no_padding_needed():
    box = BoundingBox(0.5, 0.5, 0.2, 0.2)
    gts = [GroundTruthObject(i, box) for i in range(3)]
    assert pad_targets(gts, 3) == gts


def test_pad_targets_rejects_overflow():
    box = BoundingBox(0.5, 0.5, 0.2, 0.2)
    with pytest.raises(ValueError):
        pad_targets([GroundTruthObject(0, box)] * 4, 3)


def test_match_empty_targets():
    preds = [make_pred(0.9, 0, BoundingBox(0.5, 0.5, 0.2, 0.2)) for _ in range(3)]
    a = match(preds, [])
    assert a.pairs == []
    assert a.unmatched_predictions == [0, 1, 2]


def test_match_prefers_right_prediction():
    gt_box = BoundingBox(0.3, 0.3, 0.2, 0.2)
    near = make_pred(0.9, 0, BoundingBox(0.32, 0.3, 0.2, 0.2))
    far = make_pred(0.9, 0, BoundingBox(0.8, 0.8, 0.2, 0.2))
    a = match([far, near], [GroundTruthObject(0, gt_box)])
    assert a.pairs == [(1, 0)]
    assert a.unmatched_predictions == [0]
