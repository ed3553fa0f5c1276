import math

import numpy as np
import pytest

import setpredict.autodiff as ad
from oracles import fd_grad, rel_err
from setpredict.geometry import BoundingBox
from setpredict.losses import (
    LossBreakdown,
    LossConfig,
    denoising_loss,
    hungarian_loss,
    tensors_from_predictions,
    total_loss,
)
from setpredict.matching import GroundTruthObject, MatchAssignment, Prediction, match
from setpredict.queries import NoiseConfig, QueryVariant, build_query_groups

UNIT_BOX_CFG = LossConfig(w_class=1.0, w_l1=1.0, w_giou=1.0, w_dn=1.0, noobj_weight=0.1)


def onehot(c, n_classes=3, p=1.0):
    v = np.zeros(n_classes + 1)
    v[c] = p
    v[-1] += 1.0 - p
    return v


def noobj_probs(n_classes=3):
    v = np.zeros(n_classes + 1)
    v[-1] = 1.0
    return v


def make_scene(rng, n_gts, n_preds, n_classes=3):
    gts = [
        GroundTruthObject(
            class_id=int(rng.integers(0, n_classes)),
            box=BoundingBox(*rng.uniform([0.2, 0.2, 0.05, 0.05], [0.8, 0.8, 0.3, 0.3])),
        )
        for _ in range(n_gts)
    ]
    preds = []
    for _ in range(n_preds):
        raw = rng.random(n_classes + 1) + 0.1
        preds.append(
            Prediction(
                class_probs=raw / raw.sum(),
                box=BoundingBox(*rng.uniform([0.2, 0.2, 0.05, 0.05], [0.8, 0.8, 0.3, 0.3])),
            )
        )
    return preds, gts


class TestHungarianLoss:
    def test_perfect_predictions_zero_loss(self):
        box = BoundingBox(0.4, 0.4, 0.2, 0.2)
        gts = [GroundTruthObject(1, box)]
        preds = [
            Prediction(onehot(1), box),
            Prediction(noobj_probs(), BoundingBox(0.5, 0.5, 0.1, 0.1)),
        ]
        probs, boxes = tensors_from_predictions(preds)
        bd = hungarian_loss(probs, boxes, gts, MatchAssignment([(0, 0)], [1]), UNIT_BOX_CFG)
        assert bd.total == 0.0
        assert bd.class_nll == 0.0 and bd.l1 == 0.0 and bd.giou == 0.0

    def test_class_term_is_nll(self):
        box = BoundingBox(0.4, 0.4, 0.2, 0.2)
        gts = [GroundTruthObject(0, box)]
        preds = [Prediction(onehot(0, p=math.exp(-1.0)), box)]
        probs, boxes = tensors_from_predictions(preds)
        bd = hungarian_loss(probs, boxes, gts, MatchAssignment([(0, 0)], []), UNIT_BOX_CFG)
        assert bd.class_nll == pytest.approx(1.0, abs=1e-12)
        assert bd.total == pytest.approx(1.0, abs=1e-12)

    def test_box_term_composes_l1_and_giou(self):
        gts = [GroundTruthObject(0, BoundingBox(0.5, 0.5, 0.5, 0.5))]
        preds = [Prediction(onehot(0), BoundingBox(0.75, 0.5, 0.5, 0.5))]
        probs, boxes = tensors_from_predictions(preds)
        bd = hungarian_loss(probs, boxes, gts, MatchAssignment([(0, 0)], []), UNIT_BOX_CFG)
        assert bd.l1 == pytest.approx(0.25, abs=1e-12)
        assert bd.giou == pytest.approx(2.0 / 3.0, abs=1e-12)
        assert bd.total == pytest.approx(0.25 + 2.0 / 3.0, abs=1e-12)

    def test_noobj_slots_downweighted(self):
        # two unmatched slots predicting no-object with probability 1/e
        probs_arr = np.stack([onehot(3, p=1.0) for _ in range(2)])
        probs_arr[:, 3] = math.exp(-1.0)
        probs_arr[:, 0] = 1.0 - math.exp(-1.0)
        preds = [
            Prediction(probs_arr[i], BoundingBox(0.5, 0.5, 0.1, 0.1)) for i in range(2)
        ]
        probs, boxes = tensors_from_predictions(preds)
        bd = hungarian_loss(probs, boxes, [], MatchAssignment([], [0, 1]), UNIT_BOX_CFG)
        assert bd.class_nll == pytest.approx(2 * 0.1 * 1.0, abs=1e-12)

    def test_zero_probability_clamps_and_flags(self):
        box = BoundingBox(0.4, 0.4, 0.2, 0.2)
        gts = [GroundTruthObject(0, box)]
        preds = [Prediction(onehot(1), box)]  # probability 0 at the true class
        probs, boxes = tensors_from_predictions(preds)
        bd = hungarian_loss(probs, boxes, gts, MatchAssignment([(0, 0)], []), UNIT_BOX_CFG)
        assert bd.clamped
        assert bd.class_nll == pytest.approx(-math.log(1e-12), rel=1e-9)


class TestDenoisingLoss:
    CFG = NoiseConfig(lambda1=0.4, lambda2=0.8)

    def build(self, gts, rng):
        return build_query_groups(gts, len(gts) or 1, self.CFG, rng)

    def test_perfect_positive_dn_zero(self):
        box = BoundingBox(0.4, 0.4, 0.2, 0.2)
        gts = [GroundTruthObject(2, box)]
        qs = self.build(gts, np.random.default_rng(0))
        # slots aligned with qs.dn_indices: positive then negative
        probs = ad.constant(np.stack([onehot(2), noobj_probs()]))
        boxes = ad.constant(np.stack([box.as_array(), [0.9, 0.9, 0.05, 0.05]]))
        bd = denoising_loss(probs, boxes, qs, gts, UNIT_BOX_CFG)
        assert bd.dn_class == 0.0
        assert bd.dn_box == 0.0

    def test_negative_dn_perfect_noobj_zero(self):
        box = BoundingBox(0.4, 0.4, 0.2, 0.2)
        gts = [GroundTruthObject(0, box)]
        qs = self.build(gts, np.random.default_rng(0))
        probs = ad.constant(np.stack([onehot(0), noobj_probs()]))
        boxes = ad.constant(np.stack([box.as_array(), box.as_array()]))
        bd = denoising_loss(probs, boxes, qs, gts, UNIT_BOX_CFG)
        assert bd.dn_class == 0.0

    def test_half_probability_positive(self):
        box = BoundingBox(0.4, 0.4, 0.2, 0.2)
        gts = [GroundTruthObject(1, box)]
        qs = self.build(gts, np.random.default_rng(0))
        probs = ad.constant(np.stack([onehot(1, p=0.5), noobj_probs()]))
        boxes = ad.constant(np.stack([box.as_array(), box.as_array()]))
        bd = denoising_loss(probs, boxes, qs, gts, UNIT_BOX_CFG)
        assert bd.dn_class == pytest.approx(math.log(2.0), abs=1e-12)

    def test_negative_dn_has_no_box_term(self):
        box = BoundingBox(0.4, 0.4, 0.2, 0.2)
        gts = [GroundTruthObject(1, box)]
        qs = self.build(gts, np.random.default_rng(0))
        probs = ad.constant(np.stack([onehot(1), noobj_probs()]))
        # negative slot box is far off; must not contribute
        boxes = ad.constant(np.stack([box.as_array(), [0.9, 0.9, 0.01, 0.01]]))
        bd = denoising_loss(probs, boxes, qs, gts, UNIT_BOX_CFG)
        assert bd.dn_box == 0.0

    def test_missing_gt_index_rejected(self):
        box = BoundingBox(0.4, 0.4, 0.2, 0.2)
        gts = [GroundTruthObject(1, box)]
        qs = self.build(gts, np.random.default_rng(0))
        qs.gt_index[qs.dn_indices[0]] = None
        probs = ad.constant(np.stack([onehot(1), noobj_probs()]))
        boxes = ad.constant(np.stack([box.as_array(), box.as_array()]))
        with pytest.raises(ValueError):
            denoising_loss(probs, boxes, qs, gts, UNIT_BOX_CFG)


class TestTotalLoss:
    CFG = NoiseConfig(lambda1=0.4, lambda2=0.8)

    def build_inputs(self, rng, n_gts=2, n_matching=5, variant=QueryVariant.ANCHORS_POS_NEG_NOISE):
        preds, gts = make_scene(rng, n_gts, n_matching)
        qs = build_query_groups(gts, n_matching, self.CFG, rng, variant=variant)
        n_dn = len(qs) - n_matching
        dn_preds, _ = make_scene(rng, 0, n_dn)
        all_probs = np.stack([p.class_probs for p in preds + dn_preds])
        all_boxes = np.stack([p.box.as_array() for p in preds + dn_preds])
        return ad.constant(all_probs), ad.constant(all_boxes), qs, gts

    def test_wdn_zero_reduces_to_hungarian(self):
        rng = np.random.default_rng(0)
        probs, boxes, qs, gts = self.build_inputs(rng)
        cfg0 = LossConfig(w_dn=0.0)
        bd = total_loss(probs, boxes, qs, gts, cfg0)
        m = np.array(qs.matching_indices)
        m_probs = ad.constant(probs.data[m])
        m_boxes = ad.constant(boxes.data[m])
        preds = [
            Prediction(probs.data[i], BoundingBox(*boxes.data[i])) for i in m
        ]
        hung = hungarian_loss(m_probs, m_boxes, gts, match(preds, gts), cfg0)
        assert bd.total == pytest.approx(hung.total, abs=1e-12)

    def test_no_gts_all_noobj_class_term(self):
        rng = np.random.default_rng(1)
        probs, boxes, qs, gts = self.build_inputs(rng, n_gts=0)
        cfg = LossConfig()
        bd = total_loss(probs, boxes, qs, [], cfg)
        expected = cfg.noobj_weight * float(
            -np.log(probs.data[:, -1]).sum()
        )
        assert bd.total == pytest.approx(cfg.w_class * expected, rel=1e-12)
        assert bd.l1 == 0.0 and bd.giou == 0.0 and bd.dn_class == 0.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            probs, boxes, qs, gts = self.build_inputs(rng, n_gts=3, n_matching=6)
            bd = total_loss(probs, boxes, qs, gts)
            perm = rng.permutation(6)
            order = np.concatenate([perm, np.arange(6, len(qs))])
            shuffled = total_loss(
                ad.constant(probs.data[order]), ad.constant(boxes.data[order]), qs, gts
            )
            assert abs(bd.total - shuffled.total) < 1e-9

    def test_monotone_in_true_class_probability(self):
        box = BoundingBox(0.4, 0.4, 0.2, 0.2)
        gts = [GroundTruthObject(0, box)]
        qs = build_query_groups(gts, 1, self.CFG, np.random.default_rng(0),
                                variant=QueryVariant.ANCHOR_BOXES)
        losses = []
        for p in (0.2, 0.4, 0.6, 0.8, 1.0):
            probs = ad.constant(onehot(0, p=p).reshape(1, -1))
            boxes = ad.constant(box.as_array().reshape(1, -1))
            losses.append(total_loss(probs, boxes, qs, gts).total)
        assert all(a >= b - 1e-12 for a, b in zip(losses, losses[1:]))

    def test_dn_strictly_increases_unless_perfect(self):
        rng = np.random.default_rng(3)
        probs, boxes, qs, gts = self.build_inputs(rng)
        with_dn = total_loss(probs, boxes, qs, gts, LossConfig(w_dn=1.0))
        without = total_loss(probs, boxes, qs, gts, LossConfig(w_dn=0.0))
        assert with_dn.total > without.total

    def test_gradcheck_against_finite_differences(self):
        rng = np.random.default_rng(4)
        _, gts = make_scene(rng, 2, 0)
        qs = build_query_groups(gts, 4, self.CFG, rng)
        n = len(qs)
        logits0 = rng.standard_normal((n, 4))
        # box leaves parameterized through sigmoid to stay in (0, 1)
        raw0 = rng.standard_normal((n, 4)) * 0.5

        def run(logits_arr, raw_arr, want_grads=False):
            logits = ad.Tensor(logits_arr, requires_grad=want_grads)
            raw = ad.Tensor(raw_arr, requires_grad=want_grads)
            probs = ad.softmax(logits, axis=-1)
            boxes = ad.sigmoid(raw)
            bd = total_loss(probs, boxes, qs, gts)
            return bd, logits, raw

        bd, logits, raw = run(logits0, raw0, want_grads=True)
        ad.backward(bd.node)
        fd_logits = fd_grad(lambda v: run(v, raw0)[0].total, logits0)
        fd_raw = fd_grad(lambda v: run(logits0, v)[0].total, raw0)
        assert rel_err(logits.grad, fd_logits) < 1e-4
        assert rel_err(raw.grad, fd_raw) < 1e-4


def test_breakdown_total_is_weighted_sum():
    rng = np.random.default_rng(5)
    preds, gts = make_scene(rng, 2, 5)
    probs, boxes = tensors_from_predictions(preds)
    cfg = LossConfig(w_class=2.0, w_l1=3.0, w_giou=0.5)
    bd = hungarian_loss(probs, boxes, gts, match(preds, gts), cfg)
    assert bd.total == pytest.approx(
        cfg.w_class * bd.class_nll + cfg.w_l1 * bd.l1 + cfg.w_giou * bd.giou, rel=1e-12
    )


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(noobj_weight=0.0).validate()
    with pytest.raises(ValueError):
        LossConfig(w_l1=-1.0).validate()


def test_breakdown_csv_fields():
    assert LossBreakdown.CSV_FIELDS[0] == "total"
