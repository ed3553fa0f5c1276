import numpy as np
import pytest

from oracles import average_precision_reference, evaluate_reference
from setpredict.evaluation import (
    COCO_THRESHOLDS,
    Detection,
    MatchedDetections,
    ap_vs_iou_sweep,
    average_precision,
    coco_summary,
    match_at_iou,
    precision_recall_f1,
)
from setpredict.geometry import BoundingBox, to_corners
from setpredict.matching import GroundTruthObject

BOX = BoundingBox(0.4, 0.4, 0.2, 0.2)


def det(cls, score, box):
    return Detection(class_id=cls, score=score, box=box)


def corners(b):
    c = to_corners(b)
    return (c.x0, c.y0, c.x1, c.y1)


def to_reference(dets, gts):
    return (
        [(d.class_id, d.score, corners(d.box)) for d in dets],
        [(g.class_id, corners(g.box)) for g in gts],
    )


def random_scene(rng, n_classes=3, max_objects=5):
    gts = []
    for _ in range(int(rng.integers(0, max_objects + 1))):
        gts.append(
            GroundTruthObject(
                class_id=int(rng.integers(0, n_classes)),
                box=BoundingBox(*rng.uniform([0.15, 0.15, 0.05, 0.05], [0.85, 0.85, 0.25, 0.25])),
            )
        )
    dets = []
    # noisy copies of ground truths plus random false positives
    for g in gts:
        if rng.random() < 0.85:
            arr = g.box.as_array() + rng.normal(0, 0.02, size=4)
            arr[2:] = np.abs(arr[2:]) + 0.01
            cls = g.class_id if rng.random() < 0.9 else int(rng.integers(0, n_classes))
            dets.append(det(cls, float(rng.random()), BoundingBox(*np.clip(arr, 0, 1))))
    for _ in range(int(rng.integers(0, 3))):
        dets.append(
            det(
                int(rng.integers(0, n_classes)),
                float(rng.random()),
                BoundingBox(*rng.uniform([0.1, 0.1, 0.05, 0.05], [0.9, 0.9, 0.2, 0.2])),
            )
        )
    return dets, gts


class TestMatchAtIoU:
    def test_exact_hit(self):
        m = match_at_iou([det(0, 0.9, BOX)], [GroundTruthObject(0, BOX)], 0.5)
        assert m.tp == 1 and m.fp == 0 and m.false_negatives == 0

    def test_duplicate_detection_is_fp(self):
        m = match_at_iou(
            [det(0, 0.9, BOX), det(0, 0.8, BOX)], [GroundTruthObject(0, BOX)], 0.5
        )
        assert m.tp == 1 and m.fp == 1
        # the higher-scored detection claims the ground truth
        assert m.records[0] == (0.9, True)
        assert m.records[1] == (0.8, False)

    def test_low_iou_is_fp_and_fn(self):
        shifted = BoundingBox(0.52, 0.4, 0.2, 0.2)  # IoU 0.4286 with BOX
        m = match_at_iou([det(0, 0.9, shifted)], [GroundTruthObject(0, BOX)], 0.5)
        assert m.tp == 0 and m.fp == 1 and m.false_negatives == 1

    def test_class_mismatch_never_matches(self):
        m = match_at_iou([det(1, 0.9, BOX)], [GroundTruthObject(0, BOX)], 0.5)
        assert m.tp == 0 and m.fp == 1 and m.false_negatives == 1

    def test_degenerate_boxes_dropped(self):
        bad = BoundingBox(0.4, 0.4, 0.0, 0.2)
        m = match_at_iou([det(0, 0.9, bad)], [GroundTruthObject(0, BOX)], 0.5)
        assert m.fp == 0 and m.false_negatives == 1


class TestPrecisionRecallF1:
    def test_perfect(self):
        m = MatchedDetections(records=[(0.9, True)], false_negatives=0, total_gt=1)
        assert precision_recall_f1(m) == (1.0, 1.0, 1.0)

    def test_half_precision(self):
        m = MatchedDetections(records=[(0.9, True), (0.8, False)], false_negatives=0, total_gt=1)
        p, r, f1 = precision_recall_f1(m)
        assert (p, r) == (0.5, 1.0)
        assert f1 == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_empty_denominators(self):
        m = MatchedDetections(records=[], false_negatives=0, total_gt=0)
        assert precision_recall_f1(m) == (0.0, 0.0, 0.0)


class TestAveragePrecision:
    def test_all_tp(self):
        assert average_precision([True, True, True], 3) == 1.0

    def test_hand_walked_envelope(self):
        # PR points: (1.0, 0.5), (0.5, 0.5), (2/3, 1.0); envelope gives
        # 0.5 * 1.0 + 0.5 * (2/3) = 5/6
        assert average_precision([True, False, True], 2) == pytest.approx(5.0 / 6.0, abs=1e-12)

    def test_no_detections(self):
        assert average_precision([], 3) == 0.0

    def test_no_ground_truth(self):
        assert average_precision([False, False], 0) == 0.0

    def test_matches_reference_on_random_flags(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 12))
            flags = list(rng.random(n) < 0.5)
            total = int(rng.integers(max(1, sum(flags)), sum(flags) + 5))
            assert average_precision(flags, total) == average_precision_reference(
                flags, total
            )

    def test_invariant_under_monotone_score_transform(self):
        rng = np.random.default_rng(1)
        scenes_d = []
        scenes_g = []
        for _ in range(10):
            d, g = random_scene(rng)
            scenes_d.append(d)
            scenes_g.append(g)
        base = coco_summary(scenes_d, scenes_g, (0, 1, 2))
        warped = [
            [det(d.class_id, float(np.tanh(3.0 * d.score) + 2.0), d.box) for d in dets]
            for dets in scenes_d
        ]
        after = coco_summary(warped, scenes_g, (0, 1, 2))
        assert after.ap == base.ap
        assert after.map_all == base.map_all


class TestCocoSummary:
    def perfect_scenes(self, rng, n=5):
        scenes_d, scenes_g = [], []
        for _ in range(n):
            _, gts = random_scene(rng)
            while not gts:
                _, gts = random_scene(rng)
            scenes_g.append(gts)
            scenes_d.append([det(g.class_id, 0.9, g.box) for g in gts])
        return scenes_d, scenes_g

    def test_perfect_detections_all_ones(self):
        rng = np.random.default_rng(2)
        scenes_d, scenes_g = self.perfect_scenes(rng)
        present = sorted({g.class_id for gts in scenes_g for g in gts})
        rep = coco_summary(scenes_d, scenes_g, tuple(present))
        assert rep.map_all == 1.0
        assert rep.ap50 == 1.0 and rep.ap75 == 1.0 and rep.ar == 1.0
        assert (rep.precision, rep.recall, rep.f1) == (1.0, 1.0, 1.0)

    def test_empty_detections_all_zero(self):
        rng = np.random.default_rng(3)
        _, scenes_g = self.perfect_scenes(rng)
        rep = coco_summary([[] for _ in scenes_g], scenes_g, (0, 1, 2))
        assert rep.map_all == 0.0 and rep.ap50 == 0.0 and rep.ar == 0.0

    def test_rejects_unknown_class(self):
        with pytest.raises(ValueError):
            coco_summary([[det(7, 0.5, BOX)]], [[GroundTruthObject(0, BOX)]], (0, 1, 2))

    def test_map_is_mean_of_constituents(self):
        rng = np.random.default_rng(4)
        scenes_d, scenes_g = [], []
        for _ in range(20):
            d, g = random_scene(rng)
            scenes_d.append(d)
            scenes_g.append(g)
        rep = coco_summary(scenes_d, scenes_g, (0, 1, 2))
        manual = np.mean([rep.ap[(c, t)] for c in (0, 1, 2) for t in COCO_THRESHOLDS])
        assert abs(rep.map_all - manual) < 1e-12

    def test_matches_brute_force_oracle_exactly(self):
        rng = np.random.default_rng(5)
        scenes_d, scenes_g = [], []
        for _ in range(60):
            d, g = random_scene(rng)
            scenes_d.append(d)
            scenes_g.append(g)
        rep = coco_summary(scenes_d, scenes_g, (0, 1, 2))
        ref_scenes = [to_reference(d, g) for d, g in zip(scenes_d, scenes_g)]
        ref_ap, ref_recall = evaluate_reference(
            ref_scenes, (0, 1, 2), [float(t) for t in COCO_THRESHOLDS]
        )
        for key, value in ref_ap.items():
            assert rep.ap[key] == value, key
        assert rep.ar == np.mean(
            [ref_recall[(c, float(t))] for c in (0, 1, 2) for t in COCO_THRESHOLDS]
        )

    def test_duplicate_detection_never_raises_ap(self):
        rng = np.random.default_rng(6)
        scenes_d, scenes_g = self.perfect_scenes(rng, n=3)
        before = coco_summary(scenes_d, scenes_g, (0, 1, 2)).map_all
        scenes_d[0] = scenes_d[0] + [det(scenes_g[0][0].class_id, 0.5, scenes_g[0][0].box)]
        after = coco_summary(scenes_d, scenes_g, (0, 1, 2)).map_all
        assert after <= before + 1e-12

    def test_large_area_filter(self):
        big = BoundingBox(0.5, 0.5, 0.5, 0.5)
        small = BoundingBox(0.2, 0.2, 0.05, 0.05)
        gts = [[GroundTruthObject(0, big), GroundTruthObject(0, small)]]
        dets = [[det(0, 0.9, big)]]  # only the large object found
        rep = coco_summary(dets, gts, (0,), with_large=True)
        assert rep.ar_large == 1.0
        assert rep.ar < 1.0


class TestSweep:
    def test_perfect_curve_flat_at_one(self):
        rng = np.random.default_rng(7)
        scenes_d, scenes_g = TestCocoSummary().perfect_scenes(rng, n=4)
        present = tuple(sorted({g.class_id for gts in scenes_g for g in gts}))
        rows = ap_vs_iou_sweep(scenes_d, scenes_g, present)
        for thr, _, ap in rows:
            if thr < 1.0:
                assert ap == 1.0

    def test_curve_non_increasing(self):
        rng = np.random.default_rng(8)
        scenes_d, scenes_g = [], []
        for _ in range(15):
            d, g = random_scene(rng)
            scenes_d.append(d)
            scenes_g.append(g)
        rows = ap_vs_iou_sweep(scenes_d, scenes_g, (0, 1, 2))
        by_class = {}
        for thr, cls, ap in rows:
            by_class.setdefault(cls, []).append((thr, ap))
        for series in by_class.values():
            values = [ap for _, ap in sorted(series)]
            assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))

    def test_hand_computed_values_at_two_thresholds(self):
        # one GT; the detection overlaps with IoU 0.6: TP at 0.5, FP at 0.75
        # (overlap 0.3 x 0.2 = 0.06, union 2 * 0.08 - 0.06 = 0.10)
        gt_box = BoundingBox(0.5, 0.5, 0.4, 0.2)
        shifted = BoundingBox(0.6, 0.5, 0.4, 0.2)
        from setpredict.geometry import iou

        v = iou(gt_box, shifted)
        assert v == pytest.approx(0.6, abs=1e-12)
        dets = [[det(0, 0.9, shifted)]]
        gts = [[GroundTruthObject(0, gt_box)]]
        rows = {(thr, cls): ap for thr, cls, ap in ap_vs_iou_sweep(dets, gts, (0,))}
        assert rows[(0.5, 0)] == 1.0
        assert rows[(0.75, 0)] == 0.0
