"""Confusion/mIoU, exact distance transform, trimap curves."""

import numpy as np
import pytest

from oracles import brute_force_boundary_distance

from gun import metrics as M
from gun.errors import MetricUndefinedError, ShapeError


def half_split_maps():
    gt = np.zeros((4, 4), dtype=np.uint8)
    gt[:, 2:] = 1
    pred = np.zeros((4, 4), dtype=np.uint8)
    return pred, gt


class TestConfusion:
    def test_perfect_prediction_is_diagonal(self, rng):
        gt = rng.integers(0, 3, size=(6, 6)).astype(np.uint8)
        conf = M.accumulate_confusion(gt, gt, 3)
        assert conf.counts.sum() == 36
        assert np.trace(conf.counts) == 36

    def test_half_split_counts(self):
        pred, gt = half_split_maps()
        conf = M.accumulate_confusion(pred, gt, 2)
        assert conf.counts[0, 0] == 8 and conf.counts[1, 0] == 8
        assert conf.counts[0, 1] == 0 and conf.counts[1, 1] == 0

    def test_fully_ignored_is_zero(self):
        gt = np.full((4, 4), 255, dtype=np.uint8)
        conf = M.accumulate_confusion(np.zeros((4, 4), np.uint8), gt, 3)
        assert conf.counts.sum() == 0

    def test_mask_restricts_counting(self):
        pred, gt = half_split_maps()
        mask = np.zeros((4, 4), dtype=bool)
        mask[:, 0] = True
        conf = M.accumulate_confusion(pred, gt, 2, mask=mask)
        assert conf.counts.sum() == 4

    def test_pred_out_of_range_rejected(self):
        gt = np.zeros((2, 2), dtype=np.uint8)
        pred = np.full((2, 2), 9, dtype=np.uint8)
        with pytest.raises(ShapeError, match="pred"):
            M.accumulate_confusion(pred, gt, 3)

    def test_accumulation_across_images(self):
        pred, gt = half_split_maps()
        conf = M.accumulate_confusion(pred, gt, 2)
        conf = M.accumulate_confusion(pred, gt, 2, conf=conf)
        assert conf.counts[0, 0] == 16


class TestMeanIou:
    def test_diagonal_gives_one(self):
        conf = M.ConfusionMatrix(3)
        conf.counts[np.diag_indices(3)] = [5, 7, 2]
        per_class, miou = M.mean_iou(conf)
        np.testing.assert_allclose(per_class, 1.0)
        assert miou == 1.0

    def test_half_split_value(self):
        pred, gt = half_split_maps()
        per_class, miou = M.mean_iou(M.accumulate_confusion(pred, gt, 2))
        assert per_class[0] == pytest.approx(0.5)
        assert per_class[1] == pytest.approx(0.0)
        assert miou == pytest.approx(0.25)

    def test_absent_classes_excluded(self):
        gt = np.zeros((3, 3), dtype=np.uint8)
        per_class, miou = M.mean_iou(M.accumulate_confusion(gt, gt, 4))
        assert miou == 1.0
        assert np.isnan(per_class[1:]).all()

    def test_all_excluded_signaled(self):
        with pytest.raises(MetricUndefinedError):
            M.mean_iou(M.ConfusionMatrix(3))

    def test_relabel_invariance(self, rng):
        gt = rng.integers(0, 4, size=(8, 8)).astype(np.uint8)
        pred = rng.integers(0, 4, size=(8, 8)).astype(np.uint8)
        _, miou = M.mean_iou(M.accumulate_confusion(pred, gt, 4))
        perm = np.array([2, 3, 1, 0], dtype=np.uint8)
        _, miou_p = M.mean_iou(M.accumulate_confusion(perm[pred], perm[gt], 4))
        assert miou_p == pytest.approx(miou, rel=1e-12)


class TestBoundaryDistance:
    def test_half_split_hand_measured(self):
        _, gt = half_split_maps()
        dmap = M.boundary_distance_map(gt)
        expect = np.tile([2.0, 1.0, 1.0, 2.0], (4, 1))
        np.testing.assert_allclose(dmap.values, expect)

    def test_checkerboard_all_ones(self):
        gt = (np.indices((6, 6)).sum(axis=0) % 2).astype(np.uint8)
        dmap = M.boundary_distance_map(gt)
        np.testing.assert_allclose(dmap.values, 1.0)

    def test_uniform_map_flagged_infinite(self):
        gt = np.full((5, 5), 3, dtype=np.uint8)
        dmap = M.boundary_distance_map(gt)
        assert not dmap.has_boundaries
        assert np.isinf(dmap.values).all()

    def test_ignore_pixels_transparent(self):
        gt = np.zeros((1, 5), dtype=np.uint8)
        gt[0, 2] = 255
        gt[0, 3:] = 1
        dmap = M.boundary_distance_map(gt)
        # the ignore pixel is not a target: distance skips over it
        np.testing.assert_allclose(dmap.values[0], [3, 2, np.inf, 2, 3])

    def test_matches_brute_force_on_random_maps(self, rng):
        for _ in range(20):
            gt = rng.integers(0, 4, size=(12, 12)).astype(np.uint8)
            gt[rng.random((12, 12)) < 0.1] = 255
            dmap = M.boundary_distance_map(gt)
            brute = brute_force_boundary_distance(gt)
            evaluated = gt != 255
            np.testing.assert_array_equal(dmap.values[evaluated], brute[evaluated])


class TestTrimapCurve:
    def test_perfect_prediction_all_radii(self, rng):
        gt = rng.integers(0, 3, size=(8, 8)).astype(np.uint8)
        curve = M.trimap_miou_curve(gt, gt, [1, 2, 4], 3)
        assert all(pt.miou == 1.0 for pt in curve.points)

    def test_half_split_band_at_radius_one(self):
        pred, gt = half_split_maps()
        curve = M.trimap_miou_curve(pred, gt, [1.0], 2)
        pt = curve.points[0]
        assert pt.evaluated_pixels == 8  # the two middle columns
        assert pt.miou == pytest.approx(0.25)

    def test_huge_radius_equals_global(self, rng):
        gt = rng.integers(0, 3, size=(10, 10)).astype(np.uint8)
        pred = rng.integers(0, 3, size=(10, 10)).astype(np.uint8)
        _, global_miou = M.mean_iou(M.accumulate_confusion(pred, gt, 3))
        curve = M.trimap_miou_curve(pred, gt, [1.0, 200.0], 3)
        assert curve.points[-1].miou == global_miou

    def test_bands_nested_counts_non_decreasing(self, rng):
        gt = rng.integers(0, 4, size=(16, 16)).astype(np.uint8)
        pred = rng.integers(0, 4, size=(16, 16)).astype(np.uint8)
        curve = M.trimap_miou_curve(pred, gt, [1, 2, 3, 5, 8], 4)
        counts = [pt.evaluated_pixels for pt in curve.points]
        assert counts == sorted(counts)

    def test_empty_band_flagged_and_skipped(self):
        gt = np.full((4, 4), 1, dtype=np.uint8)  # uniform: every band empty
        curve = M.trimap_miou_curve(gt, gt, [1.0, 2.0], 3)
        assert curve.points == []
        assert curve.skipped_radii == [1.0, 2.0]

    def test_radii_validation(self):
        pred, gt = half_split_maps()
        with pytest.raises(ShapeError, match="increasing"):
            M.trimap_miou_curve(pred, gt, [2.0, 1.0], 2)
        with pytest.raises(ShapeError, match="positive"):
            M.trimap_miou_curve(pred, gt, [-1.0], 2)

    def test_dataset_accumulation_matches_single(self, rng):
        gt = rng.integers(0, 3, size=(8, 8)).astype(np.uint8)
        pred = rng.integers(0, 3, size=(8, 8)).astype(np.uint8)
        single = M.trimap_miou_curve(pred, gt, [1, 2], 3)
        double = M.trimap_curve_dataset([pred, pred], [gt, gt], [1, 2], 3)
        for a, b in zip(single.points, double.points):
            assert b.evaluated_pixels == 2 * a.evaluated_pixels
            assert b.miou == pytest.approx(a.miou)
