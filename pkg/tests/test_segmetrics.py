"""Tests for segmentation metrics."""

import numpy as np
import pytest

from patchlock.core import LabelError, ShapeError
from patchlock.segmetrics import (
    IGNORE_LABEL,
    ConfusionCounts,
    accumulate,
    format_table,
    miou,
    to_key_values,
)


def brute_force_confusion(pred, gt, num_classes):
    """Full confusion matrix, rows ground truth, columns prediction."""
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(pred.ravel(), gt.ravel()):
        if g != IGNORE_LABEL:
            matrix[g, p] += 1
    tp = np.diag(matrix)
    fp = matrix.sum(axis=0) - tp
    fn = matrix.sum(axis=1) - tp
    return tp, fp, fn


def brute_force_miou(tp, fp, fn):
    ious = [t / (t + f + n) for t, f, n in zip(tp, fp, fn) if t + f + n]
    return float(np.mean(ious)) if ious else None


class TestConfusionCounts:
    """Test cases for ConfusionCounts."""

    def test_documented_example(self):
        """Test the four-pixel example."""
        cc = ConfusionCounts(3)
        cc.accumulate(np.array([0, 1, 1, 2]), np.array([0, 1, 2, 2]))
        np.testing.assert_array_equal(cc.tp, [1, 1, 1])
        np.testing.assert_array_equal(cc.fp, [0, 1, 0])
        np.testing.assert_array_equal(cc.fn, [0, 0, 1])
        result = cc.miou()
        np.testing.assert_allclose(result.per_class, [1.0, 0.5, 0.5])
        assert result.miou == pytest.approx(2.0 / 3.0)

    def test_perfect_prediction(self):
        """Test that identical maps give mIoU 1."""
        gt = np.array([[0, 1], [2, 3]])
        assert accumulate(ConfusionCounts(4), gt, gt).miou().miou == 1.0

    def test_ignore_label_skipped(self):
        """Test that ignored pixels count for no class."""
        cc = ConfusionCounts(2)
        cc.accumulate(np.array([0, 1, 1]), np.array([0, 1, IGNORE_LABEL]))
        np.testing.assert_array_equal(cc.tp, [1, 1])
        np.testing.assert_array_equal(cc.fp, [0, 0])
        np.testing.assert_array_equal(cc.fn, [0, 0])

    def test_absent_class_excluded(self):
        """Test that a class seen in neither map is left out of the mean."""
        cc = ConfusionCounts(4)
        cc.accumulate(np.array([0, 0, 1]), np.array([0, 1, 1]))
        result = cc.miou()
        assert result.present_classes() == [0, 1]
        assert np.isnan(result.per_class[2]) and np.isnan(result.per_class[3])
        assert result.miou == pytest.approx(0.5)

    def test_empty_is_undefined(self):
        """Test that no labelled pixel leaves mIoU undefined."""
        cc = ConfusionCounts(3)
        cc.accumulate(np.array([1, 2]), np.array([IGNORE_LABEL, IGNORE_LABEL]))
        assert cc.miou().miou is None
        assert cc.pixel_accuracy() is None

    def test_shape_mismatch(self):
        """Test that maps of different shape are refused."""
        with pytest.raises(ShapeError):
            ConfusionCounts(2).accumulate(np.zeros((2, 2)), np.zeros((2, 3)))

    @pytest.mark.parametrize(
        "pred,gt",
        [([0, 5], [0, 1]), ([0, 1], [0, 4]), ([-1, 0], [0, 0]), ([0, IGNORE_LABEL], [0, 1])],
    )
    def test_label_out_of_range(self, pred, gt):
        """Test that unknown labels are refused."""
        with pytest.raises(LabelError):
            ConfusionCounts(3).accumulate(np.array(pred), np.array(gt))

    def test_ignore_prediction_on_ignored_pixel(self):
        """Test that an ignore prediction is fine where the ground truth is ignored."""
        cc = ConfusionCounts(2)
        cc.accumulate(np.array([IGNORE_LABEL, 1]), np.array([IGNORE_LABEL, 1]))
        assert cc.miou().miou == 1.0

    def test_streaming_equals_batch(self, rng):
        """Test that per-image accumulation equals one big batch."""
        preds = [rng.integers(0, 4, (8, 8)) for _ in range(10)]
        gts = [rng.integers(0, 4, (8, 8)) for _ in range(10)]
        streaming = ConfusionCounts(4)
        for p, g in zip(preds, gts):
            streaming.accumulate(p, g)
        batch = ConfusionCounts(4)
        batch.accumulate(np.stack(preds), np.stack(gts))
        np.testing.assert_array_equal(streaming.tp, batch.tp)
        np.testing.assert_array_equal(streaming.fp, batch.fp)
        np.testing.assert_array_equal(streaming.fn, batch.fn)

    def test_permutation_invariant(self, rng):
        """Test that pixel order does not matter."""
        pred = rng.integers(0, 3, 200)
        gt = rng.integers(0, 3, 200)
        order = rng.permutation(200)
        a = ConfusionCounts(3)
        a.accumulate(pred, gt)
        b = ConfusionCounts(3)
        b.accumulate(pred[order], gt[order])
        assert a.miou().miou == b.miou().miou

    def test_matches_brute_force(self, rng):
        """Test counts and mIoU against a full confusion matrix on random maps."""
        for _ in range(100):
            c = int(rng.integers(2, 6))
            shape = tuple(rng.integers(1, 9, size=2))
            pred = rng.integers(0, c, shape)
            gt = rng.integers(0, c, shape)
            gt[rng.random(shape) < 0.1] = IGNORE_LABEL
            cc = accumulate(ConfusionCounts(c), pred, gt)
            tp, fp, fn = brute_force_confusion(pred, gt, c)
            np.testing.assert_array_equal(cc.tp, tp)
            np.testing.assert_array_equal(cc.fp, fp)
            np.testing.assert_array_equal(cc.fn, fn)
            assert miou(cc).miou == brute_force_miou(tp, fp, fn)

    def test_merge(self, rng):
        """Test that merging two accumulators adds their counts."""
        preds = [rng.integers(0, 3, (4, 4)) for _ in range(2)]
        gts = [rng.integers(0, 3, (4, 4)) for _ in range(2)]
        a, b, both = ConfusionCounts(3), ConfusionCounts(3), ConfusionCounts(3)
        a.accumulate(preds[0], gts[0])
        b.accumulate(preds[1], gts[1])
        both.accumulate(np.stack(preds), np.stack(gts))
        merged = a.merge(b)
        np.testing.assert_array_equal(merged.tp, both.tp)
        np.testing.assert_array_equal(merged.fp, both.fp)
        with pytest.raises(ShapeError):
            a.merge(ConfusionCounts(4))

    def test_pixel_accuracy(self):
        """Test pixel accuracy on the four-pixel example."""
        cc = ConfusionCounts(3)
        cc.accumulate(np.array([0, 1, 1, 2]), np.array([0, 1, 2, 2]))
        assert cc.pixel_accuracy() == pytest.approx(0.75)


class TestReports:
    """Test cases for the text and key-value reports."""

    def test_table(self):
        """Test that the table lists every class and the mean."""
        cc = ConfusionCounts(3)
        cc.accumulate(np.array([0, 1]), np.array([0, 1]))
        text = format_table(cc, ["background", "red", "green"])
        assert "background" in text and "green" in text
        assert "mIoU" in text
        assert text.splitlines()[3].split()[-1] == "-"

    def test_key_values(self):
        """Test machine-readable keys."""
        cc = ConfusionCounts(3)
        cc.accumulate(np.array([0, 1, 1, 2]), np.array([0, 1, 2, 2]))
        values = to_key_values(cc)
        assert set(values) == {"iou.0", "iou.1", "iou.2", "miou", "pixel_accuracy"}
        assert float(values["miou"]) == pytest.approx(2.0 / 3.0)
        assert float(values["iou.0"]) == 1.0
