import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatcascade.evaluation import (
    HUMAN_LABEL_SIGMA_REFERENCE,
    SIGMA_TABLE_JOINTS,
    annotation_sigma,
    annotation_sigma_table,
    error_histogram,
    evaluate,
    format_sigma_table,
    pck,
    pckh,
)


def count_oracle(preds, truths, norms, t, valid=None):
    """Enumerate every (sample, joint) and count detections per joint."""
    S, N, _ = preds.shape
    rates = []
    for j in range(N):
        hit = tot = 0
        for s in range(S):
            if valid is not None and not valid[s][j]:
                continue
            dx = preds[s, j, 0] - truths[s, j, 0]
            dy = preds[s, j, 1] - truths[s, j, 1]
            tot += 1
            if (dx * dx + dy * dy) ** 0.5 <= t * norms[s]:
                hit += 1
        rates.append(hit / tot if tot else 0.0)
    return np.array(rates)


class TestPCK:
    def test_perfect_prediction(self):
        truths = np.random.default_rng(0).uniform(0, 60, size=(4, 3, 2))
        curve = pck(truths, truths, np.full(4, 20.0), [0.01, 0.05, 0.2])
        np.testing.assert_array_equal(curve.per_joint, 1.0)

    def test_inclusive_boundary(self):
        truths = np.zeros((1, 1, 2))
        preds = np.array([[[3.0, 4.0]]])  # distance 5
        curve = pck(preds, truths, [100.0], [0.04, 0.05])
        np.testing.assert_array_equal(curve.per_joint[:, 0], [0.0, 1.0])

    def test_five_predictions_oracle(self):
        truths = np.array([[[10.0, 10.0]], [[20.0, 5.0]], [[0.0, 0.0]], [[7.0, 7.0]], [[30.0, 30.0]]])
        preds = truths + np.array([[[1.0, 0.0]], [[0.0, -3.0]], [[2.0, 2.0]], [[0.0, 0.0]], [[-6.0, 8.0]]])
        norms = np.array([20.0, 30.0, 25.0, 10.0, 40.0])
        ts = [0.025, 0.05, 0.1, 0.15, 0.2, 0.25]
        curve = pck(preds, truths, norms, ts)
        for i, t in enumerate(ts):
            np.testing.assert_array_equal(curve.per_joint[i], count_oracle(preds, truths, norms, t))
        # error/normalizer: 0.05, 0.1, 0.113, 0, 0.25
        np.testing.assert_array_equal(curve.per_joint[:, 0], [0.2, 0.4, 0.6, 0.8, 0.8, 1.0])

    def test_missing_truth_excluded(self):
        truths = np.array([[[1.0, 1.0], [5.0, 5.0]], [[np.nan, np.nan], [5.0, 5.0]], [[3.0, 3.0], [5.0, 5.0]]])
        preds = np.array([[[1.0, 1.0], [5.0, 5.0]], [[0.0, 0.0], [50.0, 5.0]], [[30.0, 3.0], [5.0, 5.0]]])
        valid = np.array([[True, True], [True, True], [True, False]])
        curve = pck(preds, truths, np.ones(3), [0.5], valid)
        np.testing.assert_array_equal(curve.counts, [2, 2])
        np.testing.assert_array_equal(curve.excluded, [1, 1])
        np.testing.assert_array_equal(curve.per_joint[0], [0.5, 0.5])

    def test_nonpositive_normalizer(self):
        with pytest.raises(ValueError):
            pck(np.zeros((2, 1, 2)), np.zeros((2, 1, 2)), [1.0, 0.0], [0.1])

    def test_mean_over_joints(self):
        truths = np.zeros((2, 2, 2))
        preds = np.array([[[0.0, 0.0], [9.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]])
        curve = pck(preds, truths, np.ones(2) * 10, [0.5])
        np.testing.assert_array_equal(curve.mean, [0.75])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
    def test_rescale_invariance_and_monotone(self, seed, k):
        rng = np.random.default_rng(seed)
        truths = rng.uniform(0, 64, size=(10, 3, 2))
        preds = truths + rng.normal(scale=4.0, size=truths.shape)
        norms = rng.uniform(10, 30, size=10)
        ts = np.linspace(0.0, 0.5, 11)
        a = pck(preds, truths, norms, ts)
        b = pck(preds * k, truths * k, norms * k, ts)
        assert np.all(np.diff(a.per_joint, axis=0) >= 0)
        assert np.all((a.per_joint >= 0) & (a.per_joint <= 1))
        # rescaling can move a boundary case by one ulp; allow one flip per joint
        assert np.all(np.abs(a.per_joint - b.per_joint) <= 1 / 10 + 1e-12)
        np.testing.assert_array_equal(pck(preds * 4, truths * 4, norms * 4, ts).per_joint, a.per_joint)


class TestPCKh:
    def test_identical(self):
        t = np.random.default_rng(0).uniform(size=(3, 4, 2))
        np.testing.assert_array_equal(pckh(t, t, np.ones(3)), 1.0)

    def test_off_by_point_six(self):
        t = np.zeros((3, 2, 2))
        p = t + np.array([0.6 * 10, 0.0])
        np.testing.assert_array_equal(pckh(p, t, np.full(3, 10.0)), 0.0)

    def test_mixed_oracle(self):
        rng = np.random.default_rng(3)
        t = rng.uniform(0, 50, size=(8, 2, 2))
        head = rng.uniform(5, 15, size=8)
        p = t + rng.normal(scale=5.0, size=t.shape)
        np.testing.assert_array_equal(pckh(p, t, head), count_oracle(p, t, head, 0.5))


class TestErrorHistogram:
    def test_zero_errors_spike(self):
        p = np.random.default_rng(0).uniform(size=(20, 2))
        h = error_histogram(p, p)
        assert h.sigma == 0.0
        assert h.counts[h.bin_centers == 0][0] == 20
        assert h.counts.sum() == 20

    def test_population_sigma(self):
        truths = np.zeros((3, 2))
        preds = np.array([[-2.0, 0.0], [0.0, 0.0], [2.0, 0.0]])
        h = error_histogram(preds, truths)
        assert h.sigma == pytest.approx(np.sqrt(8 / 3), abs=1e-12)
        assert round(h.sigma, 3) == 1.633

    def test_outlier_cut(self):
        truths = np.zeros((3, 2))
        preds = np.array([[25.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        h = error_histogram(preds, truths)
        assert h.outliers == 1 and h.included == 2
        assert h.sigma == pytest.approx(1.0)

    def test_cut_inclusive(self):
        h = error_histogram(np.array([[20.0, 0.0], [-20.0, 0.0]]), np.zeros((2, 2)))
        assert h.outliers == 0

    def test_y_axis_and_bin_width(self):
        truths = np.zeros((4, 2))
        preds = np.array([[0.0, 1.2], [0.0, 3.9], [0.0, -4.1], [0.0, 0.4]])
        h = error_histogram(preds, truths, axis=1, bin_width=2.0)
        assert dict(zip(h.bin_centers, h.counts))[2.0] == 1
        assert dict(zip(h.bin_centers, h.counts))[4.0] == 1
        assert dict(zip(h.bin_centers, h.counts))[-4.0] == 1
        assert dict(zip(h.bin_centers, h.counts))[0.0] == 1

    def test_bad_bin_width(self):
        with pytest.raises(ValueError):
            error_histogram(np.zeros((1, 2)), np.zeros((1, 2)), bin_width=0.0)

    @pytest.mark.parametrize("cut", [np.inf, np.nan, -1.0])
    def test_bad_outlier_cut(self, cut):
        with pytest.raises(ValueError):
            error_histogram(np.zeros((1, 2)), np.zeros((1, 2)), outlier_cut=cut)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_partition(self, seed):
        rng = np.random.default_rng(seed)
        e = rng.normal(scale=15.0, size=(50, 2))
        h = error_histogram(e, np.zeros_like(e))
        assert h.included + h.outliers == 50 == h.total
        assert h.counts.sum() == h.included


class TestAnnotationSigma:
    def test_agreement_zero(self):
        assert annotation_sigma([[5.0, 5.0, 5.0], [1.0, 1.0]]) == 0.0

    def test_hand_value(self):
        got = annotation_sigma([[10.0, 12.0, 14.0]], downsample_ratio=2.0)
        assert got == pytest.approx(np.sqrt(8 / 3) / 2, abs=1e-12)
        assert round(got, 3) == 0.816

    def test_average_over_images(self):
        got = annotation_sigma([[0.0, 2.0], [0.0, 4.0]])
        assert got == pytest.approx((1.0 + 2.0) / 2)

    def test_needs_two_annotators(self):
        with pytest.raises(ValueError):
            annotation_sigma([[1.0, 2.0], [3.0]])
        with pytest.raises(ValueError):
            annotation_sigma([])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=13), st.floats(-1000, 1000))
    def test_translation_invariant(self, ann, c):
        a = annotation_sigma([ann])
        b = annotation_sigma([[v + c for v in ann]])
        assert b == pytest.approx(a, abs=1e-9)

    def test_table_format(self):
        rng = np.random.default_rng(0)
        ann = {j: rng.normal(100, 2, size=(10, 13)).tolist() for j in SIGMA_TABLE_JOINTS}
        ours = annotation_sigma_table(ann, 2.0)
        text = format_sigma_table({"Label Noise": HUMAN_LABEL_SIGMA_REFERENCE, "synthetic": ours})
        rows = list(csv.reader(text.splitlines()))
        assert rows[0] == ["source", "Face", "Shoulder", "Elbow", "Wrist"]
        assert rows[1] == ["Label Noise", "0.65", "2.46", "2.14", "1.57"]
        assert len(rows) == 3


class TestReport:
    def test_write_files(self, tmp_path):
        rng = np.random.default_rng(0)
        truths = rng.uniform(0, 64, size=(20, 3, 2))
        preds = truths + rng.normal(scale=3, size=truths.shape)
        valid = np.ones((20, 3), bool)
        valid[0, 1] = False
        rep = evaluate(preds, truths, valid, np.full(20, 25.0), ["a", "b", "c"], label="x")
        paths = rep.write(tmp_path, "coarse_")
        assert [p.name for p in paths] == ["coarse_pck.csv", "coarse_hist_x.csv", "coarse_summary.json"]
        rows = list(csv.reader(paths[0].open()))
        assert rows[0] == ["threshold", "a", "b", "c", "mean"]
        assert len(rows) == 1 + len(rep.curve.thresholds)
        summary = json.loads(paths[2].read_text())
        assert summary["samples"] == {"a": 20, "b": 19, "c": 20}
        for name, h in rep.histograms.items():
            assert h.counts.sum() + h.outliers == summary["samples"][name]

    def test_write_deterministic(self, tmp_path):
        rng = np.random.default_rng(1)
        truths = rng.uniform(0, 64, size=(10, 2, 2))
        preds = truths + rng.normal(size=truths.shape)
        rep = evaluate(preds, truths, np.ones((10, 2), bool), np.full(10, 20.0), ["a", "b"])
        a = [p.read_bytes() for p in rep.write(tmp_path / "a")]
        b = [p.read_bytes() for p in rep.write(tmp_path / "b")]
        assert a == b
