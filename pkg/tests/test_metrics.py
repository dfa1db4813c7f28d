import math
from dataclasses import replace

import numpy as np
import pytest

from tools.errors import EmptyMaskError, NumericError, ShapeError
from tools.metrics import (
    TABLE_COLUMNS,
    MetricReport,
    aggregate,
    compute_metrics,
    depth_to_disparity,
    disparity_to_depth,
    end_point_error,
    format_table,
)
from tools.synth_scenes import CameraRig


def create_report(value, count):
    return MetricReport(
        absrel=value,
        sqrel=value,
        rmse=value,
        logrmse=value,
        delta1=value,
        delta2=value,
        delta3=value,
        valid_pixel_count=count,
    )


def naive_metrics(pred, gt):
    """Per-pixel loop over the same definitions."""
    n = 0
    sums = dict.fromkeys(("abs", "sq", "sq_diff", "log", "d1", "d2", "d3"), 0.0)
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        n += 1
        sums["abs"] += abs(p - g) / g
        sums["sq"] += (p - g) ** 2 / g
        sums["sq_diff"] += (p - g) ** 2
        sums["log"] += (math.log(p) - math.log(g)) ** 2
        ratio = max(p / g, g / p)
        sums["d1"] += ratio < 1.25
        sums["d2"] += ratio < 1.25**2
        sums["d3"] += ratio < 1.25**3
    return {
        "absrel": sums["abs"] / n,
        "sqrel": sums["sq"] / n,
        "rmse": math.sqrt(sums["sq_diff"] / n),
        "logrmse": math.sqrt(sums["log"] / n),
        "delta1": sums["d1"] / n,
        "delta2": sums["d2"] / n,
        "delta3": sums["d3"] / n,
    }


class TestComputeMetrics:
    def test_uniform_scale_error(self):
        gt = np.full((4, 5), 2.0)

        report = compute_metrics(1.3 * gt, gt)

        assert report.absrel == pytest.approx(0.3, abs=1e-6)
        assert report.sqrel == pytest.approx(0.18, abs=1e-6)
        assert report.rmse == pytest.approx(0.6, abs=1e-6)
        assert report.logrmse == pytest.approx(0.262364, abs=1e-6)
        assert report.delta1 == 0.0
        assert report.delta2 == 1.0
        assert report.delta3 == 1.0
        assert report.valid_pixel_count == 20

    def test_perfect_prediction(self, rng):
        gt = rng.uniform(1.0, 10.0, size=(6, 6))

        report = compute_metrics(gt, gt)

        assert report.absrel == report.rmse == report.logrmse == 0.0
        assert report.delta1 == 1.0

    def test_matches_per_pixel_loop(self, rng):
        gt = rng.uniform(0.5, 20.0, size=(9, 13))
        pred = gt * rng.uniform(0.5, 2.0, size=gt.shape)

        report = compute_metrics(pred, gt).to_dict()

        for name, value in naive_metrics(pred, gt).items():
            assert report[name] == pytest.approx(value, abs=1e-10), name

    def test_delta_thresholds_nest_and_are_symmetric(self, rng):
        for _ in range(10):
            gt = rng.uniform(0.5, 20.0, size=(8, 8))
            pred = gt * np.exp(rng.normal(scale=0.4, size=gt.shape))

            forward = compute_metrics(pred, gt)
            backward = compute_metrics(gt, pred)

            assert forward.delta1 <= forward.delta2 <= forward.delta3
            assert (forward.delta1, forward.delta2, forward.delta3) == (
                backward.delta1,
                backward.delta2,
                backward.delta3,
            )

    def test_rmse_zero_only_for_equal_maps(self, rng):
        gt = rng.uniform(1.0, 10.0, size=(5, 5))
        pred = gt.copy()
        pred[2, 3] += 1e-6

        assert compute_metrics(gt.copy(), gt).rmse == 0.0
        assert compute_metrics(pred, gt).rmse > 0.0

    def test_mask_restricts_pixels(self):
        gt = np.array([[2.0, 2.0]])
        pred = np.array([[2.0, 100.0]])

        report = compute_metrics(pred, gt, mask=np.array([[True, False]]))

        assert report.absrel == 0.0
        assert report.valid_pixel_count == 1

    def test_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            compute_metrics(np.ones((2, 2)), np.ones((2, 2)), mask=np.zeros((2, 2), dtype=bool))

    def test_non_positive_depth(self):
        with pytest.raises(NumericError):
            compute_metrics(np.array([[0.0, 1.0]]), np.ones((1, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            compute_metrics(np.ones((2, 2)), np.ones((2, 3)))


class TestAggregate:
    def test_pixel_weighted_mean(self):
        report = aggregate([create_report(1.0, 1), create_report(4.0, 3)])

        assert report.absrel == pytest.approx(3.25)
        assert report.valid_pixel_count == 4

    def test_single_report_passes_through(self):
        single = create_report(0.5, 7)

        assert aggregate([single]) == single

    def test_identical_reports(self, rng):
        gt = rng.uniform(1.0, 10.0, size=(6, 6))
        report = compute_metrics(1.1 * gt, gt)

        pooled = aggregate([report, report])

        assert pooled.valid_pixel_count == 2 * report.valid_pixel_count
        assert replace(pooled, valid_pixel_count=report.valid_pixel_count) == report

    def test_empty(self):
        with pytest.raises(EmptyMaskError):
            aggregate([])

    def test_table_columns(self):
        table = format_table([("scene_0000", create_report(0.25, 10)), ("mean", create_report(0.5, 20))])
        header, rule, first, second = table.splitlines()

        for title, _ in TABLE_COLUMNS:
            assert title in header
        assert header.index("Rel") < header.index("SqRel") < header.index("RMSE") < header.index("Log RMSE")
        assert set(rule) == {"-"}
        assert first.startswith("scene_0000") and first.count("0.2500") == 7
        assert second.split()[1:] == ["0.5000"] * 7


class TestDisparityDepth:
    def test_conversion(self):
        rig = CameraRig(focal_px=400.0, baseline_m=0.5)

        depth, valid = disparity_to_depth(np.array([[100.0, 0.0, -1.0]]), rig)

        np.testing.assert_array_equal(depth, [[2.0, 0.0, 0.0]])
        np.testing.assert_array_equal(valid, [[True, False, False]])

    def test_inverse(self, rng):
        rig = CameraRig(baseline_m=0.2)
        disparity = rng.uniform(1.0, 150.0, size=(3, 4))

        depth, _ = disparity_to_depth(disparity, rig)
        back, valid = depth_to_disparity(depth, rig)

        assert valid.all()
        np.testing.assert_allclose(back, disparity, rtol=1e-12)


class TestEndPointError:
    def test_epe(self):
        gt = np.zeros((1, 4))
        pred = np.array([[0.0, 0.25, 0.5, 2.0]])

        report = end_point_error(pred, gt)

        assert report.epe == pytest.approx(0.6875)
        assert report.within_threshold == 0.75
        assert report.valid_pixel_count == 4

    def test_masked(self):
        report = end_point_error(np.array([[3.0, 0.0]]), np.zeros((1, 2)), mask=np.array([[False, True]]))

        assert report.epe == 0.0
        assert report.within_threshold == 1.0
