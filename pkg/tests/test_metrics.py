import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyspect import (
    AreaSeries,
    ConfusionCounts,
    LabeledDetection,
    Region,
    area_ratio_iou,
    area_table,
    detection_confusion,
    reference_area,
    roi_percentage,
    scores,
    size_category_counts,
)
from conftest import PRINTED_IOU_ROW, ROI_ANCHORS


def fake_region(area, rid=1):
    return Region(
        id=rid,
        area_px=area,
        centroid=(0.0, 0.0),
        bbox=(0, 0, 1, 1),
        minor_axis_px=1.0,
        major_axis_px=1.0,
        pixel_list=np.zeros((0, 2), dtype=np.int64),
    )


def series_by_name(series):
    return {s.particle_name: s for s in series}


class TestReferenceArea:
    def test_median_even_list(self):
        assert reference_area([1, 2, 3, 4]) == 2.5

    def test_median_is_order_statistic_mean(self, area_series):
        eps = series_by_name(area_series)["EPS"]
        assert reference_area(eps.condition_areas_px, "median") == 35477.5

    def test_first_quartile_interpolation(self, area_series):
        abs_ = series_by_name(area_series)["ABS"]
        assert reference_area(abs_.condition_areas_px, "first_quartile") == 94457.25
        pvc = series_by_name(area_series)["PVC"]
        assert reference_area(pvc.condition_areas_px, "first_quartile") == 67413.5

    def test_first_quartile_hand_example(self):
        # n=5: rank position (5+1)/4 = 1.5 -> halfway between 10 and 20
        assert reference_area([50, 10, 40, 20, 30], "first_quartile") == 15.0

    def test_all_equal_list(self):
        assert reference_area([7.0] * 9, "median") == 7.0
        assert reference_area([7.0] * 9, "first_quartile") == 7.0

    def test_single_element(self):
        assert reference_area([3.0], "median") == 3.0
        assert reference_area([3.0], "first_quartile") == 3.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            reference_area([], "median")

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            reference_area([1.0], "mode")

    @given(st.lists(st.floats(1.0, 1e6), min_size=1, max_size=40), st.integers(0, 10_000))
    @settings(max_examples=80)
    def test_permutation_invariant_and_bounded(self, areas, seed):
        rng = np.random.default_rng(seed)
        shuffled = list(areas)
        rng.shuffle(shuffled)
        for method in ("median", "first_quartile"):
            a = reference_area(areas, method)
            assert a == reference_area(shuffled, method)
            assert min(areas) <= a <= max(areas)


class TestAreaRatioIoU:
    def test_fixture_anchors(self, area_series):
        by = series_by_name(area_series)
        assert by["PP"].iou() == pytest.approx(0.999, abs=5e-4)
        assert by["EPS"].iou() == pytest.approx(0.467, abs=5e-4)

    def test_equal_areas(self):
        assert area_ratio_iou(123.0, 123.0) == 1.0

    def test_symmetry(self):
        assert area_ratio_iou(10.0, 25.0) == area_ratio_iou(25.0, 10.0)

    @given(st.floats(1.0, 1e9), st.floats(1.0, 1e9))
    @settings(max_examples=100)
    def test_range_and_equality_condition(self, a, b):
        v = area_ratio_iou(a, b)
        assert 0.0 < v <= 1.0
        assert (v == 1.0) == (a == b)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            area_ratio_iou(0.0, 1.0)


class TestRoiPercentage:
    def test_fixture_anchors(self, area_series):
        by = series_by_name(area_series)
        for name, expected in ROI_ANCHORS.items():
            assert by[name].roi_percentage() == pytest.approx(expected, abs=0.2)

    def test_simple_values(self):
        assert roi_percentage(50.0, 200.0) == 25.0

    def test_rejects_nonpositive_reference(self):
        with pytest.raises(ValueError):
            roi_percentage(1.0, 0.0)


class TestDetectionConfusion:
    def det(self, rid, x, y, label):
        return LabeledDetection(id=rid, centroid=(x, y), label=label)

    def test_identical_sets_all_true_positive(self):
        truth = [self.det(i, i * 100.0, 0.0, "PP") for i in range(5)]
        counts = detection_confusion(truth, truth)
        assert counts == ConfusionCounts(tp=5, fp=0, tn=0, fn=0)

    def test_one_mislabel_among_ten(self):
        # ten particles detected, nine labeled right, one analog mislabeled;
        # three quenched non-particles in the truth go undetected on purpose
        names = ["PP", "HDPE", "LDPE", "EPS", "PS", "ABS", "PC", "PVC", "PET", "PA"]
        truth = [self.det(i, i * 100.0, 0.0, n) for i, n in enumerate(names)]
        truth += [self.det(90 + j, j * 100.0, 900.0, "NOM") for j in range(3)]
        predicted = [self.det(i, i * 100.0 + 2.0, 1.0, n) for i, n in enumerate(names)]
        predicted[3] = self.det(3, 302.0, 1.0, "PS")  # EPS called PS
        counts = detection_confusion(predicted, truth)
        assert counts == ConfusionCounts(tp=9, fp=1, tn=0, fn=0)

    def test_empty_predictions(self):
        truth = [self.det(i, i * 50.0, 0.0, "PP") for i in range(3)]
        assert detection_confusion([], truth) == ConfusionCounts(fn=3)

    def test_matching_respects_radius(self):
        truth = [self.det(1, 0.0, 0.0, "PP")]
        predicted = [self.det(1, 80.0, 0.0, "PP")]
        counts = detection_confusion(predicted, truth, match_radius_px=50.0)
        assert counts == ConfusionCounts(fp=1, fn=1)

    def test_non_particle_detection_is_true_negative(self):
        truth = [self.det(1, 0.0, 0.0, "NOM")]
        predicted = [self.det(1, 1.0, 0.0, "NOM")]
        assert detection_confusion(predicted, truth) == ConfusionCounts(tn=1)

    def test_greedy_matching_is_nearest_first(self):
        truth = [self.det(1, 0.0, 0.0, "A"), self.det(2, 10.0, 0.0, "B")]
        predicted = [self.det(1, 9.0, 0.0, "B"), self.det(2, 2.0, 0.0, "A")]
        # pred2-truth1 (2px) and pred1-truth2 (1px) are the nearest pairs
        counts = detection_confusion(predicted, truth, match_radius_px=50.0)
        assert counts == ConfusionCounts(tp=2)


class TestScores:
    def test_reported_score_set(self):
        s = scores(ConfusionCounts(tp=9, fp=1, fn=0, tn=0))
        assert s.precision == pytest.approx(0.900, abs=1e-3)
        assert s.recall == pytest.approx(1.000, abs=1e-3)
        assert s.accuracy == pytest.approx(0.900, abs=1e-3)
        assert s.f1 == pytest.approx(0.947, abs=1e-3)
        assert s.iou == pytest.approx(0.900, abs=1e-3)

    def test_undefined_scores_are_none_not_zero(self):
        s = scores(ConfusionCounts(tp=0, fp=0, fn=5, tn=0))
        assert s.recall == 0.0
        assert s.precision is None
        assert s.f1 is None

    def test_symmetric_counts(self):
        s = scores(ConfusionCounts(tp=1, fp=1, fn=1, tn=1))
        assert s.accuracy == 0.5
        assert s.precision == 0.5
        assert s.recall == 0.5
        assert s.f1 == 0.5

    def test_f1_zero_iff_tp_zero(self):
        s = scores(ConfusionCounts(tp=0, fp=3, fn=2, tn=0))
        assert s.f1 == 0.0

    @given(
        tp=st.integers(0, 50), fp=st.integers(0, 50),
        tn=st.integers(0, 50), fn=st.integers(0, 50),
    )
    @settings(max_examples=200)
    def test_score_bounds(self, tp, fp, tn, fn):
        s = scores(ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn))
        for v in (s.iou, s.accuracy, s.precision, s.recall, s.f1):
            assert v is None or 0.0 <= v <= 1.0
        if s.f1 is not None:
            assert (s.f1 == 0.0) == (tp == 0)
        if s.precision and s.recall:
            assert min(s.precision, s.recall) - 1e-12 <= s.f1
            assert s.f1 <= max(s.precision, s.recall) + 1e-12

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            ConfusionCounts(tp=-1)


class TestSizeCategoryCounts:
    def test_documented_example(self):
        regions = [fake_region(a, i) for i, a in enumerate([5, 15, 60, 120])]
        assert size_category_counts(regions, [10, 50, 100]) == {10: 3, 50: 2, 100: 1}

    def test_empty_regions(self):
        assert size_category_counts([], [10, 50, 100]) == {10: 0, 50: 0, 100: 0}

    def test_threshold_validation(self):
        with pytest.raises(ValueError, match="ascending"):
            size_category_counts([], [50, 10])
        with pytest.raises(ValueError, match="positive"):
            size_category_counts([], [0, 10])

    def test_synthetic_tally(self):
        rng = np.random.default_rng(2)
        areas = rng.integers(1, 300, size=200)
        regions = [fake_region(int(a), i) for i, a in enumerate(areas)]
        got = size_category_counts(regions, [10, 50, 100])
        for t in (10, 50, 100):
            assert got[t] == int((areas >= t).sum())


class TestAreaTable:
    def test_full_fixture_matches_printed_row(self, area_series):
        rows, mean_iou = area_table(area_series)
        for row in rows:
            assert row.iou == pytest.approx(PRINTED_IOU_ROW[row.particle_name], abs=0.01)
        assert mean_iou == pytest.approx(0.879, abs=0.010)
        ious = {r.particle_name: r.iou for r in rows}
        assert min(ious, key=ious.get) == "EPS"
        assert max(ious, key=ious.get) == "PP"

    def test_series_validation(self):
        with pytest.raises(ValueError, match="positive"):
            AreaSeries("X", 0.0, (1.0, 2.0))
        with pytest.raises(ValueError, match="empty"):
            AreaSeries("X", 1.0, ())
        with pytest.raises(ValueError, match="unknown reference method"):
            AreaSeries("X", 1.0, (1.0,), reference_method="mean")
