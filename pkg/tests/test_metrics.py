"""Metric oracles; the fixture tables live in metric_fixtures."""
import math

import numpy as np
import pytest

from cfrnet.metrics import (
    FPPI_GRID,
    EvalReport,
    average_precision,
    binarize_logits,
    detections_csv,
    dice_score,
    log_average_miss_rate,
    marginal_costs,
    mean_average_precision,
    miss_rate_curve,
    reasonable_min_height,
    recall_at_fppi,
    TimingStats,
    write_pgm,
)
from metric_fixtures import (
    AP_FIXTURES,
    DICE_FIXTURES,
    LAMR_FIXTURES,
    A,
    B,
    MISS,
    lamr_case_four_images,
    det,
    gt_of,
)


# ---------------------------------------------------------------------------
# dice


@pytest.mark.parametrize("a,b,expected", DICE_FIXTURES)
def test_dice_fixtures(a, b, expected):
    assert dice_score(a, b) == pytest.approx(expected, abs=1e-12)
    assert dice_score(b, a) == pytest.approx(expected, abs=1e-12)


def test_dice_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        dice_score(np.zeros((2, 2)), np.zeros((2, 3)))


def test_dice_one_iff_identical():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.random((5, 5)) > 0.5
        b = a.copy()
        assert dice_score(a, b) == 1.0
        b[rng.integers(5), rng.integers(5)] ^= True
        if a.any() or b.any():
            assert dice_score(a, b) < 1.0


def test_binarize_at_probability_half():
    assert binarize_logits(np.array([-1e-9, 0.0, 2.0])).tolist() == [False, True, True]


# ---------------------------------------------------------------------------
# average precision


@pytest.mark.parametrize("dets,gts,expected", AP_FIXTURES)
def test_ap_fixtures(dets, gts, expected):
    assert average_precision(dets, gts, label=0) == pytest.approx(expected, abs=1e-12)


def test_ap_iou_exactly_half_is_a_match():
    gt = gt_of([(0, 0, 10, 20)])
    d = det((0, 0, 10, 10), 0.9)     # area 100 inside gt area 200 -> IoU 0.5
    assert average_precision([[d]], [gt], iou_threshold=0.5) == 1.0
    assert average_precision([[d]], [gt], iou_threshold=0.51) == 0.0


def test_ap_without_gt_is_nan_and_excluded_from_map():
    gts = [gt_of([A], labels=[0])]
    dets = [[det(A, 0.9, 0), det(B, 0.8, 1)]]
    assert math.isnan(average_precision(dets, gts, label=1))
    m, per_class = mean_average_precision(dets, gts, num_classes=2)
    assert per_class == {0: 1.0}
    assert m == 1.0


def test_ap_ignores_removal_of_trailing_duplicates():
    gts = [gt_of([A, B])]
    base = [det(A, 0.9), det(B, 0.8)]
    assert average_precision([base + [det(A, 0.1), det(B, 0.05)]], gts) == average_precision([base], gts)


def test_map_averages_classes():
    gts = [gt_of([A, B], labels=[0, 1])]
    dets = [[det(A, 0.9, 0), det(MISS, 0.95, 1), det(B, 0.5, 1)]]
    m, per_class = mean_average_precision(dets, gts, num_classes=2)
    assert per_class[0] == 1.0 and per_class[1] == pytest.approx(0.5)
    assert m == pytest.approx(0.75)


# ---------------------------------------------------------------------------
# log-average miss rate


def test_fppi_grid_is_nine_log_spaced_points():
    assert len(FPPI_GRID) == 9
    assert FPPI_GRID[0] == pytest.approx(1e-2) and FPPI_GRID[-1] == pytest.approx(1.0)
    assert np.allclose(np.diff(np.log10(FPPI_GRID)), 0.25)


@pytest.mark.parametrize("dets,gts,expected", LAMR_FIXTURES)
def test_lamr_fixtures(dets, gts, expected):
    assert log_average_miss_rate(dets, gts) == pytest.approx(expected, abs=1e-12)


def test_lamr_height_filter_ignores_small_objects():
    small = (40, 40, 44, 46)                       # 6 px tall
    gts = [gt_of([A, small]), gt_of([B])]
    dets = [[det(A, 0.9), det(small, 0.8)], []]
    # unfiltered: 2 of 3 found -> 1/3 everywhere; filtered: the small one is neither gt nor fp
    assert log_average_miss_rate(dets, gts) == pytest.approx(1 / 3, abs=1e-12)
    assert log_average_miss_rate(dets, gts, min_height=10) == pytest.approx(0.5, abs=1e-12)


def test_lamr_absent_without_gt():
    assert log_average_miss_rate([[]], [gt_of(np.zeros((0, 4)))]) is None


def test_miss_rate_curve_starts_at_no_detection_point():
    fppi, mr = miss_rate_curve([[det(A, 0.9)]], [gt_of([A])])
    assert (fppi[0], mr[0]) == (0.0, 1.0)
    assert (fppi[-1], mr[-1]) == (0.0, 0.0)


def test_recall_at_fppi():
    dets, gts, _ = lamr_case_four_images()
    assert recall_at_fppi(dets, gts, 0.1) == 0.0
    assert recall_at_fppi(dets, gts, 0.3) == 0.5
    assert recall_at_fppi(dets, gts, 1.0) == 0.75


def test_reasonable_height_scales_with_image():
    assert reasonable_min_height(512) == pytest.approx(55.0)
    assert reasonable_min_height(96) == pytest.approx(55 * 96 / 512)


# ---------------------------------------------------------------------------
# reports and helpers


def test_report_rejects_out_of_range_rates():
    with pytest.raises(ValueError):
        EvalReport({0: 1.0}, 1.2, 0.1, [], {}, 0)
    with pytest.raises(ValueError):
        EvalReport({0: 1.0}, 0.5, 0.1, [0.5, -0.1], {}, 0)


def test_report_text_embeds_seed_and_config():
    rep = EvalReport({0: 0.5}, 0.5, None, [0.7, 0.8], {"loops": 2}, 11)
    text = rep.to_text()
    assert "seed: 11" in text and "loops: 2" in text and "log_average_miss_rate: absent" in text
    assert rep.csv_row() == {"seed": 11, "mAP": 0.5, "lamr": "", "dice_1": 0.7, "dice_2": 0.8}


def test_detections_csv_columns():
    text = detections_csv({"img-1": [det((1, 2, 3, 4), 0.5)]})
    lines = text.splitlines()
    assert lines[0] == "image_id,class,x1,y1,x2,y2,confidence"
    assert lines[1] == "img-1,0,1.0000,2.0000,3.0000,4.0000,0.500000"


def test_write_pgm(tmp_path):
    m = np.zeros((2, 3), dtype=bool)
    m[1, 2] = True
    write_pgm(tmp_path / "m.pgm", m)
    data = (tmp_path / "m.pgm").read_bytes()
    assert data == b"P5\n3 2\n255\n" + bytes([0, 0, 0, 0, 0, 255])


def test_marginal_costs():
    prof = {k: TimingStats(t, 0.0, t) for k, t in {1: 1.0, 2: 1.5, 3: 2.1}.items()}
    assert marginal_costs(prof) == pytest.approx([0.5, 0.6])


def test_marginal_costs_pair_samples_within_rounds():
    # round 2 is slow for every count; paired differences ignore it
    a = TimingStats(0.0, 0.0, 0.0, [1.0, 5.0, 1.0])
    b = TimingStats(0.0, 0.0, 0.0, [1.5, 5.5, 1.5])
    assert marginal_costs({1: a, 2: b}) == pytest.approx([0.5])
