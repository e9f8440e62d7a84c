import numpy as np
import pytest
from skimage.metrics import structural_similarity as skimage_ssim

from medseglatdiff import MetricsReport, dice, evaluate_masks, iou, psnr, ssim, write_metrics_csv
from medseglatdiff.outputs import read_csv_rows


def brute_overlap(a, b):
    """Independent set-counting oracle."""
    inter = union = na = nb = 0
    for x, y in zip(np.asarray(a).flat, np.asarray(b).flat):
        na += int(x)
        nb += int(y)
        inter += int(x and y)
        union += int(x or y)
    d = 1.0 if na + nb == 0 else 2 * inter / (na + nb)
    j = 1.0 if union == 0 else inter / union
    return d, j


def test_dice_iou_basic_cases():
    a = np.zeros((4, 4), dtype=np.uint8)
    a[:2, :2] = 1
    assert dice(a, a) == 1.0
    assert iou(a, a) == 1.0
    b = np.zeros((4, 4), dtype=np.uint8)
    b[2:, 2:] = 1
    assert dice(a, b) == 0.0
    assert iou(a, b) == 0.0
    # |a| = |b| = 4, overlap 2
    c = np.zeros((4, 4), dtype=np.uint8)
    c[0, :2] = 1
    c[1, 2:] = 1
    d_ = np.zeros((4, 4), dtype=np.uint8)
    d_[0, :2] = 1
    d_[3, :2] = 1
    assert dice(c, d_) == 0.5
    assert iou(c, d_) == pytest.approx(2 / 6)


def test_dice_iou_both_empty_convention():
    z = np.zeros((3, 3), dtype=np.uint8)
    assert dice(z, z) == 1.0
    assert iou(z, z) == 1.0


def test_dice_iou_match_brute_force_and_identity():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = (rng.random((8, 8)) < rng.random()).astype(np.uint8)
        b = (rng.random((8, 8)) < rng.random()).astype(np.uint8)
        d_ref, j_ref = brute_overlap(a, b)
        d, j = dice(a, b), iou(a, b)
        assert abs(d - d_ref) < 1e-12
        assert abs(j - j_ref) < 1e-12
        assert abs(d - 2 * j / (1 + j)) < 1e-12
        assert d >= j
        assert d == dice(b, a)
        assert j == iou(b, a)
        assert 0.0 <= j <= d <= 1.0


def test_dice_rejects_bad_inputs():
    a = np.zeros((2, 2), dtype=np.uint8)
    with pytest.raises(ValueError):
        dice(a, np.zeros((3, 3), dtype=np.uint8))
    with pytest.raises(ValueError):
        dice(a, np.full((2, 2), 0.5))
    with pytest.raises(ValueError):
        iou(np.array([[2, 0], [0, 1]]), a)


def test_psnr_values():
    x = np.random.default_rng(1).random((8, 8))
    assert psnr(x, x) == 100.0
    assert psnr(x, np.clip(x, 0, 1)) == 100.0
    y = np.zeros((8, 8))
    assert psnr(y, y + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == pytest.approx(0.0, abs=1e-12)
    assert psnr(x, x + 1e-9) == 100.0  # cap engages below the cap threshold
    with pytest.raises(ValueError):
        psnr(x, np.zeros((4, 4)))


def test_ssim_identity_and_symmetry():
    x = np.random.default_rng(2).random((24, 24))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    y = np.random.default_rng(3).random((24, 24))
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)
    assert -1.0 <= ssim(x, y) <= 1.0


def test_ssim_constant_images_closed_form():
    c1, c2 = 0.3, 0.7
    x = np.full((16, 16), c1)
    y = np.full((16, 16), c2)
    expected = (2 * c1 * c2 + 0.01**2) / (c1**2 + c2**2 + 0.01**2)
    assert ssim(x, y) == pytest.approx(expected, rel=1e-12)


def test_ssim_anticorrelated_pattern_negative_and_matches_reference():
    rng = np.random.default_rng(4)
    x = (rng.random((16, 16)) < 0.5).astype(np.float64)
    y = 1.0 - x
    val = ssim(x, y)
    ref = skimage_ssim(x, y, gaussian_weights=True, sigma=1.5,
                       use_sample_covariance=False, data_range=1.0)
    assert val < 0
    assert val == pytest.approx(ref, abs=1e-7)


def test_ssim_matches_independent_reference_on_random_images():
    rng = np.random.default_rng(5)
    for _ in range(5):
        x = rng.random((20, 28))
        y = np.clip(x + 0.2 * rng.standard_normal((20, 28)), 0, 1)
        ref = skimage_ssim(x, y, gaussian_weights=True, sigma=1.5,
                           use_sample_covariance=False, data_range=1.0)
        assert ssim(x, y) == pytest.approx(ref, abs=1e-7)


def test_ssim_window_constraint():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))  # smaller than the 11-tap window


def test_report_aggregation_and_csv(tmp_path):
    a = np.zeros((16, 16), dtype=np.uint8)
    a[2:6, 2:6] = 1
    b = np.zeros((16, 16), dtype=np.uint8)
    b[2:6, 2:8] = 1
    report = evaluate_masks(["s0", "s1"], [a, a], [a, b])
    assert report.per_sample[0]["dice"] == 1.0
    assert report.dice == pytest.approx(np.mean([r["dice"] for r in report.per_sample]))
    assert report.dice >= report.iou

    out = tmp_path / "report.csv"
    write_metrics_csv(report, out, config_hash="deadbeef")
    rows = read_csv_rows(out)
    assert [r["sample_id"] for r in rows] == ["s0", "s1", "aggregate"]
    assert float(rows[-1]["dice"]) == pytest.approx(report.dice, abs=1e-6)
    assert open(out).readline().startswith("# config_hash=deadbeef")


def test_empty_report_rejected():
    with pytest.raises(ValueError):
        MetricsReport().dice
