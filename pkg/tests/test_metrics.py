import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_force_ssim
from ldct import metrics
from ldct.errors import ConfigError, DataError


def test_window_sums_to_one():
    assert float(metrics.gaussian_window().sum()) == pytest.approx(1.0, abs=1e-15)


def test_psnr_identical_is_sentinel(rng):
    x = rng.random((16, 16))
    assert metrics.psnr(x, x, 1.0) == metrics.PSNR_INF


def test_psnr_hand_case():
    assert metrics.psnr(np.full((8, 8), 0.1), np.zeros((8, 8)), 1.0) == pytest.approx(20.0, abs=1e-12)


def test_psnr_errors():
    with pytest.raises(ConfigError):
        metrics.psnr(np.zeros((4, 4)), np.ones((4, 4)), 0)
    with pytest.raises(DataError):
        metrics.psnr(np.zeros((4, 4)), np.ones((4, 5)), 1)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (12, 12), elements=st.floats(-1, 1)),
       arrays(np.float64, (12, 12), elements=st.floats(-1, 1)),
       st.floats(-5, 5))
def test_psnr_shift_invariance(a, b, c):
    shifted = metrics.psnr(a + c, b + c, 2.0)
    plain = metrics.psnr(a, b, 2.0)
    if math.isinf(plain):
        return
    # exact up to the rounding of the shifted difference itself
    assert shifted == pytest.approx(plain, rel=1e-9, abs=1e-9)


def test_ssim_self_is_one(rng):
    x = rng.random((32, 32))
    assert metrics.ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_brute_force(rng):
    for _ in range(5):
        x, y = rng.random((32, 32)), rng.random((32, 32))
        assert metrics.ssim(x, y) == pytest.approx(brute_force_ssim(x, y, 1.0), abs=1e-8)


def test_ssim_independent_noise_near_zero():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        assert abs(metrics.ssim(rng.random((64, 64)), rng.random((64, 64)))) < 0.05


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (16, 16), elements=st.floats(0, 1)),
       arrays(np.float64, (16, 16), elements=st.floats(0, 1)))
def test_ssim_symmetric_and_bounded(a, b):
    s_ab, s_ba = metrics.ssim(a, b), metrics.ssim(b, a)
    assert s_ab == pytest.approx(s_ba, abs=1e-12)
    assert -1 - 1e-12 <= s_ab <= 1 + 1e-12


def test_ssim_window_too_large():
    with pytest.raises(DataError):
        metrics.ssim(np.zeros((10, 10)), np.zeros((10, 10)))


def test_fr_equals_plain_when_range_matches(rng):
    gt = rng.random((32, 32))
    gt = (gt - gt.min()) / (gt.max() - gt.min())  # range exactly 1
    pred = gt + 0.05 * rng.standard_normal(gt.shape)
    row = metrics.image_metrics("a", pred, gt, fixed_range=1.0)
    assert row.psnr == row.psnr_fr
    assert row.ssim == row.ssim_fr


def test_range_algebra_under_scaling(rng):
    gt = rng.random((32, 32))
    delta = 0.02 * rng.standard_normal(gt.shape)
    full = metrics.image_metrics("a", gt + delta, gt, 1.0)
    half = metrics.image_metrics("b", 0.5 * gt + delta, 0.5 * gt, 1.0)
    # same absolute error, half the ground-truth range: non-FR PSNR drops by 10 log10(4)
    assert half.psnr - full.psnr == pytest.approx(10 * math.log10(0.25), abs=1e-9)
    assert half.psnr_fr == pytest.approx(full.psnr_fr, abs=1e-9)


def test_fr_needs_positive_range():
    with pytest.raises(ConfigError):
        metrics.metrics_fr(np.zeros((16, 16)), np.zeros((16, 16)), 0.0)


def test_constant_ground_truth_flagged(rng):
    gt = np.full((16, 16), 0.3)
    report = metrics.MetricsReport(rows=[
        metrics.image_metrics("const", gt + 0.01, gt),
        metrics.image_metrics("ok", rng.random((16, 16)), rng.random((16, 16))),
    ])
    row = report.rows[0]
    assert row.flagged and math.isnan(row.psnr)
    assert row.psnr_fr == pytest.approx(40.0)
    agg = report.aggregates()
    assert agg["psnr"][0] == report.rows[1].psnr  # flagged row excluded
    assert agg["psnr_fr"][0] == pytest.approx(np.mean([r.psnr_fr for r in report.rows]), abs=1e-12)


def test_report_aggregates_recomputable(rng):
    rows = [metrics.image_metrics(str(i), rng.random((16, 16)), rng.random((16, 16))) for i in range(7)]
    report = metrics.MetricsReport(rows=rows)
    for name, (mean, std) in report.aggregates().items():
        vals = np.array([getattr(r, name) for r in rows])
        assert mean == pytest.approx(vals.mean(), abs=1e-12)
        assert std == pytest.approx(vals.std(), abs=1e-12) and std >= 0
    lines = report.to_csv().strip().splitlines()
    assert lines[0] == "id,psnr,ssim,psnr_fr,ssim_fr,flagged" and len(lines) == 8
    assert "±" in report.to_table()


def test_report_infinite_psnr_sentinel(rng):
    x = rng.random((16, 16))
    report = metrics.MetricsReport(rows=[metrics.image_metrics("same", x, x)])
    assert report.rows[0].psnr == metrics.PSNR_INF
    assert ",inf," in report.to_csv()
    assert report.aggregates()["psnr"][0] == metrics.PSNR_INF
    assert "inf" in report.to_table()


def test_empty_report():
    report = metrics.MetricsReport()
    assert report.aggregates() == {}
