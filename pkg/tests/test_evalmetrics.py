"""Evaluation metrics: MCD and Spearman oracle cases."""

import json

import numpy as np
import pytest

from emorank.evalmetrics import (MCD_SCALE, MetricReport, mcd, mcd_report,
                                 mel_cepstra, spearman)


# ---------------------------------------------------------------------------
# mel cepstra


def test_mel_cepstra_shape_and_order():
    log_mel = np.random.default_rng(0).normal(size=(7, 80))
    c = mel_cepstra(log_mel)
    assert c.shape == (7, 14)  # c0..c13
    assert mel_cepstra(log_mel, order=5).shape == (7, 6)


def test_mel_cepstra_constant_frame_has_only_c0():
    # DCT-II of a constant signal concentrates everything in coefficient 0
    c = mel_cepstra(np.full((3, 16), 2.0), order=7)
    np.testing.assert_allclose(c[:, 1:], 0.0, atol=1e-12)
    # orthonormal c0 of a constant x is x * sqrt(n)
    np.testing.assert_allclose(c[:, 0], 2.0 * np.sqrt(16), atol=1e-12)


def test_mel_cepstra_matches_direct_formula():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 10))
    c = mel_cepstra(x, order=9)
    n = 10
    for k in range(10):
        basis = np.cos(np.pi * k * (2 * np.arange(n) + 1) / (2 * n))
        scale = np.sqrt(2.0 / n) if k else np.sqrt(1.0 / n)
        ref = (x * basis).sum(axis=1) * scale
        np.testing.assert_allclose(c[:, k], ref, atol=1e-10)


def test_mel_cepstra_validation():
    with pytest.raises(ValueError):
        mel_cepstra(np.zeros(8))
    with pytest.raises(ValueError):
        mel_cepstra(np.zeros((3, 8)), order=8)
    with pytest.raises(ValueError):
        mel_cepstra(np.zeros((3, 8)), order=0)


# ---------------------------------------------------------------------------
# MCD


def test_mcd_identical_sequences_zero():
    a = np.random.default_rng(2).normal(size=(9, 14))
    assert mcd(a, a) == 0.0


def test_mcd_single_frame_unit_difference():
    # one frame, one coefficient off by 1 -> (10/ln10) * sqrt(2)
    a = np.zeros((1, 3))
    b = np.zeros((1, 3))
    b[0, 1] = 1.0
    assert mcd(a, b) == pytest.approx((10.0 / np.log(10.0)) * np.sqrt(2.0),
                                      abs=1e-9)


def test_mcd_symmetry():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.normal(size=(6, 8))
        b = rng.normal(size=(6, 8))
        assert mcd(a, b) == pytest.approx(mcd(b, a), abs=1e-12)
        assert mcd(a, b) >= 0.0


def test_mcd_ignores_energy_coefficient():
    a = np.zeros((4, 5))
    b = np.zeros((4, 5))
    b[:, 0] = 100.0  # c0 differences must not count
    assert mcd(a, b) == 0.0


def test_mcd_hand_computed_two_frames():
    a = np.array([[0.0, 1.0, 2.0], [0.0, -1.0, 0.5]])
    b = np.array([[5.0, 2.0, 0.0], [5.0, 0.0, 0.0]])
    f1 = MCD_SCALE * np.sqrt(2.0 * ((1 - 2) ** 2 + (2 - 0) ** 2))
    f2 = MCD_SCALE * np.sqrt(2.0 * ((-1 - 0) ** 2 + 0.5 ** 2))
    assert mcd(a, b) == pytest.approx((f1 + f2) / 2.0, abs=1e-12)


def test_mcd_scales_linearly_in_difference():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(5, 6))
    d = rng.normal(size=(5, 6))
    d[:, 0] = 0.0
    assert mcd(a, a + 2 * d) == pytest.approx(2.0 * mcd(a, a + d), rel=1e-12)


def test_mcd_validation():
    with pytest.raises(ValueError):
        mcd(np.zeros((3, 4)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        mcd(np.zeros((3, 1)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        mcd(np.zeros(5), np.zeros(5))


def test_mcd_report():
    a = np.zeros((2, 3))
    b = np.zeros((2, 3))
    c = np.zeros((2, 3))
    c[:, 1] = 1.0
    report = mcd_report([("clean", a, b), ("off", a, c)])
    assert report.name == "MCD" and report.units == "dB"
    assert report.n_items == 2
    expected_off = MCD_SCALE * np.sqrt(2.0)
    assert dict(report.per_item)["clean"] == 0.0
    assert dict(report.per_item)["off"] == pytest.approx(expected_off, abs=1e-12)
    assert report.value == pytest.approx(expected_off / 2.0, abs=1e-12)
    doc = json.loads(report.to_json())
    assert doc["metric"] == "MCD" and doc["n_items"] == 2
    table = report.format_table()
    assert "MCD (dB)" in table and "off:" in table


def test_metric_report_validation():
    with pytest.raises(ValueError):
        MetricReport("x", float("nan"), "dB", 1)
    with pytest.raises(ValueError):
        MetricReport("x", 1.0, "dB", 0)


# ---------------------------------------------------------------------------
# Spearman


def test_spearman_perfect_and_reversed():
    xs = [1.0, 2.0, 3.0, 4.0, 5.0]
    assert spearman(xs, xs) == pytest.approx(1.0, abs=1e-12)
    assert spearman(xs, xs[::-1]) == pytest.approx(-1.0, abs=1e-12)


def test_spearman_single_swap_hand_value():
    # ranks (1,2,3,4) vs (1,3,2,4): rho = 1 - 6*2/(4*15) = 0.8
    assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)


def test_spearman_monotone_invariance():
    rng = np.random.default_rng(5)
    xs = rng.normal(size=30)
    ys = rng.normal(size=30)
    base = spearman(xs, ys)
    assert spearman(np.exp(xs), ys) == pytest.approx(base, abs=1e-12)
    assert spearman(xs * 1000.0 + 5.0, ys) == pytest.approx(base, abs=1e-12)


def test_spearman_with_ties_uses_average_ranks():
    # xs has a tie; average ranks (1.5, 1.5, 3) against (1, 2, 3)
    rho = spearman([2.0, 2.0, 5.0], [1.0, 2.0, 3.0])
    rx = np.array([1.5, 1.5, 3.0]) - 2.0
    ry = np.array([1.0, 2.0, 3.0]) - 2.0
    expected = (rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry))
    assert rho == pytest.approx(expected, abs=1e-12)


def test_spearman_independent_near_zero():
    rng = np.random.default_rng(6)
    rhos = [spearman(rng.normal(size=200), rng.normal(size=200))
            for _ in range(20)]
    # sigma ~ 1/sqrt(199) ~ 0.071; the mean of 20 draws should sit near 0
    assert abs(np.mean(rhos)) < 0.07


def test_spearman_validation():
    with pytest.raises(ValueError):
        spearman([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        spearman([1.0], [1.0])
    with pytest.raises(ValueError):
        spearman([3.0, 3.0, 3.0], [1.0, 2.0, 3.0])  # zero rank variance
