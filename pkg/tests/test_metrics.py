import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import pearson_direct, psnr_direct, ssim_direct
from stainforge.metrics import SSIMConfig, evaluate, gaussian_window, pearson_r, psnr, psnr_from_mse, ssim

images = arrays(np.float64, (16, 16), elements=st.floats(0, 1, allow_nan=False))


def pairs(n=50, size=32, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        a = rng.random((size, size))
        yield a, np.clip(a + rng.normal(0, rng.uniform(0.01, 0.5), a.shape), 0, 1)


def test_ssim_matches_windowed_direct_formula():
    for a, b in pairs(10):
        assert ssim(a, b) == pytest.approx(ssim_direct(a, b), abs=1e-9)


def test_gaussian_window_is_normalised_and_symmetric():
    g = gaussian_window()
    assert g.size == 11 and g.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(g, g[::-1])


def test_ssim_identity_is_exactly_one():
    a = np.random.default_rng(0).random((20, 20))
    assert ssim(a, a) == 1.0


def test_ssim_of_inverted_half_image_is_negative():
    a = np.zeros((24, 24))
    a[:, 12:] = 1.0
    got = ssim(a, 1 - a)
    assert got < 0
    assert got == pytest.approx(ssim_direct(a, 1 - a), abs=1e-12)


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12)), np.zeros((12, 12)), data_range=0)
    with pytest.raises(ValueError):
        SSIMConfig(window=4)


def test_pearson_conventions():
    a = np.arange(10.0)
    assert pearson_r(a, a) == pytest.approx(1.0)
    assert pearson_r(a, 3.0 - a) == pytest.approx(-1.0)
    assert pearson_r(a, np.full(10, 0.2)) == 0.0
    with pytest.raises(ValueError):
        pearson_r([1.0], [1.0])


def test_psnr_formula_and_sentinel():
    assert psnr_from_mse(0.01, 1.0) == 20.0
    a = np.zeros((10, 10))
    b = np.full((10, 10), 0.1)  # mse 0.01 up to rounding of 0.1
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a) == math.inf
    assert psnr(a, np.full((10, 10), 1e-4)) == pytest.approx(80.0)
    assert psnr(np.zeros(4), np.full(4, 257.0), data_range=65535) == pytest.approx(20 * math.log10(65535 / 257))


@settings(max_examples=30, deadline=None)
@given(images, images)
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert -1 - 1e-12 <= s <= 1 + 1e-12
    assert s == pytest.approx(ssim(b, a), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(images, images, st.floats(0.01, 100), st.floats(-5, 5))
def test_pearson_affine_invariance(a, b, scale, shift):
    r = pearson_r(a, b)
    assert -1 <= r <= 1
    if np.ptp(b) > 1e-3 and np.ptp(a) > 1e-3:
        assert pearson_r(a, scale * b + shift) == pytest.approx(r, abs=1e-9)


def _gt(seed, empty=False):
    img = np.zeros((1, 16, 16))
    if not empty:
        img[0, 4:12, 4:12] = np.random.default_rng(seed).uniform(0.3, 1.0, (8, 8))
    return img


def test_evaluate_perfect_predictions_and_counts():
    gt = {f"p{i}": {"A": _gt(i), "B": _gt(i + 10, empty=i < 2)} for i in range(5)}
    report = evaluate(gt, gt, ["A", "B"])
    assert report.markers["A"].count == 5 and report.markers["B"].count == 3
    assert report.markers["B"].excluded == 2
    assert report.markers["A"].ssim == 1.0 and report.markers["A"].r == pytest.approx(1.0)
    assert report.markers["A"].psnr == math.inf
    d = json.loads(report.to_json())
    assert d["markers"]["A"]["psnr"] == "inf"
    assert "SSIM" in report.to_text()


def test_evaluate_averages_are_unweighted_means_over_markers():
    rng = np.random.default_rng(0)
    gt = {f"p{i}": {m: _gt(i * 3 + j) for j, m in enumerate("ABC")} for i in range(4)}
    pred = {k: {m: np.clip(v + rng.normal(0, 0.1, v.shape), 0, 1) for m, v in d.items()} for k, d in gt.items()}
    rep = evaluate(pred, gt, list("ABC"))
    for metric in ("ssim", "r", "psnr"):
        assert rep.averages[metric] == pytest.approx(np.mean([getattr(rep.markers[m], metric) for m in "ABC"]), abs=1e-12)
    # per-marker values are means of per-patch values
    a_vals = [ssim(pred[k]["A"][0], gt[k]["A"][0]) for k in gt]
    assert rep.markers["A"].ssim == pytest.approx(np.mean(a_vals), abs=1e-12)


def test_evaluate_omits_markers_without_patches_and_checks_ground_truth():
    gt = {"p0": {"A": _gt(0), "B": _gt(0, empty=True)}}
    rep = evaluate(gt, gt, ["A", "B"])
    assert rep.omitted == ["B"] and "B" not in rep.markers and rep.excluded["B"] == 1
    with pytest.raises(KeyError):
        evaluate({"p0": {"C": _gt(0)}}, gt, ["C"])
    with pytest.raises(KeyError):
        evaluate({"zz": {"A": _gt(0)}}, gt, ["A"])
