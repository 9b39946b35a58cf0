import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from context_forge.errors import ContractError, ShapeError
from context_forge.imaging import LUMA
from context_forge.metrics import (GaussianStats, MetricReport, ToyEmbedder, age, aggregate, evaluate_pair,
                                   fgiou_fscore, format_table, frechet_distance, mse_pct, mssim, pceps, peps,
                                   psnr)

# ---------------------------------------------------------------- oracles


def loop_gray(img):
    c, h, w = img.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            out[i, j] = sum(LUMA[k] * img[k, i, j] for k in range(3))
    return out


def loop_mse(a, b):
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (x - y) ** 2
    return total / a.size


def loop_psnr(a, b):
    m = loop_mse(a, b)
    return 99.0 if m == 0 else min(10 * math.log10(1 / m), 99.0)


def reflect_index(i, n):
    # half-sample symmetric extension: d c b a | a b c d | d c b a
    while i < 0 or i >= n:
        i = -i - 1 if i < 0 else 2 * n - i - 1
    return i


def loop_ssim(a, b, size=11, sigma=1.5):
    h, w = a.shape
    r = size // 2
    g = [math.exp(-((k - r) ** 2) / (2 * sigma ** 2)) for k in range(size)]
    s = sum(g)
    g = [v / s for v in g]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    total = 0.0
    for i in range(h):
        for j in range(w):
            ma = mb = saa = sbb = sab = 0.0
            for di in range(size):
                for dj in range(size):
                    wgt = g[di] * g[dj]
                    y = reflect_index(i + di - r, h)
                    x = reflect_index(j + dj - r, w)
                    va, vb = a[y, x], b[y, x]
                    ma += wgt * va
                    mb += wgt * vb
                    saa += wgt * va * va
                    sbb += wgt * vb * vb
                    sab += wgt * va * vb
            va_, vb_, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va_ + vb_ + c2))
    return 100 * total / (h * w)


def loop_errors(a, b, thr=20 / 255):
    ga, gb = loop_gray(a), loop_gray(b)
    h, w = ga.shape
    return [[abs(ga[i, j] - gb[i, j]) > thr for j in range(w)] for i in range(h)]


def loop_pceps(a, b):
    err = loop_errors(a, b)
    h, w = len(err), len(err[0])
    count = 0
    for i in range(h):
        for j in range(w):
            if not err[i][j]:
                continue
            nbrs = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
            if all(0 <= y < h and 0 <= x < w and err[y][x] for y, x in nbrs):
                count += 1
    return count / (h * w)


def loop_age(a, b):
    ga, gb = loop_gray(a), loop_gray(b)
    return float(np.mean([abs(x - y) for x, y in zip(ga.ravel(), gb.ravel())])) * 255


def loop_iou(pred, gt):
    tp = fp = fn = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        tp += p and g
        fp += p and not g
        fn += g and not p
    return tp, fp, fn


def random_pair(rng, h, w, spread=0.3):
    a = rng.random((3, h, w))
    b = np.clip(a + rng.normal(scale=spread, size=a.shape), 0, 1)
    return a, b

# ------------------------------------------------------------------ tests


@pytest.mark.parametrize("seed", range(10))
def test_pixel_metrics_match_loops(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(2, 17, size=2)
    a, b = random_pair(rng, h, w, spread=rng.choice([0.02, 0.1, 0.4]))
    assert psnr(a, b) == pytest.approx(loop_psnr(a, b), abs=1e-6)
    assert mse_pct(a, b) == pytest.approx(100 * loop_mse(a, b), abs=1e-5)
    assert age(a, b) == pytest.approx(loop_age(a, b), abs=1e-5)
    assert peps(a, b) == pytest.approx(np.mean(loop_errors(a, b)), abs=1e-12)
    assert pceps(a, b) == pytest.approx(loop_pceps(a, b), abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_mssim_matches_windowed_loop(seed):
    rng = np.random.default_rng(100 + seed)
    h, w = rng.integers(11, 17, size=2)
    a, b = random_pair(rng, h, w, spread=0.2)
    assert mssim(a, b) == pytest.approx(loop_ssim(loop_gray(a), loop_gray(b)), abs=1e-5)


@pytest.mark.parametrize("seed", range(10))
def test_fgiou_matches_counting(seed):
    rng = np.random.default_rng(seed)
    pred = rng.random((9, 13)) > 0.5
    gt = rng.random((9, 13)) > 0.6
    tp, fp, fn = loop_iou(pred, gt)
    iou, p, r, f = fgiou_fscore(pred.astype(int), gt.astype(int))
    assert iou == pytest.approx(100 * tp / (tp + fp + fn), abs=1e-9)
    assert p == pytest.approx(tp / (tp + fp)) and r == pytest.approx(tp / (tp + fn))
    assert f == pytest.approx(2 * p * r / (p + r))


def test_psnr_closed_forms():
    z = np.zeros((3, 8, 8))
    assert psnr(z, z) == 99.0
    assert psnr(z, z + 0.5) == pytest.approx(10 * math.log10(4), abs=1e-9)
    assert psnr(z + 0.5, z) == pytest.approx(6.0206, abs=1e-4)


def test_mssim_closed_forms():
    z = np.zeros((3, 16, 16))
    assert mssim(z + 0.3, z + 0.3) == pytest.approx(100.0)
    c1 = 0.01 ** 2
    assert mssim(z, z + 1.0) == pytest.approx(100 * c1 / (1 + c1), abs=1e-9)


def test_mssim_rejects_small_images():
    with pytest.raises(ContractError):
        mssim(np.zeros((3, 10, 20)), np.zeros((3, 10, 20)))


def test_gray_offset_and_isolated_error():
    a = np.full((3, 6, 6), 0.5)
    b = a + 10 / 255
    assert age(a, b) == pytest.approx(10.0, abs=1e-9)
    assert peps(a, b) == 0.0 and pceps(a, b) == 0.0
    c = a.copy()
    c[:, 3, 3] += 30 / 255
    assert peps(a, c) == pytest.approx(1 / 36)
    assert pceps(a, c) == 0.0
    for f in (psnr, mse_pct, age, peps, pceps):
        assert f(a, a) == (99.0 if f is psnr else 0.0)


def test_pceps_cross_of_errors():
    a = np.zeros((3, 5, 5))
    b = a.copy()
    b[:, 1:4, 2] = 1.0
    b[:, 2, 1:4] = 1.0
    assert pceps(a, b) == pytest.approx(1 / 25)
    full = np.ones((3, 5, 5))
    # border pixels never qualify, so a fully wrong 5x5 image scores the 3x3 interior
    assert pceps(a, full) == pytest.approx(9 / 25)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))
    with pytest.raises(ShapeError):
        fgiou_fscore(np.zeros((2, 2)), np.zeros((2, 3)))


def test_mask_conventions():
    gt = np.zeros((4, 4))
    gt[:2] = 1
    half = np.zeros((4, 4))
    half[0] = 1
    iou, p, r, f = fgiou_fscore(half, gt)
    assert (iou, p, r) == (50.0, 1.0, 0.5) and f == pytest.approx(2 / 3)
    assert fgiou_fscore(gt, gt) == (100.0, 1.0, 1.0, 1.0)
    assert fgiou_fscore(np.zeros((3, 3)), np.zeros((3, 3))) == (100.0, 1.0, 1.0, 1.0)
    assert fgiou_fscore(np.zeros((4, 4)), gt) == (0.0, 0.0, 0.0, 0.0)
    assert fgiou_fscore(gt, np.zeros((4, 4))) == (0.0, 0.0, 0.0, 0.0)
    with pytest.raises(ContractError):
        fgiou_fscore(np.full((2, 2), 0.5), np.zeros((2, 2)))


def test_frechet_closed_forms():
    p = GaussianStats([0.0], [[1.0]])
    q = GaussianStats([1.0], [[1.0]])
    assert frechet_distance(p, p) == pytest.approx(0.0, abs=1e-6)
    assert frechet_distance(p, q) == pytest.approx(1.0, abs=1e-6)
    a = GaussianStats([0.0, 0.0], np.diag([1.0, 4.0]))
    b = GaussianStats([0.0, 0.0], np.diag([4.0, 1.0]))
    assert frechet_distance(a, b) == pytest.approx(2.0, abs=1e-6)


def random_psd(rng, d):
    m = rng.normal(size=(d, d))
    return m @ m.T + 1e-3 * np.eye(d)


@pytest.mark.parametrize("seed", range(10))
def test_frechet_matches_sqrtm_formula(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 7))
    s1, s2 = random_psd(rng, d), random_psd(rng, d)
    m1, m2 = rng.normal(size=d), rng.normal(size=d)
    ref = np.sum((m1 - m2) ** 2) + np.trace(s1 + s2 - 2 * np.real(scipy.linalg.sqrtm(s1 @ s2)))
    got = frechet_distance(GaussianStats(m1, s1), GaussianStats(m2, s2))
    assert got == pytest.approx(ref, rel=1e-6, abs=1e-6)


def test_gaussian_stats_validation():
    with pytest.raises(ContractError):
        GaussianStats([0, 0], [[1, 0.5], [0.1, 1]])
    with pytest.raises(ContractError):
        GaussianStats([0, 0], [[1, 0], [0, -1]])
    with pytest.raises(ShapeError):
        frechet_distance(GaussianStats([0], [[1]]), GaussianStats([0, 0], np.eye(2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_symmetric_metrics_are_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = random_pair(rng, 12, 12)
    for f in (psnr, mse_pct, age, peps, pceps, mssim):
        assert f(a, b) == pytest.approx(f(b, a), abs=1e-9)
    s1 = GaussianStats(rng.normal(size=3), random_psd(rng, 3))
    s2 = GaussianStats(rng.normal(size=3), random_psd(rng, 3))
    assert frechet_distance(s1, s2) == pytest.approx(frechet_distance(s2, s1), rel=1e-6, abs=1e-6)
    assert frechet_distance(s1, s2) >= 0


def test_fscore_dominates_iou_over_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        shape = tuple(rng.integers(1, 8, size=2))
        pred = rng.random(shape) < rng.random()
        gt = rng.random(shape) < rng.random()
        iou, _, _, f = fgiou_fscore(pred, gt)
        assert f >= iou / 100 - 1e-12


def test_toy_embedder_is_fixed_and_shaped():
    imgs = np.random.default_rng(0).random((5, 3, 16, 16))
    e1, e2 = ToyEmbedder(seed=1), ToyEmbedder(seed=1)
    np.testing.assert_array_equal(e1(imgs), e2(imgs))
    assert e1(imgs).shape == (5, 64)


def test_report_aggregation_and_table():
    rng = np.random.default_rng(0)
    gt = rng.random((3, 16, 16))
    mask = (rng.random((16, 16)) > 0.5).astype(np.uint8)
    perfect = evaluate_pair(gt, gt, mask, mask)
    assert perfect.psnr == 99.0 and perfect.fgiou == 100.0 and perfect.mssim == pytest.approx(100.0)
    agg = aggregate([perfect, evaluate_pair(pred_mask=1 - mask, gt_mask=mask)])
    assert agg.count == 2 and agg.psnr == 99.0 and agg.fgiou == 50.0
    table = format_table({"synth": agg})
    header = table.splitlines()[0]
    cols = ["PSNR", "MSSIM", "MSE", "AGE", "pEPs", "pCEPs", "FID", "fgIoU", "F-score"]
    assert [header.index(c) for c in cols] == sorted(header.index(c) for c in cols)
    assert isinstance(agg, MetricReport)
