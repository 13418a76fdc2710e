import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sadfn.core import ShapeError
from sadfn.metrics import (
    LITERATURE_SEG_RESULTS,
    MetricReport,
    avd,
    boundary,
    dice,
    evaluate_report,
    format_table,
    full_sampled_report,
    gaussian_window,
    hd95,
    nearest_rank,
    parse_table,
    psnr,
    ssim,
)
from sadfn.mri import make_mask_cartesian1d
from sadfn.phantom import PhantomConfig, generate_dataset


# -- brute-force oracles ------------------------------------------------------

def boundary_oracle(region):
    h, w = region.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not region[i, j]:
                continue
            edge = False
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ii, jj = i + di, j + dj
                if not (0 <= ii < h and 0 <= jj < w) or not region[ii, jj]:
                    edge = True
            if edge:
                pts.append((i, j))
    return pts


def hd95_oracle(pred, gt, c):
    bp, bg = boundary_oracle(pred == c), boundary_oracle(gt == c)
    if not bp or not bg:
        return math.nan

    def directed(src, dst):
        d = sorted(min(math.hypot(a[0] - b[0], a[1] - b[1]) for b in dst) for a in src)
        k = math.ceil(0.95 * len(d))
        return d[max(k, 1) - 1]

    return max(directed(bp, bg), directed(bg, bp))


def dice_oracle(pred, gt, c):
    inter = a = b = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        a += p == c
        b += g == c
        inter += (p == c) and (g == c)
    return 1.0 if a + b == 0 else 2 * inter / (a + b)


def avd_oracle(pred, gt, c):
    vp = sum(1 for p in pred.ravel() if p == c)
    vg = sum(1 for g in gt.ravel() if g == c)
    return math.nan if vg == 0 else abs(vp - vg) / vg * 100


def same(a, b):
    return (math.isnan(a) and math.isnan(b)) or a == b


# -- PSNR ---------------------------------------------------------------------

def test_psnr_identical_is_inf():
    x = np.random.default_rng(0).random((8, 8))
    assert psnr(x, x) == math.inf


def test_psnr_uniform_error_20db():
    ref = np.zeros((16, 16))
    assert psnr(ref + 0.1, ref) == pytest.approx(20.0, abs=1e-9)


def test_psnr_peak_scaling():
    ref = np.zeros((4, 4))
    assert psnr(ref + 2.0, ref, peak=2.0) == pytest.approx(0.0, abs=1e-12)


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


# -- SSIM ---------------------------------------------------------------------

def test_gaussian_window_normalized():
    w = gaussian_window()
    assert w.shape == (11, 11)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)
    assert w[5, 5] == w.max()


def test_ssim_identity():
    x = np.random.default_rng(3).random((24, 24))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)


def test_ssim_constant_images_closed_form():
    a, b = 0.5, 0.6
    c1 = 0.01 ** 2
    expect = (2 * a * b + c1) / (a * a + b * b + c1)
    assert ssim(np.full((16, 16), a), np.full((16, 16), b)) == pytest.approx(expect, abs=1e-9)


def test_ssim_decreases_with_noise():
    rng = np.random.default_rng(4)
    x = rng.random((32, 32))
    mild = ssim(x + 0.01 * rng.normal(size=x.shape), x)
    strong = ssim(x + 0.2 * rng.normal(size=x.shape), x)
    assert 1 > mild > strong


def test_ssim_too_small():
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# -- Dice / HD95 / AVD ----------------------------------------------------------

def test_dice_both_empty_is_one():
    z = np.zeros((5, 5), int)
    assert dice(z, z, 2) == 1.0


def test_dice_disjoint_is_zero():
    a = np.zeros((4, 4), int)
    b = a.copy()
    a[0, 0], b[3, 3] = 1, 1
    assert dice(a, b, 1) == 0.0


def test_hd95_identical_is_zero():
    lab = np.zeros((10, 10), int)
    lab[2:7, 3:8] = 1
    assert hd95(lab, lab, 1) == 0.0


def test_hd95_empty_is_nan():
    lab = np.zeros((6, 6), int)
    other = lab.copy()
    other[1, 1] = 1
    assert math.isnan(hd95(lab, other, 1))


def test_hd95_shifted_square():
    a = np.zeros((20, 20), int)
    b = a.copy()
    a[5:10, 5:10] = 1
    b[5:10, 8:13] = 1
    assert hd95(a, b, 1) == hd95_oracle(a, b, 1)
    assert hd95(a, b, 1, spacing=0.5) == pytest.approx(0.5 * hd95(a, b, 1))


def test_boundary_counts_image_edge():
    full = np.ones((4, 4), bool)
    assert boundary(full).sum() == 12
    assert sorted(map(tuple, np.argwhere(boundary(full)))) == sorted(boundary_oracle(full))


def test_nearest_rank():
    assert nearest_rank(np.arange(1, 21), 95) == 19
    assert nearest_rank(np.array([3.0]), 95) == 3.0


def test_avd_values():
    gt = np.zeros((4, 4), int)
    gt[:2] = 1
    pred = np.zeros((4, 4), int)
    pred[:1] = 1
    assert avd(pred, gt, 1) == 50.0
    assert math.isnan(avd(pred, np.zeros((4, 4), int), 1))


def test_metrics_match_oracles_on_random_pairs():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        h, w = rng.integers(1, 21, size=2)
        pred = rng.integers(0, 4, size=(h, w))
        gt = rng.integers(0, 4, size=(h, w))
        if rng.random() < 0.3:
            gt = np.where(rng.random((h, w)) < 0.8, pred, gt)
        for c in (1, 2, 3):
            assert dice(pred, gt, c) == dice_oracle(pred, gt, c)
            assert same(avd(pred, gt, c), avd_oracle(pred, gt, c))
            assert same(hd95(pred, gt, c), hd95_oracle(pred, gt, c))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 10 ** 6))
def test_hd95_symmetric(h, w, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2, size=(h, w))
    b = rng.integers(0, 2, size=(h, w))
    assert same(hd95(a, b, 1), hd95(b, a, 1))
    assert 0 <= dice(a, b, 1) <= 1


# -- reports ------------------------------------------------------------------

def _report(name, values):
    n = len(values)
    seg = {t: {"dc": np.full(n, 0.9), "hd": np.full(n, 1.5), "avd": np.array(values)}
           for t in ("GM", "WM", "CSF")}
    return MetricReport(name, np.full(n, 30.0), np.full(n, 0.9), seg)


def test_report_nan_aware_mean():
    rep = _report("m", [1.0, math.nan, 3.0])
    assert rep.mean("avd", "GM") == 2.0
    assert rep.mean("psnr") == 30.0


def test_table_round_trip():
    text = format_table([_report("A", [1.0, 2.0]), _report("B", [math.nan, math.nan])])
    rows = parse_table(text)
    assert rows["A"][0] == pytest.approx(90.0)
    assert rows["A"][2] == pytest.approx(1.5)
    assert math.isnan(rows["B"][2])
    assert "undef" in text


def test_table_literature_rows_parse():
    rows = parse_table(format_table([_report("A", [1.0])], literature=True))
    assert rows["SADFN5+Pre-SegNet"][:3] == list(LITERATURE_SEG_RESULTS["SADFN5+Pre-SegNet"][:3])


def test_csv_has_one_row_per_sample():
    assert len(_report("A", [1.0, 2.0, 3.0]).to_csv().strip().splitlines()) == 4


def test_evaluate_report_identity_segmenter():
    samples = generate_dataset(PhantomConfig(h=32, w=32, seed=5), 3)
    truth = {s.image.tobytes(): s.label for s in samples}

    def segment(img):
        # perfect segmenter on exact inputs, background otherwise
        return truth.get(np.asarray(img, np.float32).tobytes(), np.zeros((32, 32), np.uint8))

    rep = full_sampled_report(segment, samples)
    assert np.all(rep.psnr == math.inf)
    assert rep.mean("dc", "WM") == 1.0
    mask = make_mask_cartesian1d(32, 32, 0.3, seed=1)
    zf = evaluate_report(lambda x0, y, m: x0, segment, samples, mask, "ZF")
    assert zf.mean("psnr") < 40


def test_evaluate_report_empty():
    with pytest.raises(ValueError, match="no samples found"):
        evaluate_report(lambda *a: None, lambda x: x, [], np.ones((4, 4), bool))
