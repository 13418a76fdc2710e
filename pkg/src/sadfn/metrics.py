"""Reconstruction (PSNR, SSIM) and segmentation (Dice, HD95, AVD) metrics,
plus per-model report aggregation in the layout of the MRBrainS tables."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.signal import convolve2d
from scipy.spatial import cKDTree

from .core.tensor import ShapeError, Tensor
from .mri import undersample, zero_filled

TISSUES = {"GM": 1, "WM": 2, "CSF": 3}
UNDEFINED = "undef"

# Literature values (Dice %, HD, AVD per tissue) for display next to desk
# results; they are never expected outputs of this package.
LITERATURE_SEG_RESULTS = {
    "ZF+Pre-SegNet": (64.78, 2.587, 6.202, 54.07, 2.085, 4.294, 57.37, 2.221, 4.689),
    "TLMRI+Pre-SegNet": (76.28, 2.093, 3.985, 63.77, 1.870, 3.185, 68.17, 2.072, 3.796),
    "PANO+Pre-SegNet": (83.73, 1.819, 2.958, 75.72, 1.348, 1.815, 78.93, 1.653, 2.361),
    "GBRWT+Pre-SegNet": (83.66, 1.821, 2.937, 76.14, 1.353, 1.783, 79.39, 1.647, 2.342),
    "Pre-RecNet5+Pre-SegNet": (83.63, 1.795, 2.874, 75.16, 1.378, 1.813, 78.99, 1.668, 2.386),
    "SADFN5-WOS+Pre-SegNet": (83.85, 1.782, 2.838, 75.84, 1.357, 1.762, 79.25, 1.661, 2.364),
    "Liu+Pre-SegNet": (84.08, 1.776, 2.814, 76.30, 1.335, 1.724, 79.37, 1.661, 2.357),
    "SADFN5+Pre-SegNet": (85.76, 1.690, 2.579, 81.29, 1.143, 1.381, 80.08, 1.649, 2.305),
    "Full-sampled+Pre-SegNet": (87.30, 1.596, 2.328, 86.89, 0.973, 1.092, 80.76, 1.617, 2.225),
}


def _arr(x) -> np.ndarray:
    a = x.data if isinstance(x, Tensor) else np.asarray(x)
    return a.astype(np.float64)


def psnr(x, ref, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; identical inputs give ``inf``."""
    a, b = _arr(x), _arr(ref)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(x, ref, peak: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5)."""
    a, b = _arr(x), _arr(ref)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"ssim needs two equal 2-D images, got {a.shape} and {b.shape}")
    if min(a.shape) < 11:
        raise ShapeError(f"ssim needs images of at least 11x11, got {a.shape}")
    win = gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    def filt(z):
        return convolve2d(z, win, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def dice(pred, gt, c: int) -> float:
    p, g = np.asarray(pred) == c, np.asarray(gt) == c
    if p.shape != g.shape:
        raise ShapeError(f"dice: shape mismatch {p.shape} vs {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def boundary(region: np.ndarray) -> np.ndarray:
    """Pixels of ``region`` with a 4-neighbour outside it or on the image border."""
    r = np.asarray(region, dtype=bool)
    inner = np.zeros_like(r)
    inner[1:-1, 1:-1] = (r[1:-1, 1:-1] & r[:-2, 1:-1] & r[2:, 1:-1]
                         & r[1:-1, :-2] & r[1:-1, 2:])
    return r & ~inner


def nearest_rank(values: np.ndarray, pct: float) -> float:
    v = np.sort(np.asarray(values))
    rank = max(1, math.ceil(pct / 100.0 * v.size))
    return float(v[rank - 1])


def hd95(pred, gt, c: int, spacing: float = 1.0) -> float:
    """Symmetric 95th-percentile boundary distance; NaN if either region is empty."""
    p, g = np.asarray(pred) == c, np.asarray(gt) == c
    if p.shape != g.shape:
        raise ShapeError(f"hd95: shape mismatch {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        return math.nan
    bp = np.argwhere(boundary(p)).astype(np.float64) * spacing
    bg = np.argwhere(boundary(g)).astype(np.float64) * spacing
    d_pg = cKDTree(bg).query(bp)[0]
    d_gp = cKDTree(bp).query(bg)[0]
    return max(nearest_rank(d_pg, 95), nearest_rank(d_gp, 95))


def avd(pred, gt, c: int) -> float:
    """Absolute volume difference in percent of the ground-truth volume."""
    vp = int((np.asarray(pred) == c).sum())
    vg = int((np.asarray(gt) == c).sum())
    if vg == 0:
        return math.nan
    return abs(vp - vg) / vg * 100.0


@dataclass
class MetricReport:
    name: str
    psnr: np.ndarray
    ssim: np.ndarray
    seg: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return len(self.psnr)

    def mean(self, metric: str, tissue: str | None = None) -> float:
        vals = self._values(metric, tissue)
        finite = vals[~np.isnan(vals)]
        return float(finite.mean()) if finite.size else math.nan

    def std(self, metric: str, tissue: str | None = None) -> float:
        vals = self._values(metric, tissue)
        finite = vals[~np.isnan(vals)]
        if not finite.size or np.isinf(finite).any():
            return math.nan
        return float(finite.std())

    def _values(self, metric, tissue):
        if tissue is None:
            return np.asarray(getattr(self, metric), dtype=np.float64)
        return np.asarray(self.seg[tissue][metric], dtype=np.float64)

    def row(self) -> list[float]:
        out = []
        for t in TISSUES:
            out += [100.0 * self.mean("dc", t), self.mean("hd", t), self.mean("avd", t)]
        return out + [self.mean("psnr"), self.mean("ssim")]

    def to_csv(self) -> str:
        head = ["sample", "psnr", "ssim"] + [f"{t}_{m}" for t in TISSUES
                                              for m in ("dc", "hd", "avd")]
        lines = [",".join(head)]
        for i in range(self.n_samples):
            vals = [self.psnr[i], self.ssim[i]] + [self.seg[t][m][i] for t in TISSUES
                                                   for m in ("dc", "hd", "avd")]
            lines.append(",".join([str(i)] + [_fmt(v, ".6f") for v in vals]))
        return "\n".join(lines) + "\n"


def _fmt(v, spec: str) -> str:
    if isinstance(v, float) and math.isnan(v):
        return UNDEFINED
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return format(v, spec)


TABLE_HEADER = ["Method"] + [f"{t} {m}" for t in TISSUES for m in ("DC%", "HD", "AVD")] \
    + ["PSNR", "SSIM"]


def format_table(reports: Sequence[MetricReport], literature: bool = False) -> str:
    """Tab-separated table: Dice %, HD, AVD for GM/WM/CSF, then PSNR and SSIM."""
    lines = ["\t".join(TABLE_HEADER)]
    for rep in reports:
        r = rep.row()
        cells = [_fmt(v, ".2f" if i % 3 == 0 and i < 9 else ".3f") for i, v in enumerate(r)]
        lines.append("\t".join([rep.name] + cells))
    if literature:
        lines.append("# literature values (240x240 MRBrainS, not reproduced here)")
        for name, vals in LITERATURE_SEG_RESULTS.items():
            lines.append("\t".join([name] + [f"{v:g}" for v in vals] + ["", ""]))
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> dict[str, list[float]]:
    out = {}
    for line in text.splitlines()[1:]:
        if not line or line.startswith("#"):
            continue
        name, *cells = line.split("\t")
        out[name] = [math.nan if c in (UNDEFINED, "") else float(c) for c in cells]
    return out


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SADFN_THREADS", "1")))
    except ValueError:
        return 1


def segmentation_scores(pred, gt, spacing: float = 1.0) -> dict[str, dict[str, float]]:
    return {t: {"dc": dice(pred, gt, c), "hd": hd95(pred, gt, c, spacing),
                "avd": avd(pred, gt, c)} for t, c in TISSUES.items()}


def evaluate_report(reconstruct: Callable, segment: Callable, samples: Sequence, mask,
                    name: str = "model", spacing: float = 1.0) -> MetricReport:
    """Undersample, reconstruct and segment every test sample, then score.

    ``reconstruct(x0, y, mask)`` maps a zero-filled image and its
    measurements to a reconstruction; ``segment(image)`` returns a label
    grid. Samples are processed in order; ``SADFN_THREADS`` caps the
    number of worker threads.
    """
    if not samples:
        raise ValueError("no samples found")

    grid = mask.grid if hasattr(mask, "grid") else np.asarray(mask, dtype=bool)
    complete = bool(grid.all())

    def one(sample):
        y = undersample(sample.image, mask)
        # a complete measurement inverts exactly: F^H F = I
        x0 = np.asarray(sample.image, np.float64) if complete else zero_filled(y, mask)
        rec = np.asarray(reconstruct(x0, y, mask), dtype=np.float64)
        labels = segment(rec)
        return (psnr(rec, sample.image), ssim(rec, sample.image),
                segmentation_scores(labels, sample.label, spacing))

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(one, samples))
    seg = {t: {m: np.array([r[2][t][m] for r in results]) for m in ("dc", "hd", "avd")}
           for t in TISSUES}
    return MetricReport(name, np.array([r[0] for r in results]),
                        np.array([r[1] for r in results]), seg)


def full_sampled_report(segment: Callable, samples: Sequence,
                        name: str = "Full-sampled", spacing: float = 1.0) -> MetricReport:
    """Upper bound: segmentation of the ground-truth images themselves."""
    if not samples:
        raise ValueError("no samples found")
    h, w = samples[0].image.shape
    return evaluate_report(lambda x0, y, m: x0, segment, samples,
                           np.ones((h, w), dtype=bool), name, spacing)
