"""Synthetic brain-like phantoms with tissue labels.

Each phantom is a rotated head ellipse split into an outer CSF ring, a
wavy grey-matter ring, a white-matter core and two CSF ventricles. Every
tissue draws its intensities from a single normal distribution; a smooth
low-order multiplicative bias field is applied on top.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .io import FormatError, load_pgm, load_tns, read_config, save_pgm, save_tns, write_config
from .mri import undersample, zero_filled

BG, GM, WM, CSF = 0, 1, 2, 3
CLASS_NAMES = ("BG", "GM", "WM", "CSF")


@dataclass
class Sample:
    image: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.label = np.asarray(self.label, dtype=np.uint8)
        if self.image.shape != self.label.shape:
            raise ValueError(f"image {self.image.shape} and label {self.label.shape} differ")


@dataclass
class PhantomConfig:
    h: int = 64
    w: int = 64
    means: dict = field(default_factory=lambda: {"BG": 0.05, "GM": 0.45, "WM": 0.70,
                                                 "CSF": 0.25})
    sigmas: dict = field(default_factory=lambda: {"BG": 0.03, "GM": 0.03, "WM": 0.03,
                                                  "CSF": 0.03})
    head_radii: tuple = (0.85, 0.93)
    head_aspect: tuple = (0.85, 0.95)
    center_jitter: float = 0.04
    rotation: float = 0.25
    gm_radius: tuple = (0.80, 0.86)
    wm_radius: tuple = (0.50, 0.60)
    bias_amplitude: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.h % 4 or self.w % 4 or self.h <= 0 or self.w <= 0:
            raise ValueError(f"phantom size must be divisible by 4, got {self.h}x{self.w}")
        if set(self.means) != set(CLASS_NAMES) or set(self.sigmas) != set(CLASS_NAMES):
            raise ValueError(f"means and sigmas need entries for {CLASS_NAMES}")
        smax = max(self.sigmas.values())
        for a, b in itertools.combinations(CLASS_NAMES, 2):
            if abs(self.means[a] - self.means[b]) < 2 * smax:
                raise ValueError(f"tissue means {a}={self.means[a]} and {b}={self.means[b]} "
                                 f"are closer than 2*sigma={2 * smax}")
        if not 0 <= self.bias_amplitude < 1:
            raise ValueError("bias_amplitude must lie in [0, 1)")

    def flat(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, dict):
                out.update({f"{k}.{n}": x for n, x in v.items()})
            elif isinstance(v, tuple):
                out[k] = ",".join(str(x) for x in v)
            else:
                out[k] = v
        return out

    @classmethod
    def from_flat(cls, values: dict) -> "PhantomConfig":
        kw: dict = {"means": {}, "sigmas": {}}
        for k, v in values.items():
            if "." in k:
                group, name = k.split(".", 1)
                kw[group][name] = float(v)
            elif isinstance(v, str) and "," in v:
                kw[k] = tuple(float(x) for x in v.split(","))
            else:
                kw[k] = v
        if not kw["means"]:
            del kw["means"]
        if not kw["sigmas"]:
            del kw["sigmas"]
        return cls(**kw)


def _labels(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.h, cfg.w
    v, u = np.meshgrid(np.linspace(-1, 1, w), np.linspace(-1, 1, h))
    cu, cv = rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=2)
    th = rng.uniform(-cfg.rotation, cfg.rotation)
    x = np.cos(th) * (u - cu) + np.sin(th) * (v - cv)
    y = -np.sin(th) * (u - cu) + np.cos(th) * (v - cv)
    a = rng.uniform(*cfg.head_radii)
    b = a * rng.uniform(*cfg.head_aspect)
    rho = np.sqrt((x / a) ** 2 + (y / b) ** 2)
    phi = np.arctan2(y / b, x / a)

    def wavy(radius, depth):
        k = rng.integers(5, 10)
        return rng.uniform(*radius) * (1 + depth * np.sin(k * phi + rng.uniform(0, 2 * np.pi)))

    label = np.full((h, w), BG, dtype=np.uint8)
    label[rho <= 1.0] = CSF
    label[rho <= wavy(cfg.gm_radius, 0.04)] = GM
    label[rho <= wavy(cfg.wm_radius, 0.06)] = WM
    # ventricles
    for side in (-1, 1):
        vx, vy = x / a - 0.05, y / b - side * rng.uniform(0.10, 0.16)
        ea, eb = rng.uniform(0.16, 0.24), rng.uniform(0.05, 0.08)
        label[(vx / ea) ** 2 + (vy / eb) ** 2 <= 1.0] = CSF
    return label


def _bias_field(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    v, u = np.meshgrid(np.linspace(-1, 1, cfg.w), np.linspace(-1, 1, cfg.h))
    basis = np.stack([u, v, u * v, u * u - v * v])
    coef = rng.uniform(-1, 1, size=4)
    field_ = np.tensordot(coef, basis, axes=1)
    peak = np.abs(field_).max()
    if peak > 0:
        field_ = field_ / peak
    return 1.0 + cfg.bias_amplitude * field_


def generate_phantom(cfg: PhantomConfig, index: int) -> Sample:
    """Deterministic in ``(cfg.seed, index)``."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, index])
    label = _labels(cfg, rng)
    means = np.array([cfg.means[n] for n in CLASS_NAMES])
    sigmas = np.array([cfg.sigmas[n] for n in CLASS_NAMES])
    noise = rng.standard_normal(label.shape)
    image = (means[label] + sigmas[label] * noise) * _bias_field(cfg, rng)
    return Sample(np.clip(image, 0.0, 1.0), label)


def generate_dataset(cfg: PhantomConfig, n: int, start: int = 0) -> list[Sample]:
    return [generate_phantom(cfg, start + i) for i in range(n)]


def augment_with(sample: Sample, k: int = 0, flip_h: bool = False,
                 flip_v: bool = False) -> Sample:
    img, lbl = sample.image, sample.label
    if flip_h:
        img, lbl = img[:, ::-1], lbl[:, ::-1]
    if flip_v:
        img, lbl = img[::-1, :], lbl[::-1, :]
    if k % 4:
        img, lbl = np.rot90(img, k), np.rot90(lbl, k)
    return Sample(np.ascontiguousarray(img), np.ascontiguousarray(lbl))


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random flips and 90-degree rotations, applied to image and label alike."""
    square = sample.image.shape[0] == sample.image.shape[1]
    k = int(rng.integers(4)) if square else 2 * int(rng.integers(2))
    flips = rng.random(2) < 0.5
    return augment_with(sample, k, bool(flips[0]), bool(flips[1]))


# -- histogram analysis -------------------------------------------------------

@dataclass
class HistogramTable:
    edges: np.ndarray
    counts: dict[str, np.ndarray]

    def mode_mass(self, column: str, width: int = 5) -> float:
        """Fraction of a column's mass within ``width`` bins centred on its mode."""
        c = self.counts[column]
        total = c.sum()
        if total == 0:
            return 0.0
        m = int(np.argmax(c))
        half = width // 2
        return float(c[max(0, m - half):m + half + 1].sum() / total)

    def to_text(self) -> str:
        cols = list(CLASS_NAMES) + ["Whole"]
        lines = ["\t".join(["bin_lo", "bin_hi"] + cols)]
        for i in range(len(self.edges) - 1):
            cells = [f"{self.edges[i]:.6f}", f"{self.edges[i + 1]:.6f}"]
            cells += [str(int(self.counts[c][i])) for c in cols]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "HistogramTable":
        rows = [line.split("\t") for line in text.strip().splitlines()]
        header, body = rows[0], rows[1:]
        if header[:2] != ["bin_lo", "bin_hi"]:
            raise FormatError("histogram table must start with bin_lo, bin_hi columns")
        lo = np.array([float(r[0]) for r in body])
        hi = np.array([float(r[1]) for r in body])
        counts = {name: np.array([int(r[i + 2]) for r in body])
                  for i, name in enumerate(header[2:])}
        return cls(np.append(lo, hi[-1]), counts)


def tissue_histograms(samples, mask=None, bins: int = 32,
                      value_range: tuple[float, float] | None = None) -> HistogramTable:
    """Per-class intensity histograms of the images, or of their zero-filled
    reconstructions when a mask is given. The Whole column is the bin-wise
    sum of the four class columns."""
    if not samples:
        raise ValueError("no samples given")
    if bins < 2:
        raise ValueError("need at least 2 bins")
    images = []
    for s in samples:
        img = s.image if mask is None else zero_filled(undersample(s.image, mask))
        images.append(np.asarray(img, dtype=np.float64))
    if value_range is None:
        lo = min(float(i.min()) for i in images)
        hi = max(float(i.max()) for i in images)
        value_range = (lo, hi if hi > lo else lo + 1.0)
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    counts = {name: np.zeros(bins, dtype=np.int64) for name in CLASS_NAMES}
    for img, s in zip(images, samples):
        vals = np.clip(img, value_range[0], value_range[1])
        for c, name in enumerate(CLASS_NAMES):
            counts[name] += np.histogram(vals[s.label == c], bins=edges)[0]
    counts["Whole"] = sum(counts[n] for n in CLASS_NAMES)
    return HistogramTable(edges, counts)


# -- dataset directories ------------------------------------------------------

def dataset_save(samples, directory, config: PhantomConfig | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if not samples:
        raise ValueError("refusing to save an empty dataset")
    h, w = samples[0].image.shape
    manifest = {"count": len(samples), "height": h, "width": w}
    if config is not None:
        manifest.update({f"config.{k}": v for k, v in config.flat().items()})
    for i, s in enumerate(samples):
        save_tns(d / f"img_{i:04d}.tns", s.image)
        save_pgm(d / f"lbl_{i:04d}.pgm", s.label)
    write_config(d / "manifest.txt", manifest)


def dataset_load(directory) -> list[Sample]:
    d = Path(directory)
    man_path = d / "manifest.txt"
    if not man_path.exists():
        raise FormatError(f"no samples found: missing {man_path}")
    manifest = read_config(man_path)
    if "count" not in manifest:
        raise FormatError(f"{man_path}: no 'count' entry")
    count = int(manifest["count"])
    present = len(list(d.glob("img_*.tns")))
    if present != count:
        raise FormatError(f"{man_path} lists {count} samples but {present} image files exist")
    out = []
    for i in range(count):
        img_path, lbl_path = d / f"img_{i:04d}.tns", d / f"lbl_{i:04d}.pgm"
        for p in (img_path, lbl_path):
            if not p.exists():
                raise FormatError(f"missing dataset file {p}")
        lbl = load_pgm(lbl_path)
        if lbl.max(initial=0) > 3:
            raise FormatError(f"{lbl_path}: label values must lie in 0..3")
        out.append(Sample(load_tns(img_path), lbl))
    return out


def dataset_config(directory) -> PhantomConfig | None:
    manifest = read_config(Path(directory) / "manifest.txt")
    flat = {k[len("config."):]: v for k, v in manifest.items() if k.startswith("config.")}
    return PhantomConfig.from_flat(flat) if flat else None
