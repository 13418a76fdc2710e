"""Fourier measurement model: unitary FFT, sampling masks, zero-filled
reconstruction and the data-fidelity projection.

k-space grids are complex128 arrays in unshifted layout (DC at index 0,0).
All masks are conjugate-symmetric (a frequency is sampled iff its mirror
is), so measurements of a real image stay Hermitian and the data-fidelity
output of a real image keeps exactly the measured coefficients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core.tensor import ShapeError, Tensor
from .io import FormatError, load_pgm, save_pgm

CENTER_BAND_FRACTION = 0.08


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def fft2(img) -> np.ndarray:
    """Unitary 2-D DFT over the last two axes."""
    a = np.asarray(img)
    if a.ndim < 2 or a.shape[-1] == 0 or a.shape[-2] == 0:
        raise ShapeError(f"fft2 needs a non-empty grid, got shape {a.shape}")
    return np.fft.fft2(a, norm="ortho")


def ifft2(k) -> np.ndarray:
    a = np.asarray(k)
    if a.ndim < 2 or a.shape[-1] == 0 or a.shape[-2] == 0:
        raise ShapeError(f"ifft2 needs a non-empty grid, got shape {a.shape}")
    return np.fft.ifft2(a, norm="ortho")


def centered(grid: np.ndarray) -> np.ndarray:
    """Move DC to the grid centre, for display only."""
    return np.fft.fftshift(grid, axes=(-2, -1))


@dataclass
class SamplingMask:
    grid: np.ndarray
    kind: str
    fraction: float
    seed: int

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        if self.grid.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {self.grid.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def sampled_fraction(self) -> float:
        return float(self.grid.mean())

    def rows(self) -> np.ndarray:
        """Indices of fully sampled rows."""
        return np.flatnonzero(self.grid.all(axis=1))

    def save(self, path) -> None:
        path = Path(path)
        save_pgm(path, self.grid.astype(np.uint8) * 255)
        path.with_suffix(".txt").write_text(f"{self.kind} {self.fraction!r} {self.seed}\n")

    @classmethod
    def load(cls, path) -> "SamplingMask":
        path = Path(path)
        grid = load_pgm(path)
        meta = path.with_suffix(".txt")
        if not meta.exists():
            raise FormatError(f"missing mask sidecar {meta}")
        parts = meta.read_text().split()
        if len(parts) != 3:
            raise FormatError(f"{meta}: expected 'kind fraction seed'")
        return cls(grid == 255, parts[0], float(parts[1]), int(parts[2]))


def _mask_grid(mask) -> np.ndarray:
    return mask.grid if isinstance(mask, SamplingMask) else np.asarray(mask, dtype=bool)


def _check_fraction(fraction: float) -> None:
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")


def make_mask_cartesian1d(h: int, w: int, fraction: float, seed: int) -> SamplingMask:
    """Sample ``round(fraction*h)`` full rows (phase-encode lines).

    A centred low-frequency band of about 8% of the rows is always taken;
    the rest are drawn as mirror pairs ``{r, h-r}`` uniformly without
    replacement, with the Nyquist row filling an odd remainder.
    """
    _check_fraction(fraction)
    if h % 2 or w % 2:
        raise ShapeError(f"mask dimensions must be even, got {h}x{w}")
    n = max(1, _round_half_up(fraction * h))
    band = max(1, _round_half_up(CENTER_BAND_FRACTION * h))
    # odd band keeps it symmetric about DC
    if band % 2 == 0:
        band = band + 1 if band + 1 <= n else band - 1
    if band > n:
        warnings.warn(f"centre band of {band} rows exceeds the budget of {n}; shrinking",
                      stacklevel=2)
        band = n if n % 2 else n - 1
    half = (band - 1) // 2
    rows = {0} | {r % h for k in range(1, half + 1) for r in (k, -k)}

    remaining = n - len(rows)
    if remaining % 2:
        rows.add(h // 2)
        remaining -= 1
    pool = np.arange(half + 1, h // 2)
    rng = np.random.default_rng(seed)
    picks = rng.choice(pool, size=remaining // 2, replace=False)
    for r in picks:
        rows.update((int(r), h - int(r)))

    grid = np.zeros((h, w), dtype=bool)
    grid[sorted(rows)] = True
    return SamplingMask(grid, "cartesian1d", fraction, seed)


def make_mask_random2d(h: int, w: int, fraction: float, seed: int) -> SamplingMask:
    """Sample ``round(fraction*h*w)`` positions uniformly, DC always on."""
    _check_fraction(fraction)
    if h % 2 or w % 2:
        raise ShapeError(f"mask dimensions must be even, got {h}x{w}")
    n = max(1, _round_half_up(fraction * h * w))
    rng = np.random.default_rng(seed)
    grid = np.zeros((h, w), dtype=bool)
    grid[0, 0] = True
    rest = n - 1
    # self-mirrored frequencies other than DC absorb parity (and the last
    # few samples when nearly everything is taken)
    n_pairs = (h * w - 4) // 2
    n_single = rest % 2
    while (rest - n_single) // 2 > n_pairs:
        n_single += 2
    singles = [(0, w // 2), (h // 2, 0), (h // 2, w // 2)]
    for i in rng.choice(len(singles), size=n_single, replace=False):
        grid[singles[i]] = True
    rest -= n_single

    u, v = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    lin = u * w + v
    partner = ((-u) % h) * w + (-v) % w
    reps = lin[lin < partner]
    picks = rng.choice(reps, size=rest // 2, replace=False)
    flat = grid.reshape(-1)
    flat[picks] = True
    flat[partner.reshape(-1)[picks]] = True
    return SamplingMask(grid, "random2d", fraction, seed)


def make_mask(kind: str, h: int, w: int, fraction: float, seed: int) -> SamplingMask:
    if kind == "cartesian1d":
        return make_mask_cartesian1d(h, w, fraction, seed)
    if kind == "random2d":
        return make_mask_random2d(h, w, fraction, seed)
    raise ValueError(f"unknown mask kind {kind!r}")


def full_mask(h: int, w: int) -> SamplingMask:
    return SamplingMask(np.ones((h, w), dtype=bool), "full", 1.0, 0)


def undersample(x, mask) -> np.ndarray:
    """``y = mask * fft2(x)`` for a real image (or stack of images)."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    m = _mask_grid(mask)
    if arr.shape[-2:] != m.shape:
        raise ShapeError(f"image {arr.shape} does not match mask {m.shape}")
    return np.where(m, fft2(arr.astype(np.float64)), 0)


def zero_filled(y, mask=None) -> np.ndarray:
    """Adjoint reconstruction ``Re(ifft2(y))``."""
    return ifft2(np.asarray(y)).real


def data_fidelity(x: Tensor, y: np.ndarray, mask) -> Tensor:
    """Replace the sampled k-space coefficients of ``x`` by the measurements.

    ``x`` may be ``(H,W)``, ``(N,H,W)`` or channels-last with a single channel.
    """
    m = _mask_grid(mask)
    chan = x.ndim >= 3 and x.shape[-1] == 1 and x.shape[-3:-1] == m.shape
    img = x.data[..., 0] if chan else x.data
    if img.shape[-2:] != m.shape:
        raise ShapeError(f"image {x.shape} does not match mask {m.shape}")
    y = np.asarray(y)
    if y.shape[-2:] != m.shape:
        raise ShapeError(f"measurements {y.shape} do not match mask {m.shape}")
    if np.any(y[..., ~m] != 0):
        raise ValueError("measurements are nonzero outside the sampling mask")

    k = fft2(img.astype(np.float64))
    out = ifft2(np.where(m, y, k)).real.astype(x.dtype)
    if chan:
        out = out[..., None]

    def backward(g):
        gi = g[..., 0] if chan else g
        gk = np.where(m, 0, fft2(gi.astype(np.float64)))
        gx = ifft2(gk).real.astype(x.dtype)
        return (gx[..., None] if chan else gx,)

    return Tensor.from_op(out, (x,), backward, "data_fidelity")
