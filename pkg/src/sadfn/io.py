"""File formats: ``.tns`` tensors, binary PGM grids and ``key = value`` configs."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

TNS_MAGIC = b"TNS1"


class FormatError(ValueError):
    pass


def save_tns(path, array) -> None:
    """Write ``TNS1``, u32 rank, u32 dims, then little-endian float32 row-major."""
    arr = np.asarray(array, dtype="<f4")
    header = TNS_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def load_tns(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read tensor file {path}: {exc.strerror}") from None
    if raw[:4] != TNS_MAGIC or len(raw) < 8:
        raise FormatError(f"{path}: not a TNS1 tensor file")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if len(raw) < 8 + 4 * rank:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    body = raw[8 + 4 * rank:]
    count = int(np.prod(dims, dtype=np.int64))
    if len(body) != 4 * count:
        raise FormatError(f"{path}: expected {count} float32 values, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(dims).astype(np.float32)


def save_complex_tns(path, grid: np.ndarray) -> None:
    """Complex grids are stored with a trailing (real, imag) channel."""
    save_tns(path, np.stack([grid.real, grid.imag], axis=-1))


def load_complex_tns(path) -> np.ndarray:
    arr = load_tns(path)
    if arr.shape[-1] != 2:
        raise FormatError(f"{path}: complex tensor needs a trailing channel of size 2")
    return arr[..., 0].astype(np.float64) + 1j * arr[..., 1].astype(np.float64)


def save_pgm(path, grid) -> None:
    """Binary P5 greymap, maxval 255."""
    g = np.asarray(grid)
    if g.ndim != 2:
        raise ValueError(f"PGM needs a 2-D grid, got shape {g.shape}")
    if g.min(initial=0) < 0 or g.max(initial=0) > 255:
        raise ValueError("PGM values must lie in 0..255")
    h, w = g.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + g.astype(np.uint8).tobytes())


def load_pgm(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read PGM file {path}: {exc.strerror}") from None
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError(f"{path}: 16-bit PGM not supported")
    body = raw[pos + 1:]
    if len(body) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixels, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = _parse_value(value)
    return out


def write_config(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
