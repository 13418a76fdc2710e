"""Layer primitives on channels-last tensors.

All functions accept ``(H, W, C)`` or batched ``(N, H, W, C)`` tensors and
return the same rank they were given. Convolution weights are laid out as
``(k, k, C_in, C_out)``.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, reshape


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 4:
        return x, False
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    raise ShapeError(f"expected (H,W,C) or (N,H,W,C), got shape {x.shape}")


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return reshape(x, x.shape[1:]) if squeeze else x


def _shifts(k: int):
    return [(a, b) for a in range(k) for b in range(k)]


# Two equivalent kernels. im2col packs k*k shifted copies side by side, which
# is cheap for thin inputs; wider inputs run one matmul per kernel tap and add
# the results into shifted windows of a padded output, avoiding the
# interleaved copy.
SHIFT_PATH_MIN_CHANNELS = 8


def _conv_im2col(x, weight, bias, p):
    n, h, w, c = x.shape
    k, cout = weight.shape[0], weight.shape[-1]
    if k == 1:
        cols = x.data.reshape(-1, c)
    else:
        xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
        cols = np.concatenate([xp[:, a:a + h, b:b + w, :] for a, b in _shifts(k)], axis=-1)
        cols = cols.reshape(-1, k * k * c)
    wmat = weight.data.reshape(-1, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, h, w, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = g2 @ wmat.T
            if k == 1:
                gx = dcols.reshape(x.shape)
            else:
                dcols = dcols.reshape(n, h, w, k * k, c)
                gxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
                for i, (a, b) in enumerate(_shifts(k)):
                    gxp[:, a:a + h, b:b + w, :] += dcols[:, :, :, i, :]
                gx = gxp[:, p:p + h, p:p + w, :]
        return gx, gw, gb

    return out, backward


def _conv_shift(x, weight, bias, p):
    n, h, w, c = x.shape
    k, cout = weight.shape[0], weight.shape[-1]
    xf = x.data.reshape(-1, c)
    outp = np.zeros((n, h + 2 * p, w + 2 * p, cout), dtype=np.result_type(x.data, weight.data))
    for a, b in _shifts(k):
        z = (xf @ weight.data[a, b]).reshape(n, h, w, cout)
        outp[:, 2 * p - a:2 * p - a + h, 2 * p - b:2 * p - b + w, :] += z
    out = outp[:, p:p + h, p:p + w, :]
    if bias is not None:
        out = out + bias.data
    else:
        out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        need_w = weight.requires_grad
        xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if need_w else None
        if need_w:
            gw = np.empty(weight.shape, dtype=weight.dtype)
        gxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype) if x.requires_grad else None
        for a, b in _shifts(k):
            if need_w:
                gw[a, b] = xp[:, a:a + h, b:b + w, :].reshape(-1, c).T @ g2
            if gxp is not None:
                gxp[:, a:a + h, b:b + w, :] += (g2 @ weight.data[a, b].T).reshape(n, h, w, c)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if gxp is not None:
            gx = gxp[:, p:p + h, p:p + w, :]
        return gx, gw, gb

    return out, backward


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Stride-1 convolution with zero same-padding (cross-correlation form)."""
    if stride != 1:
        raise ValueError("conv2d supports stride 1 only; use conv2d_strided2")
    k, k2, cin, cout = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square and odd, got {weight.shape[:2]}")
    x, squeeze = _batched(x)
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels but weights expect {cin} "
                         f"(input {x.shape}, weights {weight.shape})")
    if h == 0 or w == 0:
        raise ShapeError(f"conv2d: empty input {x.shape}")

    p = k // 2
    if k > 1 and c >= SHIFT_PATH_MIN_CHANNELS:
        out, backward = _conv_shift(x, weight, bias, p)
    else:
        out, backward = _conv_im2col(x, weight, bias, p)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _unbatched(Tensor.from_op(out, parents, backward, "conv2d"), squeeze)


# Stride-2 pair. The strided convolution reads input rows 2i-1, 2i, 2i+1 for
# output row i; the transposed convolution scatters along the same taps, so
# the two are exact adjoints for a shared weight tensor.

def _gather_s2(xd: np.ndarray, h: int, w: int) -> np.ndarray:
    """(N,2h,2w,C) -> (N,h,w,3,3,C) strided 3x3 patches with one leading pad."""
    xp = np.pad(xd, ((0, 0), (1, 0), (1, 0), (0, 0)))
    return np.stack(
        [np.stack([xp[:, a:a + 2 * h:2, b:b + 2 * w:2, :] for b in range(3)], axis=3)
         for a in range(3)], axis=3)


def _scatter_s2(t: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of ``_gather_s2``: (N,h,w,3,3,C) -> (N,2h,2w,C)."""
    n, c = t.shape[0], t.shape[-1]
    out = np.zeros((n, 2 * h + 1, 2 * w + 1, c), dtype=t.dtype)
    for a in range(3):
        for b in range(3):
            out[:, a:a + 2 * h:2, b:b + 2 * w:2, :] += t[:, :, :, a, b, :]
    return out[:, 1:, 1:, :]


def conv2d_strided2(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 stride-2 convolution ``(2H,2W,C_out) -> (H,W,C_in)``.

    Uses the transposed-convolution weight layout ``(3,3,C_in,C_out)``; it is
    the adjoint of :func:`conv2d_transposed` with the same weights.
    """
    x, squeeze = _batched(x)
    n, h2, w2, c = x.shape
    if weight.shape[:2] != (3, 3) or weight.shape[3] != c:
        raise ShapeError(f"conv2d_strided2: weights {weight.shape} vs input {x.shape}")
    if h2 % 2 or w2 % 2:
        raise ShapeError(f"conv2d_strided2 needs even spatial dims, got {h2}x{w2}")
    h, w = h2 // 2, w2 // 2
    patches = _gather_s2(x.data, h, w)
    out = np.einsum("nhwabd,abcd->nhwc", patches, weight.data, optimize=True)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = _scatter_s2(np.einsum("nhwc,abcd->nhwabd", g, weight.data, optimize=True), h, w)
        if weight.requires_grad:
            gw = np.einsum("nhwc,nhwabd->abcd", g, patches, optimize=True)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _unbatched(Tensor.from_op(out.astype(x.dtype, copy=False), parents, backward,
                                     "conv2d_strided2"), squeeze)


def conv2d_transposed(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                      stride: int = 2) -> Tensor:
    """3x3 transposed convolution doubling the spatial size."""
    if stride != 2:
        raise ValueError("conv2d_transposed supports stride 2 only")
    if weight.shape[:2] != (3, 3):
        raise ShapeError(f"conv2d_transposed needs a 3x3 kernel, got {weight.shape[:2]}")
    x, squeeze = _batched(x)
    n, h, w, c = x.shape
    if weight.shape[2] != c:
        raise ShapeError(f"conv2d_transposed: input has {c} channels, weights {weight.shape}")
    t = np.einsum("nhwc,abcd->nhwabd", x.data, weight.data, optimize=True)
    out = _scatter_s2(t, h, w)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = gw = gb = None
        patches = _gather_s2(g, h, w)
        if x.requires_grad:
            gx = np.einsum("nhwabd,abcd->nhwc", patches, weight.data, optimize=True)
        if weight.requires_grad:
            gw = np.einsum("nhwc,nhwabd->abcd", x.data, patches, optimize=True)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _unbatched(Tensor.from_op(out.astype(x.dtype, copy=False), parents, backward,
                                     "conv2d_transposed"), squeeze)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first
    element of the window in row-major order."""
    x, squeeze = _batched(x)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = (x.data.reshape(n, h // 2, 2, w // 2, 2, c)
           .transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = (gw.reshape(n, h // 2, w // 2, c, 2, 2)
              .transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c))
        return (gx,)

    return _unbatched(Tensor.from_op(out, (x,), backward, "maxpool2"), squeeze)


def bilinear_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """(2n, n) interpolation matrix, half-pixel centers, edge-clamped."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n - 1)
        i0 = int(np.floor(src))
        frac = src - i0
        i1 = min(i0 + 1, n - 1)
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def upsample_bilinear2x(x: Tensor) -> Tensor:
    x, squeeze = _batched(x)
    n, h, w, c = x.shape
    uh = bilinear_matrix(h, x.dtype)
    uw = bilinear_matrix(w, x.dtype)
    out = np.einsum("ih,nhwc,jw->nijc", uh, x.data, uw, optimize=True)

    def backward(g):
        return (np.einsum("ih,nijc,jw->nhwc", uh, g, uw, optimize=True),)

    return _unbatched(Tensor.from_op(out, (x,), backward, "upsample_bilinear2x"), squeeze)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def identity(x: Tensor) -> Tensor:
    return x


def softmax_channels(x: Tensor) -> Tensor:
    if x.shape[-1] == 0:
        raise ShapeError("softmax over zero channels")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(s, (x,), backward, "softmax")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_channels: spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return Tensor.from_op(out, (a, b), lambda g: (g[..., :ca], g[..., ca:]), "concat")


def split_channels(x: Tensor, sizes) -> list[Tensor]:
    """Inverse of repeated ``concat_channels``; each piece is differentiable."""
    if sum(sizes) != x.shape[-1]:
        raise ShapeError(f"split sizes {sizes} do not sum to {x.shape[-1]}")
    pieces = []
    start = 0
    for size in sizes:
        lo, hi = start, start + size

        def backward(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[..., lo:hi] = g
            return (full,)

        pieces.append(Tensor.from_op(x.data[..., lo:hi], (x,), backward, "split"))
        start = hi
    return pieces


BN_EPS = 1e-5


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.9,
              eps: float = BN_EPS):
    """Per-channel batch normalization.

    Returns ``(out, (new_mean, new_var))``. In training mode the batch
    statistics normalize the input and the returned running statistics are
    the momentum-blended update; the caller decides whether to store them.
    In eval mode the running statistics are used and returned unchanged.
    """
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        new_stats = (momentum * running_mean + (1 - momentum) * mu,
                     momentum * running_var + (1 - momentum) * var)
    else:
        mu, var = running_mean, running_var
        new_stats = (running_mean, running_var)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.astype(x.dtype)) * inv
    out = xhat * gamma.data + beta.data
    m = x.size // x.shape[-1]

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            if training:
                gx = inv / m * (m * dxhat - dxhat.sum(axis=axes)
                                - xhat * (dxhat * xhat).sum(axis=axes))
            else:
                gx = dxhat * inv
        return gx, gg, gb

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward,
                          "batchnorm"), new_stats
