from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError, Tensor


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, eps: float,
                   coords: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. entries of ``t``."""
    flat = t.data.reshape(-1)
    out = np.zeros(flat.size)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = float(fn().data)
        flat[i] = old - eps
        fm = float(fn().data)
        flat[i] = old
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(t.shape)


def grad_check(fn: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor],
               eps: float = 1e-4, tol: float | None = None,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` is called with the input tensors and must return a scalar. The
    inputs are promoted to float64 in place for the duration of the check.
    With ``max_coords`` only a random subset of each input's entries is
    perturbed. If ``tol`` is given, exceeding it raises ``AssertionError``.
    """
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for t in inputs:
        t.data = t.data.astype(np.float64)
        t.requires_grad = True
        t.grad = None

    loss = fn(*inputs)
    if loss.size != 1:
        raise ShapeError(f"grad_check needs a scalar loss, got shape {loss.shape}")
    loss.backward()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, t in enumerate(inputs):
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        fd = numerical_grad(lambda: fn(*inputs), t, eps, coords).reshape(-1)
        an = (t.grad if t.grad is not None else np.zeros(t.shape)).reshape(-1)
        if coords is not None:
            fd, an = fd[coords], an[coords]
        rel = np.abs(an - fd) / np.maximum(np.maximum(np.abs(an), np.abs(fd)), 1e-8)
        if rel.size and rel.max() > worst:
            worst = float(rel.max())
        if tol is not None and worst > tol:
            i = int(rel.argmax())
            raise AssertionError(f"gradient mismatch on input {k} entry {i}: "
                                 f"analytic {an[i]:.6g} vs numeric {fd[i]:.6g}")
    return worst
