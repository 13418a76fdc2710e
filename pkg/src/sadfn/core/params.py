"""Named collection of learnable tensors with per-entry frozen flags."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered ``name -> Tensor`` map.

    Frozen entries have ``requires_grad`` switched off, so graphs built on
    them record nothing and the optimizer skips them. Non-learnable state
    (batch-norm running statistics) lives in ``buffers``.
    """

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._frozen: set[str] = set()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()

    def add(self, name: str, value, frozen: bool = False) -> Tensor:
        if name in self._params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = not frozen
        self._params[name] = t
        if frozen:
            self._frozen.add(name)
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        if name in self._params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.buffers[name] = np.asarray(value)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"unbound parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def freeze(self, names=None) -> "ParamStore":
        for name in self._params if names is None else names:
            self._frozen.add(name)
            self._params[name].requires_grad = False
        return self

    def unfreeze(self, names=None) -> "ParamStore":
        for name in self._params if names is None else names:
            self._frozen.discard(name)
            self._params[name].requires_grad = True
        return self

    @property
    def all_frozen(self) -> bool:
        return len(self._frozen) == len(self._params)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self._params.items() if k not in self._frozen]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_parameters(self, prefix: str = "") -> int:
        return sum(t.size for k, t in self._params.items() if k.startswith(prefix))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, t in self._params.items():
            out.add(k, Tensor(t.data.copy()), frozen=k in self._frozen)
        for k, b in self.buffers.items():
            out.add_buffer(k, b.copy())
        return out

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for k, t in self._params.items():
            out.add(k, Tensor(t.data.astype(dtype)), frozen=k in self._frozen)
        for k, b in self.buffers.items():
            out.add_buffer(k, b.astype(dtype))
        return out

    def update(self, other: "ParamStore", prefix: str = "") -> None:
        """Add every entry of ``other`` under ``prefix``, keeping frozen flags."""
        for k, t in other.items():
            self.add(prefix + k, Tensor(t.data.copy()), frozen=other.is_frozen(k))
        for k, b in other.buffers.items():
            self.add_buffer(prefix + k, b.copy())

    def equals(self, other: "ParamStore") -> bool:
        """Bit-for-bit equality of names, values and buffers."""
        if self.names() != other.names() or list(self.buffers) != list(other.buffers):
            return False
        same = all(np.array_equal(t.data, other[k].data) and t.dtype == other[k].dtype
                   for k, t in self.items())
        return same and all(np.array_equal(b, other.buffers[k]) for k, b in self.buffers.items())
