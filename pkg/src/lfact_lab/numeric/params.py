from __future__ import annotations

import math
from typing import Iterator, Mapping

import numpy as np

from .rng import Rng
from .tensor import Tensor


class ParamStore(Mapping[str, Tensor]):
    """Named trainable tensors in insertion order.

    Immutable in spirit: updates produce a new store via :meth:`replace` /
    :meth:`with_arrays`, so tensors already handed to a tape stay valid.
    """

    def __init__(self, items: Mapping[str, Tensor] | None = None):
        self._items: dict[str, Tensor] = dict(items or {})

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def add(self, name: str, value) -> Tensor:
        if name in self._items:
            raise KeyError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        self._items[name] = t
        return t

    def replace(self, name: str, value) -> "ParamStore":
        if name not in self._items:
            raise KeyError(name)
        items = dict(self._items)
        items[name] = value if isinstance(value, Tensor) else Tensor(value)
        return ParamStore(items)

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "ParamStore":
        return ParamStore({k: Tensor(arrays[k]) if k in arrays else t for k, t in self._items.items()})

    def prefixed(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix)
        return {k[n:]: t for k, t in self._items.items() if k.startswith(prefix)}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._items.items()}

    def size(self) -> int:
        return sum(t.data.size for t in self._items.values())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: t.shape for k, t in self._items.items()}


def glorot_init(rng: Rng, rows: int, cols: int) -> Tensor:
    """Uniform in [-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))], row-major draws."""
    if rows < 1 or cols < 1:
        raise ValueError(f"glorot_init needs positive dims, got {rows}x{cols}")
    bound = math.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)))
