"""Named parameter storage shared by the backbone, head and adapters."""

from __future__ import annotations

import hashlib
from collections.abc import MutableMapping
from typing import Iterable, Iterator

import numpy as np

from .errors import CheckpointError
from .numcore import Tensor


class ParamStore(MutableMapping):
    """Insertion-ordered map from hierarchical name to ``Tensor``.

    A tensor's ``requires_grad`` flag doubles as its trainable mask.
    """

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()):
        self._tensors: dict[str, Tensor] = {}
        for name, t in items:
            self[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __setitem__(self, name: str, value) -> None:
        self._tensors[name] = value if isinstance(value, Tensor) else Tensor(value)

    def __delitem__(self, name: str) -> None:
        del self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self):
        return f"ParamStore({len(self)} tensors, {self.count()} values)"

    def count(self, names: Iterable[str] | None = None) -> int:
        names = self._tensors if names is None else names
        return int(sum(self._tensors[n].size for n in names))

    def shapes(self) -> dict[str, tuple]:
        return {n: t.shape for n, t in self._tensors.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        """Read-only copies of every tensor's values."""
        out = {}
        for name, t in self._tensors.items():
            arr = t.data.copy()
            arr.flags.writeable = False
            out[name] = arr
        return out

    def load(self, values: dict[str, np.ndarray], strict: bool = True) -> None:
        """Overwrite tensor values in place (the Tensor objects stay the same)."""
        if strict and set(values) != set(self._tensors):
            missing = sorted(set(self._tensors) - set(values))
            extra = sorted(set(values) - set(self._tensors))
            raise CheckpointError(f"name mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in values.items():
            t = self._tensors.get(name)
            if t is None:
                raise CheckpointError(f"unexpected tensor {name!r}")
            if t.shape != tuple(arr.shape):
                raise CheckpointError(f"shape mismatch for {name!r}: have {t.shape}, got {tuple(arr.shape)}")
            t.data = np.array(arr, dtype=t.data.dtype)

    def set_trainable(self, names: Iterable[str]) -> None:
        names = set(names)
        for name, t in self._tensors.items():
            t.requires_grad = name in names
            t.grad = None

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._tensors.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def digest(self, name: str) -> str:
        return tensor_digest(self._tensors[name].data)


def tensor_digest(arr: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
