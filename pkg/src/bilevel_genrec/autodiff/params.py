from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor


class ParameterSet:
    """Named leaf tensors with gradient accumulators.

    Names iterate in lexicographic order.  Values are never modified in place:
    ``assign`` swaps in a fresh leaf, so graphs built from an earlier value
    stay consistent.
    """

    def __init__(self, values: Mapping[str, np.ndarray]):
        self._values: dict[str, Tensor] = {}
        self._grads: dict[str, np.ndarray] = {}
        for name in sorted(values):
            self._values[name] = self._leaf(name, values[name])
            self._grads[name] = np.zeros_like(self._values[name].data)

    @staticmethod
    def _leaf(name, value) -> Tensor:
        arr = np.array(value, dtype=np.float64, copy=True)
        arr.flags.writeable = False
        return Tensor(arr, requires_grad=True, name=name)

    def __getitem__(self, name: str) -> Tensor:
        return self._values[name]

    def get(self, name: str, default=None):
        return self._values.get(name, default)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def tensors(self) -> dict[str, Tensor]:
        return dict(self._values)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._values.items()}

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._values.items()}

    def num_elements(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return self._grads

    def assign(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._values[name].shape:
            raise ValueError(f"{name}: shape {value.shape} != {self._values[name].shape}")
        self._values[name] = self._leaf(name, value)

    def update(self, values: Mapping[str, np.ndarray]) -> None:
        for name, value in values.items():
            self.assign(name, value)

    def zero_grad(self) -> None:
        for name, g in self._grads.items():
            self._grads[name] = np.zeros_like(g)

    def accumulate(self, grads: Mapping[str, Tensor | np.ndarray]) -> None:
        for name, g in grads.items():
            g = g.data if isinstance(g, Tensor) else np.asarray(g)
            if g.shape != self._grads[name].shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != {self._grads[name].shape}")
            self._grads[name] = self._grads[name] + g

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.arrays())

    # flat views are convenient for finite differences and hashing
    def flatten(self) -> np.ndarray:
        return np.concatenate([v.data.reshape(-1) for v in self._values.values()]) if self._values else np.zeros(0)

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, offset = {}, 0
        for name, v in self._values.items():
            out[name] = np.asarray(flat[offset:offset + v.size]).reshape(v.shape)
            offset += v.size
        return out

    def equals(self, other: "ParameterSet") -> bool:
        """Bitwise equality of names and values."""
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n].data, other[n].data) for n in self)
