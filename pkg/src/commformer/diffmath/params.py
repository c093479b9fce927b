"""Named parameter storage and initializers."""

from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from commformer.diffmath.tensor import Tensor
from commformer.errors import CheckpointError, ShapeError


class ParameterStore:
    """Ordered mapping from dotted parameter path to a differentiable Tensor.

    Iteration order is insertion order, which is also the order used by
    checkpoints and by the optimizers.  Views produced by :meth:`subset`
    share the underlying tensors.
    """

    def __init__(self, params: Mapping[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, tensor in (params or {}).items():
            self.register(name, tensor)

    def add(self, name: str, value, dtype=None) -> Tensor:
        return self.register(name, Tensor(value, requires_grad=True, dtype=dtype))

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def subset(self, prefix: str) -> "ParameterStore":
        view = ParameterStore()
        view._params = {k: v for k, v in self._params.items() if k.startswith(prefix)}
        return view

    def merged(self, *others: "ParameterStore") -> "ParameterStore":
        view = ParameterStore()
        view._params = dict(self._params)
        for other in others:
            for name, tensor in other.items():
                if name in view._params and view._params[name] is not tensor:
                    raise KeyError(f"conflicting parameter {name!r}")
                view._params[name] = tensor
        return view

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def num_elements(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        missing = [n for n in self._params if n not in state]
        extra = [n for n in state if n not in self._params]
        if strict and (missing or extra):
            raise CheckpointError(f"parameter mismatch: missing={missing} unexpected={extra}")
        for name, tensor in self._params.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} != {tensor.shape}")
            tensor.data = value.astype(tensor.dtype, copy=True)

    def astype(self, dtype) -> None:
        for tensor in self._params.values():
            tensor.data = tensor.data.astype(dtype)
            tensor.grad = None


def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Orthogonal matrix (semi-orthogonal when not square) scaled by ``gain``."""
    rows, cols = shape
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return (gain * q[:rows, :cols]).astype(dtype)
