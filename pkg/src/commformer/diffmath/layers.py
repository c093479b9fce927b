"""Small parameterized building blocks registered into a ParameterStore."""

from __future__ import annotations

import math

import numpy as np

from commformer.diffmath.functional import gelu, layer_norm
from commformer.diffmath.params import ParameterStore, orthogonal
from commformer.diffmath.tensor import Tensor

RELU_GAIN = math.sqrt(2.0)


class Linear:
    def __init__(
        self,
        store: ParameterStore,
        name: str,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        gain: float = 1.0,
        bias: bool = True,
        dtype=np.float64,
    ):
        self.weight = store.add(f"{name}.weight", orthogonal((in_dim, out_dim), gain, rng, dtype))
        self.bias = store.add(f"{name}.bias", np.zeros(out_dim, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, dim: int, dtype=np.float64):
        self.scale = store.add(f"{name}.scale", np.ones(dim, dtype=dtype))
        self.shift = store.add(f"{name}.shift", np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x) * self.scale + self.shift


class MLP:
    """Linear -> GELU -> Linear, width preserving."""

    def __init__(self, store: ParameterStore, name: str, dim: int, rng: np.random.Generator, dtype=np.float64):
        self.fc1 = Linear(store, f"{name}.fc1", dim, dim, rng, gain=RELU_GAIN, dtype=dtype)
        self.fc2 = Linear(store, f"{name}.fc2", dim, dim, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))
