"""First-order optimizers operating on a ParameterStore."""

from __future__ import annotations

import math

import numpy as np

from commformer.diffmath.params import ParameterStore
from commformer.errors import NumericError


def global_grad_norm(store: ParameterStore) -> float:
    total = 0.0
    for tensor in store.values():
        if tensor.grad is not None:
            total += float(np.sum(tensor.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(store: ParameterStore, max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    norm = global_grad_norm(store)
    if not math.isfinite(norm):
        bad = [n for n, t in store.items() if t.grad is not None and not np.all(np.isfinite(t.grad))]
        raise NumericError(f"non-finite gradients in {bad}")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for tensor in store.values():
            if tensor.grad is not None:
                tensor.grad = tensor.grad * scale
    return norm


class SGD:
    def __init__(self, store: ParameterStore, lr: float):
        self.store = store
        self.lr = lr

    def step(self) -> None:
        for tensor in self.store.values():
            if tensor.grad is not None:
                tensor.data = tensor.data - self.lr * tensor.grad

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state) -> None:
        pass


class Adam:
    def __init__(
        self,
        store: ParameterStore,
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-5,
        weight_decay: float = 0.0,
    ):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self.m = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.items()}

    def step(self) -> None:
        self.steps += 1
        c1 = 1.0 - self.beta1**self.steps
        c2 = 1.0 - self.beta2**self.steps
        for name, tensor in self.store.items():
            g = tensor.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * tensor.data
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            tensor.data = (tensor.data - update).astype(tensor.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"steps": np.array(self.steps, dtype=np.int64)}
        for name in self.m:
            state[f"m.{name}"] = self.m[name]
            state[f"v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state) -> None:
        self.steps = int(state["steps"])
        for name in self.m:
            self.m[name] = np.array(state[f"m.{name}"], dtype=self.m[name].dtype)
            self.v[name] = np.array(state[f"v.{name}"], dtype=self.v[name].dtype)
