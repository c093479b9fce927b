"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from commformer.diffmath.params import ParameterStore
from commformer.diffmath.tensor import Tensor, no_grad
from commformer.errors import GradcheckError


@dataclass
class GradcheckReport:
    max_rel_error: float
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)
    entries_checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def worst(self) -> tuple[str, float]:
        if not self.per_param:
            return ("", 0.0)
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]


def _evaluate(f: Callable[[], Tensor]) -> float:
    value = f()
    scalar = value.item() if isinstance(value, Tensor) else float(value)
    if not math.isfinite(scalar):
        raise GradcheckError(f"loss evaluated to {scalar}")
    return scalar


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``|a - n| / max(|a|, |n|, floor)`` using L2 norms over the whole tensor."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return diff / scale


def gradcheck(
    f: Callable[[], Tensor],
    params: ParameterStore,
    step: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> GradcheckReport:
    """Compare backprop gradients of scalar ``f()`` against central differences.

    The error for each parameter tensor is :func:`relative_error` between the
    analytic and numeric gradients over the checked entries; the report's
    ``max_rel_error`` is the maximum over tensors.  ``max_entries`` caps the
    number of randomly chosen entries per tensor.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)

    params.zero_grad()
    loss = f()
    if not math.isfinite(loss.item()):
        raise GradcheckError(f"loss evaluated to {loss.item()}")
    if loss.requires_grad:
        loss.backward()

    report = GradcheckReport(max_rel_error=0.0, tol=tol)
    with no_grad():
        for name, tensor in params.items():
            analytic_full = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            flat_count = tensor.size
            if max_entries is not None and flat_count > max_entries:
                picks = np.sort(rng.choice(flat_count, size=max_entries, replace=False))
            else:
                picks = np.arange(flat_count)
            analytic = analytic_full.reshape(-1)[picks].astype(np.float64)
            numeric = np.empty_like(analytic)
            original = tensor.data
            for slot, flat_index in enumerate(picks):
                index = np.unravel_index(flat_index, tensor.shape)
                bumped = original.copy()
                bumped[index] = original[index] + step
                tensor.data = bumped
                plus = _evaluate(f)
                bumped[index] = original[index] - step
                minus = _evaluate(f)
                numeric[slot] = (plus - minus) / (2.0 * step)
            tensor.data = original
            err = relative_error(analytic, numeric, floor)
            report.per_param[name] = err
            report.entries_checked += len(picks)
            report.max_rel_error = max(report.max_rel_error, err)
    params.zero_grad()
    return report
