"""Learnable communication graphs.

Orientation: row ``i`` of an edge matrix lists the agents whose messages
agent ``i`` *receives*; entry ``(i, j) == 1`` lets agent ``i`` attend to agent
``j``.  The diagonal (an agent seeing itself) is always on and is neither
learned nor counted against the per-row budget ``k``.

Hard graphs carry a differentiable companion: during training the forward
value is the hard 0/1 matrix while gradients flow into row-wise softmax
weights of the perturbed logits (straight-through estimator).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from commformer.diffmath import ParameterStore, Tensor, constant, masked_softmax, straight_through
from commformer.errors import NumericError, ShapeError, SparsityError


@dataclass(frozen=True)
class SparsitySpec:
    """Fraction ``S`` of the ``N x N`` budget turned into ``k`` receive-edges per row.

    ``k = max(1, round(S * N))`` with halves rounded up.
    """

    sparsity: float
    n_agents: int

    def __post_init__(self):
        if not (0.0 < self.sparsity <= 1.0):
            raise SparsityError(f"sparsity must lie in (0, 1], got {self.sparsity}")
        if self.n_agents < 2:
            raise SparsityError("a communication graph needs at least 2 agents")
        if self.k >= self.n_agents:
            raise SparsityError(
                f"k={self.k} off-diagonal edges per row impossible with {self.n_agents} agents"
            )

    @property
    def k(self) -> int:
        return max(1, math.floor(self.sparsity * self.n_agents + 0.5))

    @property
    def total_edges(self) -> int:
        return self.k * self.n_agents

    @classmethod
    def from_k(cls, n_agents: int, k: int) -> "SparsitySpec":
        """Smallest sparsity that yields exactly ``k`` edges per row."""
        return cls(sparsity=k / n_agents, n_agents=n_agents)


class AdjacencyLogits:
    """The learnable ``N x N`` edge-score matrix (the upper-level variable)."""

    def __init__(self, store: ParameterStore, n_agents: int, rng: np.random.Generator,
                 init_scale: float = 0.01, name: str = "alpha", dtype=np.float64):
        values = init_scale * rng.standard_normal((n_agents, n_agents))
        np.fill_diagonal(values, 0.0)
        self.alpha = store.add(name, values.astype(dtype))
        self.n_agents = n_agents

    @property
    def values(self) -> np.ndarray:
        return self.alpha.data


@dataclass(frozen=True)
class CommGraph:
    """A hard 0/1 graph, shape ``(N, N)`` or batched ``(B, N, N)``.

    ``soft_weights`` (off-diagonal row softmax, zero diagonal) carries the
    gradient; ``relaxed`` graphs feed the soft weights forward instead of the
    hard edges, which makes the whole loss smooth in the logits.
    """

    edges: np.ndarray
    soft_weights: Tensor | None = None
    relaxed: bool = False
    _tensor: Tensor | None = None

    @property
    def n_agents(self) -> int:
        return self.edges.shape[-1]

    def tensor(self) -> Tensor:
        """Differentiable view used by the attention layers."""
        if self._tensor is not None:
            return self._tensor
        if self.soft_weights is None:
            return constant(self.edges)
        eye = np.eye(self.n_agents, dtype=self.soft_weights.dtype)
        if self.relaxed:
            return self.soft_weights + eye
        return straight_through(self.edges, self.soft_weights)

    def off_diagonal_counts(self) -> np.ndarray:
        eye = np.eye(self.n_agents, dtype=bool)
        return np.where(eye, 0, self.edges).sum(axis=-1)


def _offdiag_mask(n: int) -> np.ndarray:
    return 1.0 - np.eye(n)


def topk_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """0/1 matrix with ones at the ``k`` largest off-diagonal entries per row.

    Ties go to the lower column index.  The diagonal is set to 1.
    """
    n = scores.shape[-1]
    masked = np.where(np.eye(n, dtype=bool), -np.inf, scores)
    order = np.argsort(-masked, axis=-1, kind="stable")[..., :k]
    hard = np.zeros(scores.shape)
    np.put_along_axis(hard, order, 1.0, axis=-1)
    hard[..., np.arange(n), np.arange(n)] = 1.0
    return hard


def _check_logits(alpha: AdjacencyLogits | Tensor, spec: SparsitySpec) -> Tensor:
    a = alpha.alpha if isinstance(alpha, AdjacencyLogits) else alpha
    n = a.shape[-1]
    if a.shape != (n, n):
        raise ShapeError(f"adjacency logits must be square, got {a.shape}")
    if spec.n_agents != n:
        raise ShapeError(f"sparsity spec is for {spec.n_agents} agents, logits for {n}")
    if spec.k >= n:
        raise SparsityError(f"k={spec.k} must be below the agent count {n}")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("adjacency logits contain non-finite values")
    return a


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.gumbel(0.0, 1.0, size=shape)


def sample_khot_gumbel(
    alpha: AdjacencyLogits | Tensor,
    spec: SparsitySpec,
    noise: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
    relaxed: bool = False,
) -> CommGraph:
    """Stochastic k-hot graph: per row, the top-k of ``alpha + g`` with Gumbel ``g``.

    ``noise`` of shape ``(N, N)`` or ``(B, N, N)`` may be supplied directly;
    otherwise one ``(N, N)`` draw is taken from ``rng``.
    """
    a = _check_logits(alpha, spec)
    n = a.shape[-1]
    if noise is None:
        if rng is None:
            raise ValueError("either noise or rng is required")
        noise = sample_gumbel(rng, (n, n))
    noise = np.asarray(noise, dtype=a.dtype)
    if noise.shape[-2:] != (n, n):
        raise ShapeError(f"noise shape {noise.shape} incompatible with {n} agents")
    hard = topk_rows(a.data + noise, spec.k)
    mask = np.broadcast_to(_offdiag_mask(n), noise.shape)
    soft = masked_softmax((a + noise) * (1.0 / temperature), mask)
    return CommGraph(edges=hard, soft_weights=soft, relaxed=relaxed)


def argmax_khot(alpha: AdjacencyLogits | Tensor, spec: SparsitySpec) -> CommGraph:
    """Deterministic execution graph: per row, the top-k of ``alpha``."""
    a = _check_logits(alpha, spec)
    hard = topk_rows(a.data, spec.k)
    soft = masked_softmax(a, _offdiag_mask(a.shape[-1]))
    return CommGraph(edges=hard, soft_weights=soft)


def full_graph(n_agents: int) -> CommGraph:
    return CommGraph(edges=np.ones((n_agents, n_agents)))


def identity_graph(n_agents: int) -> CommGraph:
    return CommGraph(edges=np.eye(n_agents))


def apply_dynamic_gate(graph: CommGraph, gate) -> CommGraph:
    """Zero the off-diagonal part of row ``i`` when agent ``i``'s gate is closed.

    ``gate`` is a 0/1 array of shape ``(N,)`` or ``(B, N)``, or any object with
    ``h`` (array) and ``st`` (straight-through Tensor) attributes, such as a
    ``GateDecision``.
    """
    h = np.asarray(getattr(gate, "h", gate), dtype=float)
    n = graph.n_agents
    if h.shape[-1] != n:
        raise ShapeError(f"gate vector has {h.shape[-1]} entries for {n} agents")
    if not np.all((h == 0.0) | (h == 1.0)):
        raise ValueError("gate entries must be 0 or 1")
    eye = np.eye(n)
    offdiag = 1.0 - eye
    edges = graph.edges * offdiag * h[..., :, None] + eye

    gate_st = getattr(gate, "st", None)
    base = graph.tensor()
    if gate_st is None and not base.requires_grad:
        return CommGraph(edges=edges)
    h_t = gate_st if gate_st is not None else constant(h)
    h_col = h_t.reshape(h_t.shape + (1,))
    masked = base * offdiag
    if h_col.ndim > masked.ndim:
        masked = masked.reshape((1,) * (h_col.ndim - masked.ndim) + masked.shape)
    tensor = masked * h_col + eye
    return CommGraph(edges=edges, soft_weights=graph.soft_weights, relaxed=graph.relaxed, _tensor=tensor)


def snapshot(graph: CommGraph, step: int) -> dict:
    """Record of a single graph for heatmap export (1 = edge present)."""
    edges = graph.edges
    if edges.ndim != 2:
        raise ShapeError("snapshots take a single (N, N) graph")
    return {"iteration": int(step), "matrix": edges.astype(int).tolist()}


def append_snapshot(path: str | Path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_snapshots(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
