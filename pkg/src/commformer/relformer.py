"""Relation-enhanced transformer: an encoder/critic and an auto-regressive actor.

Both halves attend only along edges of the communication graph.  Every
attention score between a receiving agent ``i`` and a sender ``j`` is
augmented with learned edge embeddings: the query side with the embedding of
edge ``i -> j`` and the key side with that of ``j -> i``.  Each embedding is
picked by the corresponding edge bit (row 0 absent, row 1 present), blended
linearly so gradients reach the graph logits through the straight-through
edge values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from commformer.commgraph import CommGraph
from commformer.diffmath import (
    LayerNorm,
    Linear,
    MLP,
    ParameterStore,
    Tensor,
    concat,
    constant,
    embedding_lookup,
    gelu,
    log_softmax,
    masked_softmax,
    matmul,
    no_grad,
    orthogonal,
)
from commformer.diffmath.layers import RELU_GAIN
from commformer.diffmath.tensor import as_tensor
from commformer.errors import SequenceError, ShapeError

OUTPUT_GAIN = 0.01
# additive logit offset for unavailable actions; exp() of it underflows to 0
_UNAVAILABLE = -1e9


class EdgeEmbeddingTable:
    """``2 x d`` table; row 0 embeds an absent edge, row 1 a present one."""

    def __init__(self, store: ParameterStore, name: str, dim: int, rng: np.random.Generator,
                 scale: float = 0.1, dtype=np.float64):
        self.table = store.add(name, (scale * rng.standard_normal((2, dim))).astype(dtype))

    @property
    def absent(self) -> Tensor:
        return self.table[0]

    @property
    def present(self) -> Tensor:
        return self.table[1]


def _as_edge_tensor(edges) -> Tensor:
    if isinstance(edges, CommGraph):
        return edges.tensor()
    return as_tensor(edges)


def relation_attention_scores(
    xq: Tensor,
    xk: Tensor,
    edges,
    emb: EdgeEmbeddingTable | None,
    wq: Tensor,
    wk: Tensor,
) -> Tensor:
    """Scores ``s_ij = (xq_i + r_{i->j}) Wq Wk^T (xk_j + r_{j->i}) / sqrt(d)``.

    ``r_{j->i}`` is selected by edge bit ``E[i, j]`` (``i`` receives from
    ``j``) and ``r_{i->j}`` by ``E[j, i]``.  With ``emb=None`` this is plain
    dot-product attention.  Shapes: ``xq, xk`` are ``(B, N, d)``; ``edges``
    is ``(N, N)`` or ``(B, N, N)``; the result is ``(B, N, N)``.
    """
    xq, xk = as_tensor(xq), as_tensor(xk)
    if xq.ndim != 3 or xk.ndim != 3 or xq.shape[-1] != xk.shape[-1]:
        raise ShapeError(f"expected (B, N, d) inputs, got {xq.shape} and {xk.shape}")
    d = xq.shape[-1]
    if wq.shape != (d, d) or wk.shape != (d, d):
        raise ShapeError(f"projection shapes {wq.shape}, {wk.shape} do not match d={d}")
    scale = 1.0 / math.sqrt(d)

    if emb is None:
        return matmul(xq @ wq, (xk @ wk).swapaxes(-1, -2)) * scale

    e = _as_edge_tensor(edges)
    n = xq.shape[1]
    if e.shape[-2:] != (n, xk.shape[1]):
        raise ShapeError(f"edge matrix {e.shape} does not match {n} agents")
    if e.ndim == 2:
        e = e.reshape((1,) + e.shape)
    e_t = e.swapaxes(-1, -2)

    a = (xq + emb.absent) @ wq  # query with absent-edge embedding, (B, N, d)
    c = (xk + emb.absent) @ wk
    delta = (emb.present - emb.absent).reshape((1, d))
    u = delta @ wq  # (1, d) shift of the query when the edge is present
    v = delta @ wk

    base = matmul(a, c.swapaxes(-1, -2))  # (B, N, N)
    a_v = (a @ v.reshape((d, 1)))  # (B, N, 1)
    u_c = (c @ u.reshape((d, 1))).swapaxes(-1, -2)  # (B, 1, N)
    u_v = (u @ v.reshape((d, 1))).reshape((1, 1, 1))
    scores = base + e * a_v + e_t * u_c + e_t * e * u_v
    return scores * scale


class RelationAttention:
    """Single-head attention masked (and relation-enhanced) by a graph."""

    def __init__(self, store: ParameterStore, name: str, dim: int, rng: np.random.Generator,
                 relational: bool = True, dtype=np.float64):
        self.wq = store.add(f"{name}.wq", orthogonal((dim, dim), 1.0, rng, dtype))
        self.wk = store.add(f"{name}.wk", orthogonal((dim, dim), 1.0, rng, dtype))
        self.value = Linear(store, f"{name}.value", dim, dim, rng, dtype=dtype)
        self.out = Linear(store, f"{name}.out", dim, dim, rng, dtype=dtype)
        self.emb = EdgeEmbeddingTable(store, f"{name}.edge_emb", dim, rng, dtype=dtype) if relational else None

    def __call__(self, xq: Tensor, xk: Tensor, mask, edges=None) -> Tensor:
        scores = relation_attention_scores(xq, xk, edges if edges is not None else mask, self.emb, self.wq, self.wk)
        weights = masked_softmax(scores, mask)
        return self.out(matmul(weights, self.value(xk)))


class _Head:
    """Linear -> GELU -> LayerNorm -> Linear(out, small gain)."""

    def __init__(self, store, name, dim, out_dim, rng, dtype):
        self.fc = Linear(store, f"{name}.fc", dim, dim, rng, gain=RELU_GAIN, dtype=dtype)
        self.ln = LayerNorm(store, f"{name}.ln", dim, dtype=dtype)
        self.proj = Linear(store, f"{name}.proj", dim, out_dim, rng, gain=OUTPUT_GAIN, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(self.ln(gelu(self.fc(x))))


class Encoder:
    """Critic: observations -> per-agent representations and values."""

    def __init__(self, store: ParameterStore, name: str, obs_dim: int, dim: int, n_blocks: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.dim = dim
        self.embed = Linear(store, f"{name}.embed", obs_dim, dim, rng, gain=RELU_GAIN, dtype=dtype)
        self.embed_ln = LayerNorm(store, f"{name}.embed_ln", dim, dtype=dtype)
        self.blocks = []
        for b in range(n_blocks):
            prefix = f"{name}.block{b}"
            self.blocks.append((
                RelationAttention(store, f"{prefix}.attn", dim, rng, dtype=dtype),
                LayerNorm(store, f"{prefix}.ln1", dim, dtype=dtype),
                MLP(store, f"{prefix}.mlp", dim, rng, dtype=dtype),
                LayerNorm(store, f"{prefix}.ln2", dim, dtype=dtype),
            ))
        self.value_head = _Head(store, f"{name}.value_head", dim, 1, rng, dtype)

    def __call__(self, obs, graph) -> tuple[Tensor, Tensor]:
        obs = as_tensor(obs)
        if obs.ndim != 3:
            raise ShapeError(f"observations must be (B, N, obs_dim), got {obs.shape}")
        edges = _as_edge_tensor(graph)
        x = gelu(self.embed_ln(self.embed(obs)))
        for attn, ln1, mlp, ln2 in self.blocks:
            x = ln1(x + attn(x, x, edges))
            x = ln2(x + mlp(x))
        values = self.value_head(x)
        return x, values.reshape(values.shape[:-1])


class Decoder:
    """Actor: per-agent action distributions, auto-regressive in agent order.

    The query stream of agent ``m`` starts from its own representation.  Each
    block first attends over a start token plus the action tokens of agents
    ``j < m`` that ``m`` receives from, then (relation-enhanced) over the
    encoder representations of the agents it receives from, then applies an
    MLP; every sub-layer is residual with a post-LayerNorm.
    """

    def __init__(self, store: ParameterStore, name: str, n_actions: int, dim: int, n_blocks: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.dim = dim
        self.n_actions = n_actions
        # row 0 is the start token; action a is row a + 1
        self.action_table = store.add(
            f"{name}.action_embed", (rng.standard_normal((n_actions + 1, dim)) / math.sqrt(dim)).astype(dtype)
        )
        self.action_ln = LayerNorm(store, f"{name}.action_ln", dim, dtype=dtype)
        self.blocks = []
        for b in range(n_blocks):
            prefix = f"{name}.block{b}"
            self.blocks.append((
                RelationAttention(store, f"{prefix}.self_attn", dim, rng, relational=False, dtype=dtype),
                LayerNorm(store, f"{prefix}.ln1", dim, dtype=dtype),
                RelationAttention(store, f"{prefix}.cross_attn", dim, rng, dtype=dtype),
                LayerNorm(store, f"{prefix}.ln2", dim, dtype=dtype),
                MLP(store, f"{prefix}.mlp", dim, rng, dtype=dtype),
                LayerNorm(store, f"{prefix}.ln3", dim, dtype=dtype),
            ))
        self.policy_head = _Head(store, f"{name}.policy_head", dim, n_actions, rng, dtype)

    def __call__(self, reps: Tensor, actions, graph, available=None) -> Tensor:
        """Log-probabilities ``(B, N, A)``; row ``m`` ignores ``actions[:, m:]``."""
        reps = as_tensor(reps)
        b, n, _ = reps.shape
        actions = np.asarray(actions, dtype=np.int64)
        if actions.ndim != 2 or actions.shape[0] != b:
            raise ShapeError(f"actions must be (B, m), got {actions.shape}")
        if actions.shape[1] > n:
            raise SequenceError(f"action prefix of length {actions.shape[1]} exceeds {n} agents")
        if actions.shape[1] < n:
            actions = np.concatenate([actions, np.zeros((b, n - actions.shape[1]), np.int64)], axis=1)
        if actions.size and (actions.min() < 0 or actions.max() >= self.n_actions):
            raise SequenceError("action index outside the action space")

        edges = _as_edge_tensor(graph)
        tokens = self.action_ln(embedding_lookup(self.action_table, np.concatenate(
            [np.zeros((b, 1), np.int64), actions + 1], axis=1)))
        causal = np.tril(np.ones((n, n)), k=-1)
        lead = edges.shape[:-2]
        act_mask = concat([constant(np.ones(lead + (n, 1), dtype=reps.dtype)), edges * causal], axis=-1)

        x = reps
        for self_attn, ln1, cross_attn, ln2, mlp, ln3 in self.blocks:
            x = ln1(x + self_attn(x, tokens, act_mask))
            x = ln2(x + cross_attn(x, reps, edges))
            x = ln3(x + mlp(x))
        logits = self.policy_head(x)
        if available is not None:
            available = np.asarray(available, dtype=bool)
            if available.shape != (b, n, self.n_actions):
                raise ShapeError(f"availability mask {available.shape} != {(b, n, self.n_actions)}")
            logits = logits + np.where(available, 0.0, _UNAVAILABLE).astype(reps.dtype)
        return log_softmax(logits)


def encode(obs, graph, encoder: Encoder) -> tuple[Tensor, Tensor]:
    return encoder(obs, graph)


def decode_policy(reps, actions, graph, decoder: Decoder, available=None) -> Tensor:
    return decoder(reps, actions, graph, available)


@dataclass
class ActResult:
    actions: np.ndarray  # (B, N) int
    log_probs: np.ndarray  # (B, N)
    values: np.ndarray  # (B, N)


def sample_categorical(log_probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw per row; zero-probability entries are never chosen."""
    cdf = np.cumsum(np.exp(log_probs), axis=-1)
    u = rng.random(cdf.shape[:-1]) * cdf[..., -1]
    return np.argmax(cdf > u[..., None], axis=-1)


def act_autoregressive(
    obs,
    graph,
    encoder: Encoder,
    decoder: Decoder,
    mode: str = "sample",
    rng: np.random.Generator | None = None,
    available=None,
) -> ActResult:
    """Generate ``a^1..a^n`` one agent at a time, feeding each choice back."""
    if mode not in ("sample", "greedy"):
        raise ValueError(f"mode must be 'sample' or 'greedy', got {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sampling needs an rng")
    with no_grad():
        reps, values = encoder(obs, graph)
        b, n = values.shape
        actions = np.zeros((b, n), dtype=np.int64)
        log_probs = np.zeros((b, n), dtype=values.dtype)
        for m in range(n):
            logp = decoder(reps, actions, graph, available).data[:, m]
            if mode == "greedy":
                choice = np.argmax(logp, axis=-1)
            else:
                choice = sample_categorical(logp, rng)
            actions[:, m] = choice
            log_probs[:, m] = logp[np.arange(b), choice]
    return ActResult(actions=actions, log_probs=log_probs, values=values.data.copy())
