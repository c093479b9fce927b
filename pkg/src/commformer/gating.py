"""Per-agent dynamic gates deciding whether an agent receives messages.

Each agent owns a small network ``Linear -> LayerNorm -> GELU -> Linear`` with
two output logits, index 0 meaning *open* and index 1 *closed*.  The agents'
weights are stacked along a leading agent axis so all gates run in one
batched matmul, but no parameter is shared between agents.

Training draws a hard decision through a Gumbel-perturbed two-way softmax and
passes gradients through the open-probability (straight-through); inference
takes the argmax of the logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from commformer.diffmath import ParameterStore, Tensor, gelu, layer_norm, masked_softmax, orthogonal, straight_through
from commformer.diffmath.layers import RELU_GAIN
from commformer.diffmath.tensor import as_tensor
from commformer.errors import ShapeError

OPEN, CLOSED = 0, 1


@dataclass(frozen=True)
class GateDecision:
    """``h[..., i] == 1`` lets agent ``i`` receive messages this step."""

    h: np.ndarray
    soft: Tensor  # probability of "open", same shape as h
    st: Tensor  # forward value h, gradient of soft

    @property
    def open_fraction(self) -> float:
        return float(self.h.mean())


def _stacked_orthogonal(n, shape, gain, rng, dtype):
    return np.stack([orthogonal(shape, gain, rng, dtype) for _ in range(n)])


class GateNetwork:
    """Gate parameters ``K = [kappa_1, ..., kappa_n]``, one set per agent.

    ``recurrent=True`` adds a per-agent ``d x d`` weight mixing the previous
    hidden state into the first layer; it starts at zero so the recurrent
    variant initially matches the feed-forward one.
    """

    def __init__(self, store: ParameterStore, name: str, n_agents: int, obs_dim: int, dim: int,
                 rng: np.random.Generator, recurrent: bool = False, dtype=np.float64):
        self.n_agents, self.obs_dim, self.dim = n_agents, obs_dim, dim
        self.w1 = store.add(f"{name}.fc1.weight", _stacked_orthogonal(n_agents, (obs_dim, dim), RELU_GAIN, rng, dtype))
        self.b1 = store.add(f"{name}.fc1.bias", np.zeros((n_agents, 1, dim), dtype))
        self.ln_scale = store.add(f"{name}.ln.scale", np.ones((n_agents, 1, dim), dtype))
        self.ln_shift = store.add(f"{name}.ln.shift", np.zeros((n_agents, 1, dim), dtype))
        self.w2 = store.add(f"{name}.fc2.weight", _stacked_orthogonal(n_agents, (dim, 2), 0.01, rng, dtype))
        # a small positive bias on "open" starts every gate mostly open
        b2 = np.zeros((n_agents, 1, 2), dtype)
        b2[..., OPEN] = 1.0
        self.b2 = store.add(f"{name}.fc2.bias", b2)
        self.recurrent = recurrent
        self.u = store.add(f"{name}.recur.weight", np.zeros((n_agents, dim, dim), dtype)) if recurrent else None

    def _agent_major(self, obs) -> tuple[Tensor, bool]:
        obs = as_tensor(obs)
        batched = obs.ndim == 3
        if obs.ndim == 2:
            obs = obs.reshape((1,) + obs.shape)
        if obs.ndim != 3 or obs.shape[1:] != (self.n_agents, self.obs_dim):
            raise ShapeError(f"gate input must be (N={self.n_agents}, {self.obs_dim}) per sample, got {obs.shape}")
        return obs.swapaxes(0, 1), batched  # (N, B, obs_dim)

    def features(self, obs, hidden=None) -> tuple[Tensor, bool]:
        x, batched = self._agent_major(obs)
        pre = x @ self.w1 + self.b1
        if hidden is not None:
            if not self.recurrent:
                raise ValueError("this gate network has no recurrent weights")
            h = as_tensor(hidden)
            if h.ndim == 2:
                h = h.reshape((1,) + h.shape)
            if h.shape[1:] != (self.n_agents, self.dim):
                raise ShapeError(f"hidden state must be (N={self.n_agents}, {self.dim}) per sample, got {h.shape}")
            pre = pre + h.swapaxes(0, 1) @ self.u
        return gelu(layer_norm(pre) * self.ln_scale + self.ln_shift), batched

    def logits(self, obs, hidden=None) -> Tensor:
        """Gate logits ``(B, N, 2)`` (or ``(N, 2)`` for unbatched input)."""
        feats, batched = self.features(obs, hidden)
        out = (feats @ self.w2 + self.b2).swapaxes(0, 1)
        return out if batched else out.reshape(out.shape[1:])


def _decide(logits: Tensor, mode: str, rng, temperature: float, noise) -> GateDecision:
    if mode == "inference":
        h = (np.argmax(logits.data, axis=-1) == OPEN).astype(logits.dtype)
        soft = masked_softmax(logits, np.ones(logits.shape))[..., OPEN]
        return GateDecision(h=h, soft=soft, st=straight_through(h, soft))
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
    if noise is None:
        if rng is None:
            raise ValueError("train mode needs an rng or explicit noise")
        noise = rng.gumbel(size=logits.shape)
    noise = np.asarray(noise, dtype=logits.dtype)
    if noise.shape != logits.shape:
        raise ShapeError(f"gate noise {noise.shape} != logits {logits.shape}")
    perturbed = logits + noise
    h = (np.argmax(perturbed.data, axis=-1) == OPEN).astype(logits.dtype)
    soft = masked_softmax(perturbed * (1.0 / temperature), np.ones(logits.shape))[..., OPEN]
    return GateDecision(h=h, soft=soft, st=straight_through(h, soft))


def gate_forward(obs, gates: GateNetwork, mode: str = "inference", rng: np.random.Generator | None = None,
                 temperature: float = 1.0, noise=None) -> GateDecision:
    """Decide ``h_i`` for every agent from its own observation."""
    return _decide(gates.logits(obs), mode, rng, temperature, noise)


def gate_forward_recurrent(obs, hidden, gates: GateNetwork, mode: str = "inference",
                           rng: np.random.Generator | None = None, temperature: float = 1.0,
                           noise=None) -> tuple[GateDecision, Tensor]:
    """Recurrent variant: condition on the previous hidden state as well.

    Returns the decision and the next hidden state (the first-layer features,
    ``(B, N, d)`` or ``(N, d)``).
    """
    feats, batched = gates.features(obs, hidden)
    logits = (feats @ gates.w2 + gates.b2).swapaxes(0, 1)
    nxt = feats.swapaxes(0, 1)
    if not batched:
        logits = logits.reshape(logits.shape[1:])
        nxt = nxt.reshape(nxt.shape[1:])
    return _decide(logits, mode, rng, temperature, noise), nxt
