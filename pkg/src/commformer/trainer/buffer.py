"""Time-major rollout storage and flattened training batches."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

# golden-ratio conjugate; multiples of it modulo 1 spread evenly over [0, 1)
_SPREAD = 0.6180339887498949


@dataclass
class Batch:
    """Flattened samples, one row per (step, worker) pair."""

    obs: np.ndarray  # (B, N, D)
    next_obs: np.ndarray  # (B, N, D)
    actions: np.ndarray  # (B, N)
    old_log_probs: np.ndarray  # (B, N)
    advantages: np.ndarray  # (B,) normalized
    rewards: np.ndarray  # (B,)
    dones: np.ndarray  # (B,)
    available: np.ndarray | None = None  # (B, N, A)
    gate_hidden: np.ndarray | None = None  # (B, N, d) recurrent gate input
    next_gate_hidden: np.ndarray | None = None

    def __len__(self) -> int:
        return self.obs.shape[0]


class RolloutBuffer:
    """``T`` steps of ``W`` lockstepped workers, stored time-major ``(T, W, ...)``."""

    def __init__(self, steps: int, n_envs: int, n_agents: int, obs_dim: int, n_actions: int,
                 gate_dim: int | None = None, dtype=np.float64):
        t, w, n = steps, n_envs, n_agents
        self.steps, self.n_envs = steps, n_envs
        self.obs = np.zeros((t, w, n, obs_dim), dtype)
        self.actions = np.zeros((t, w, n), np.int64)
        self.log_probs = np.zeros((t, w, n), dtype)
        self.values = np.zeros((t, w, n), dtype)
        self.rewards = np.zeros((t, w))
        self.dones = np.zeros((t, w), bool)
        self.available = np.ones((t, w, n, n_actions), bool)
        self.episode_ids = np.zeros((t, w), np.int64)
        self.gate_open = np.ones((t, w, n))
        self.gate_hidden = np.zeros((t, w, n, gate_dim), dtype) if gate_dim else None
        self.last_obs = np.zeros((w, n, obs_dim), dtype)
        self.last_values = np.zeros((w, n), dtype)
        self.last_gate_hidden = np.zeros((w, n, gate_dim), dtype) if gate_dim else None
        self.ptr = 0

    def insert(self, obs, actions, log_probs, values, rewards, dones, available, episode_ids,
               gate_open=None, gate_hidden=None) -> None:
        if self.ptr >= self.steps:
            raise IndexError("rollout buffer is full")
        t = self.ptr
        self.obs[t] = obs
        self.actions[t] = actions
        self.log_probs[t] = log_probs
        self.values[t] = values
        self.rewards[t] = rewards
        self.dones[t] = dones
        self.available[t] = available
        self.episode_ids[t] = episode_ids
        if gate_open is not None:
            self.gate_open[t] = gate_open
        if gate_hidden is not None:
            self.gate_hidden[t] = gate_hidden
        self.ptr += 1

    @property
    def full(self) -> bool:
        return self.ptr == self.steps

    def next_obs(self) -> np.ndarray:
        """Observation following each step; meaningless (and masked) after a done."""
        return np.concatenate([self.obs[1:], self.last_obs[None]], axis=0)

    def next_gate_hidden(self) -> np.ndarray | None:
        if self.gate_hidden is None:
            return None
        return np.concatenate([self.gate_hidden[1:], self.last_gate_hidden[None]], axis=0)

    def train_mask(self, fraction: float) -> np.ndarray:
        """Whole episodes go to the train or validation side by episode id."""
        return (self.episode_ids * _SPREAD) % 1.0 < fraction

    def batch(self, advantages: np.ndarray, mask: np.ndarray | None = None) -> Batch:
        if mask is None:
            mask = np.ones((self.steps, self.n_envs), bool)
        next_hidden = self.next_gate_hidden()

        def take(a):
            return None if a is None else a[mask]

        return Batch(
            obs=take(self.obs),
            next_obs=take(self.next_obs()),
            actions=take(self.actions),
            old_log_probs=take(self.log_probs),
            advantages=take(advantages),
            rewards=take(self.rewards),
            dones=take(self.dones),
            available=take(self.available),
            gate_hidden=take(self.gate_hidden),
            next_gate_hidden=take(next_hidden),
        )


def concat_batches(batches: list[Batch]) -> Batch:
    out = {}
    for f in fields(Batch):
        parts = [getattr(b, f.name) for b in batches]
        out[f.name] = None if parts[0] is None else np.concatenate(parts, axis=0)
    return Batch(**out)
