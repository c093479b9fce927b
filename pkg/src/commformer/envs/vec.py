"""Several environment instances stepped in lockstep with automatic resets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EpisodeStats:
    episode_id: int
    ret: float
    success: bool
    steps_taken: int


class VecEnv:
    """Holds ``W`` single-owner environments, one per worker slot.

    Finished episodes are reset in place; their statistics are reported in
    worker-index order.  Every episode gets a global id in start order, which
    the trainer uses to split rollouts into train and validation halves.
    """

    def __init__(self, envs: list):
        if not envs:
            raise ValueError("VecEnv needs at least one environment")
        self.envs = envs
        self.n_envs = len(envs)
        self.n_agents = envs[0].n_agents
        self.n_actions = envs[0].n_actions
        self.obs_dim = envs[0].obs_dim
        self.obs: np.ndarray | None = None
        self.episode_ids = np.zeros(self.n_envs, dtype=np.int64)
        self._returns = np.zeros(self.n_envs)
        self._next_id = 0

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def reset(self) -> np.ndarray:
        self.obs = np.stack([env.reset() for env in self.envs])
        self.episode_ids = np.array([self._new_id() for _ in self.envs], dtype=np.int64)
        self._returns[:] = 0.0
        return self.obs

    def available_actions(self) -> np.ndarray:
        return np.stack([env.available_actions() for env in self.envs])

    def step(self, actions) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[EpisodeStats]]:
        """Returns the next observations (post-reset where an episode ended),
        rewards ``(W,)``, done flags ``(W,)`` and stats of finished episodes."""
        if self.obs is None:
            raise RuntimeError("call reset() first")
        actions = np.asarray(actions)
        rewards = np.zeros(self.n_envs)
        dones = np.zeros(self.n_envs, dtype=bool)
        finished = []
        obs = np.empty_like(self.obs)
        for w, env in enumerate(self.envs):
            res = env.step(actions[w])
            rewards[w] = res.reward
            dones[w] = res.done
            self._returns[w] += res.reward
            if res.done:
                finished.append(EpisodeStats(int(self.episode_ids[w]), float(self._returns[w]),
                                             bool(res.info["success"]), int(res.info["steps_taken"])))
                obs[w] = env.reset()
                self.episode_ids[w] = self._new_id()
                self._returns[w] = 0.0
            else:
                obs[w] = res.obs
        self.obs = obs
        return obs, rewards, dones, finished

    def get_state(self) -> dict:
        return {
            "envs": [env.get_state() for env in self.envs],
            "obs": None if self.obs is None else self.obs.tolist(),
            "episode_ids": self.episode_ids.tolist(),
            "returns": self._returns.tolist(),
            "next_id": self._next_id,
        }

    def set_state(self, d: dict) -> None:
        for env, s in zip(self.envs, d["envs"]):
            env.set_state(s)
        self.obs = None if d["obs"] is None else np.array(d["obs"], dtype=float)
        self.episode_ids = np.array(d["episode_ids"], dtype=np.int64)
        self._returns = np.array(d["returns"], dtype=float)
        self._next_id = int(d["next_id"])
