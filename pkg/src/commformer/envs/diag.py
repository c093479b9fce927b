"""Directed-information diagnostic: the optimal graph is known by construction.

Every episode is a single step.  A fair coin ``b`` is drawn; agent 0 alone
observes it, and the team is rewarded 1 when agent 1's action equals ``b``.
Without the receive-edge ``1 <- 0`` agent 1 can only guess, so its success
rate is capped at chance.  The remaining agents are distractors whose
actions do not matter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from commformer.envs.grid import StepResult
from commformer.errors import ActionError, ConfigError, ShapeError

SOURCE, RECEIVER = 0, 1


@dataclass(frozen=True)
class DiagConfig:
    n_agents: int = 3

    def __post_init__(self):
        if not 2 <= self.n_agents <= 4:
            raise ConfigError(f"the diagnostic task supports 2 to 4 agents, got {self.n_agents}")

    @property
    def n_actions(self) -> int:
        return 2

    @property
    def obs_dim(self) -> int:
        # goal bit (seen by the source only) and an agent-id one-hot
        return 1 + self.n_agents

    @property
    def max_steps(self) -> int:
        return 1


class DirectedInfoEnv:
    def __init__(self, config: DiagConfig = DiagConfig(), seed: int | None = None):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.goal: int | None = None
        self.t = 0

    n_agents = property(lambda self: self.config.n_agents)
    n_actions = property(lambda self: self.config.n_actions)
    obs_dim = property(lambda self: self.config.obs_dim)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.goal = int(self.rng.integers(2))
        self.t = 0
        return self.observe_all()

    def observe_all(self) -> np.ndarray:
        if self.goal is None:
            raise RuntimeError("call reset() before using the environment")
        n = self.n_agents
        obs = np.zeros((n, self.obs_dim))
        obs[SOURCE, 0] = self.goal
        obs[np.arange(n), 1 + np.arange(n)] = 1.0
        return obs

    def available_actions(self) -> np.ndarray:
        return np.ones((self.n_agents, self.n_actions), bool)

    def step(self, actions) -> StepResult:
        actions = np.asarray(actions)
        if actions.shape != (self.n_agents,):
            raise ShapeError(f"expected {self.n_agents} actions, got shape {actions.shape}")
        if np.any((actions < 0) | (actions >= self.n_actions)):
            raise ActionError(f"actions {actions.tolist()} outside {{0, 1}}")
        if self.t >= 1:
            raise RuntimeError("episode is over; call reset()")
        obs = self.observe_all()
        self.t = 1
        success = bool(actions[RECEIVER] == self.goal)
        return StepResult(obs=obs, reward=float(success), done=True, info={"success": success, "steps_taken": 1})

    def get_state(self) -> dict:
        return {"goal": self.goal, "t": self.t, "rng": self.rng.bit_generator.state}

    def set_state(self, d: dict) -> None:
        self.goal, self.t = d["goal"], int(d["t"])
        self.rng.bit_generator.state = d["rng"]
