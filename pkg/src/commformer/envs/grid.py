"""Predator-Prey (PP) and Predator-Capture-Prey (PCP) grid worlds.

A single stationary prey sits on a ``G x G`` grid.  Predators see a square
window of radius ``vision`` around themselves and finish by stepping onto the
prey cell.  In PCP an extra class of capture agents has no sensor at all and
finishes only by using the capture action while standing on the prey.

Coordinates are ``(row, col)``; "up" decreases the row.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from commformer.errors import ActionError, ConfigError, ShapeError

UP, DOWN, LEFT, RIGHT, STAY, CAPTURE = range(6)
MOVES = np.array([[-1, 0], [1, 0], [0, -1], [0, 1], [0, 0], [0, 0]])

PREDATOR, CAPTURER = 0, 1


@dataclass(frozen=True)
class GridConfig:
    grid_size: int = 5
    n_predators: int = 3
    n_captures: int = 0
    vision: int = 1
    max_steps: int = 20
    step_penalty: float = -0.05

    def __post_init__(self):
        if self.grid_size < 2:
            raise ConfigError(f"grid_size must be >= 2, got {self.grid_size}")
        if self.vision < 0:
            raise ConfigError(f"vision must be >= 0, got {self.vision}")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.n_predators < 0 or self.n_captures < 0 or self.n_agents < 1:
            raise ConfigError("need at least one agent")
        if self.n_agents + 1 > self.grid_size**2:
            raise ConfigError(f"{self.n_agents} agents and a prey do not fit on a {self.grid_size}x{self.grid_size} grid")

    @property
    def n_agents(self) -> int:
        return self.n_predators + self.n_captures

    @property
    def n_actions(self) -> int:
        return 6 if self.n_captures else 5

    @property
    def window(self) -> int:
        return 2 * self.vision + 1

    @property
    def obs_dim(self) -> int:
        # prey-presence window, normalized (row, col), class one-hot
        return self.window**2 + 2 + 2


PP_DEFAULT = GridConfig()
PCP_DEFAULT = GridConfig(n_predators=2, n_captures=1)


@dataclass
class EnvState:
    positions: np.ndarray  # (N, 2) int
    classes: np.ndarray  # (N,) int
    prey: np.ndarray  # (2,) int
    finished: np.ndarray  # (N,) bool
    t: int = 0
    finish_step: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def copy(self) -> "EnvState":
        return replace(self, positions=self.positions.copy(), classes=self.classes.copy(), prey=self.prey.copy(),
                       finished=self.finished.copy(), finish_step=self.finish_step.copy())


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool
    info: dict


class GridWorld:
    """One PP/PCP episode stream with its own rng."""

    def __init__(self, config: GridConfig = PP_DEFAULT, seed: int | None = None):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.state: EnvState | None = None

    @property
    def n_agents(self) -> int:
        return self.config.n_agents

    @property
    def n_actions(self) -> int:
        return self.config.n_actions

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        cfg = self.config
        cells = self.rng.choice(cfg.grid_size**2, size=cfg.n_agents + 1, replace=False)
        coords = np.stack(np.divmod(cells, cfg.grid_size), axis=1)
        classes = np.array([PREDATOR] * cfg.n_predators + [CAPTURER] * cfg.n_captures)
        self.state = EnvState(
            positions=coords[:-1].copy(),
            classes=classes,
            prey=coords[-1].copy(),
            finished=np.zeros(cfg.n_agents, bool),
            t=0,
            finish_step=np.zeros(cfg.n_agents, int),
        )
        return self.observe_all()

    def _require_state(self) -> EnvState:
        if self.state is None:
            raise RuntimeError("call reset() before using the environment")
        return self.state

    def observe(self, agent: int) -> np.ndarray:
        s = self._require_state()
        cfg = self.config
        obs = np.zeros(cfg.obs_dim)
        pos = s.positions[agent]
        if s.classes[agent] == PREDATOR:
            rel = s.prey - pos + cfg.vision
            if np.all((rel >= 0) & (rel < cfg.window)):
                obs[rel[0] * cfg.window + rel[1]] = 1.0
        w2 = cfg.window**2
        obs[w2 : w2 + 2] = pos / (cfg.grid_size - 1)
        obs[w2 + 2 + s.classes[agent]] = 1.0
        return obs

    def observe_all(self) -> np.ndarray:
        return np.stack([self.observe(i) for i in range(self.n_agents)])

    def available_actions(self) -> np.ndarray:
        s = self._require_state()
        avail = np.ones((self.n_agents, self.n_actions), bool)
        if self.n_actions > CAPTURE:
            avail[s.classes == PREDATOR, CAPTURE] = False
        return avail

    def step(self, actions) -> StepResult:
        s = self._require_state()
        cfg = self.config
        actions = np.asarray(actions)
        if actions.shape != (self.n_agents,):
            raise ShapeError(f"expected {self.n_agents} actions, got shape {actions.shape}")
        avail = self.available_actions()
        for i, a in enumerate(actions):
            if not (0 <= a < self.n_actions) or not avail[i, a]:
                raise ActionError(f"action {a} is not valid for agent {i}")
        if s.t >= cfg.max_steps or s.finished.all():
            raise RuntimeError("episode is over; call reset()")

        s.t += 1
        active = ~s.finished
        moved = np.clip(s.positions + MOVES[actions], 0, cfg.grid_size - 1)
        s.positions = np.where(active[:, None], moved, s.positions)
        on_prey = np.all(s.positions == s.prey, axis=1)
        newly = active & on_prey & ((s.classes == PREDATOR) | (actions == CAPTURE))
        s.finished = s.finished | newly
        s.finish_step[newly] = s.t

        n_active = int((~s.finished).sum())
        reward = cfg.step_penalty * n_active
        success = bool(s.finished.all())
        done = success or s.t >= cfg.max_steps
        info = {"success": success, "steps_taken": int(s.finish_step.max()) if success else s.t}
        return StepResult(obs=self.observe_all(), reward=reward, done=done, info=info)

    def get_state(self) -> dict:
        s = self._require_state()
        return {
            "positions": s.positions.tolist(),
            "classes": s.classes.tolist(),
            "prey": s.prey.tolist(),
            "finished": s.finished.tolist(),
            "finish_step": s.finish_step.tolist(),
            "t": s.t,
            "rng": self.rng.bit_generator.state,
        }

    def set_state(self, d: dict) -> None:
        self.state = EnvState(
            positions=np.array(d["positions"], int),
            classes=np.array(d["classes"], int),
            prey=np.array(d["prey"], int),
            finished=np.array(d["finished"], bool),
            t=int(d["t"]),
            finish_step=np.array(d["finish_step"], int),
        )
        self.rng.bit_generator.state = d["rng"]
