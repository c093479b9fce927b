"""Built-in cooperative environments selectable by name."""

from __future__ import annotations

from commformer.envs.diag import DiagConfig, DirectedInfoEnv
from commformer.envs.grid import PCP_DEFAULT, PP_DEFAULT, EnvState, GridConfig, GridWorld, StepResult
from commformer.envs.vec import EpisodeStats, VecEnv
from commformer.errors import ConfigError

ENV_NAMES = ("pp", "pcp", "diag")


def env_config(name: str, n_agents: int | None = None, **overrides):
    """Config for ``pp``, ``pcp`` or ``diag``; ``n_agents`` counts all agents.

    For PCP the capture agents keep their configured count and the rest are
    predators.
    """
    if name == "pp":
        base = dict(vars(PP_DEFAULT))
        if n_agents is not None:
            base["n_predators"] = n_agents
        base.update(overrides)
        return GridConfig(**base)
    if name == "pcp":
        base = dict(vars(PCP_DEFAULT))
        base.update(overrides)
        if n_agents is not None:
            base["n_predators"] = n_agents - base["n_captures"]
        return GridConfig(**base)
    if name == "diag":
        unknown = set(overrides)
        if unknown:
            raise ConfigError(f"diag takes no options besides the agent count, got {sorted(unknown)}")
        return DiagConfig(n_agents=n_agents if n_agents is not None else 3)
    raise ConfigError(f"unknown environment {name!r}; choose from {', '.join(ENV_NAMES)}")


def make_env(name: str, n_agents: int | None = None, seed: int | None = None, **overrides):
    cfg = env_config(name, n_agents, **overrides)
    if name == "diag":
        return DirectedInfoEnv(cfg, seed=seed)
    return GridWorld(cfg, seed=seed)


__all__ = [
    "DiagConfig",
    "DirectedInfoEnv",
    "ENV_NAMES",
    "EnvState",
    "EpisodeStats",
    "GridConfig",
    "GridWorld",
    "PCP_DEFAULT",
    "PP_DEFAULT",
    "StepResult",
    "VecEnv",
    "env_config",
    "make_env",
]
