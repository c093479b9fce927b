"""Run configuration stored as flat ``key = value`` text.

Namespaced keys use dots: ``train.lr``, ``model.hidden_dim`` and
``env.grid_size`` address the training, model and environment settings;
top-level keys (``env``, ``agents``, ``sparsity`` ...) describe the run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from commformer.errors import ConfigError
from commformer.trainer import TrainConfig

STAGES = ("1", "2", "both")
MODEL_KEYS = {"hidden_dim": int, "n_blocks": int, "gate_recurrent": bool, "alpha_init_scale": float, "dtype": str}
ENV_KEYS = {"grid_size": int, "n_predators": int, "n_captures": int, "vision": int, "max_steps": int,
            "step_penalty": float}


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(kind, text: str, key: str):
    try:
        if kind is bool:
            return parse_bool(text)
        if kind is int:
            return int(float(text)) if "e" in text.lower() else int(text)
        return kind(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from exc


@dataclass(frozen=True)
class RunConfig:
    env: str = "pp"
    agents: int | None = None
    sparsity: float = 0.4
    steps: int = 2_000_000
    stage2_steps: int | None = None
    seed: int = 0
    stage: str = "1"
    dyn_gate: bool = False
    eval_episodes: int = 100
    checkpoint_every: int = 50
    out: str | None = None
    env_options: dict = field(default_factory=dict)
    model: dict = field(default_factory=lambda: {"hidden_dim": 64, "n_blocks": 1, "gate_recurrent": False,
                                                 "alpha_init_scale": 0.01, "dtype": "float32"})
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps < 1:
            raise ConfigError("steps must be positive")
        if not 0.0 < self.sparsity <= 1.0:
            raise ConfigError(f"sparsity must lie in (0, 1], got {self.sparsity}")
        unknown = set(self.model) - set(MODEL_KEYS)
        if unknown:
            raise ConfigError(f"unknown model keys {sorted(unknown)}")
        unknown = set(self.env_options) - set(ENV_KEYS)
        if unknown:
            raise ConfigError(f"unknown env keys {sorted(unknown)}")

    def with_overrides(self, pairs: dict[str, str]) -> "RunConfig":
        """Apply ``key -> text`` overrides (same keys as the file format)."""
        top: dict = {}
        model = dict(self.model)
        env_options = dict(self.env_options)
        train: dict = {}
        train_types = {f.name: type(getattr(self.train, f.name)) for f in fields(TrainConfig)}
        top_types = {"env": str, "agents": int, "sparsity": float, "steps": int, "stage2_steps": int, "seed": int,
                     "stage": str, "dyn_gate": bool, "eval_episodes": int, "checkpoint_every": int, "out": str}
        for key, text in pairs.items():
            text = str(text).strip()
            if key.startswith("train."):
                name = key[len("train."):]
                if name not in train_types:
                    raise ConfigError(f"unknown key {key!r}")
                train[name] = _coerce(train_types[name], text, key)
            elif key.startswith("model."):
                name = key[len("model."):]
                if name not in MODEL_KEYS:
                    raise ConfigError(f"unknown key {key!r}")
                model[name] = _coerce(MODEL_KEYS[name], text, key)
            elif key.startswith("env."):
                name = key[len("env."):]
                if name not in ENV_KEYS:
                    raise ConfigError(f"unknown key {key!r}")
                env_options[name] = _coerce(ENV_KEYS[name], text, key)
            elif key in top_types:
                top[key] = None if text.lower() == "none" else _coerce(top_types[key], text, key)
            else:
                raise ConfigError(f"unknown key {key!r}")
        return replace(self, model=model, env_options=env_options, train=replace(self.train, **train), **top)

    def to_pairs(self) -> list[tuple[str, str]]:
        pairs = []
        for name in ("env", "agents", "sparsity", "steps", "stage2_steps", "seed", "stage", "dyn_gate",
                     "eval_episodes", "checkpoint_every", "out"):
            pairs.append((name, _fmt(getattr(self, name))))
        pairs += [(f"env.{k}", _fmt(v)) for k, v in sorted(self.env_options.items())]
        pairs += [(f"model.{k}", _fmt(v)) for k, v in sorted(self.model.items())]
        pairs += [(f"train.{f.name}", _fmt(getattr(self.train, f.name))) for f in fields(TrainConfig)]
        return pairs

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_pairs())

    def hash(self) -> str:
        """Digest of everything except the output location."""
        text = "".join(f"{k} = {v}\n" for k, v in self.to_pairs() if k != "out")
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    @property
    def stage2_budget(self) -> int:
        return self.stage2_steps if self.stage2_steps is not None else self.steps


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (flags win)."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        cfg = cfg.with_overrides(parse_pairs(path.read_text(encoding="utf-8"), str(path)))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg
