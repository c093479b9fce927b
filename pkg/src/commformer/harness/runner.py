"""Experiment orchestration: build, train, checkpoint, log and evaluate a run.

A run directory holds

- ``config.txt``      the resolved run config (key = value)
- ``metrics.jsonl``   one record per training iteration
- ``alpha.jsonl``     one adjacency snapshot per iteration
- ``checkpoints/``    periodic, per-stage and final checkpoints
- ``manifest.json``   written atomically when the run ends
"""

from __future__ import annotations

import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from commformer import __version__
from commformer.commgraph import snapshot
from commformer.envs import VecEnv, make_env
from commformer.errors import CheckpointError, ConfigError
from commformer.harness.checkpoint import load_checkpoint, restore_trainer, save_trainer
from commformer.harness.config import RunConfig, parse_pairs
from commformer.harness.metrics import JsonlWriter, snapshot_ref, truncate_jsonl
from commformer.model import CommFormer, ModelConfig
from commformer.seeding import derive_rng, worker_seeds
from commformer.trainer import Trainer, evaluate, train_stage1, train_stage2

OUT_ENV = "COMMFORMER_OUT"


def run_name(cfg: RunConfig) -> str:
    agents = "default" if cfg.agents is None else cfg.agents
    return f"{cfg.env}-n{agents}-s{cfg.sparsity:g}-seed{cfg.seed}-{cfg.hash()[:8]}"


def resolve_out_dir(cfg: RunConfig) -> Path:
    if cfg.out:
        return Path(cfg.out)
    return Path(os.environ.get(OUT_ENV) or "runs") / run_name(cfg)


def env_factory(cfg: RunConfig) -> Callable[[int], object]:
    def make(seed: int):
        return make_env(cfg.env, cfg.agents, seed=seed, **cfg.env_options)

    return make


def build_model(cfg: RunConfig) -> CommFormer:
    probe = env_factory(cfg)(0)
    mcfg = ModelConfig(obs_dim=probe.obs_dim, n_actions=probe.n_actions, n_agents=probe.n_agents,
                       sparsity=cfg.sparsity, **cfg.model)
    return CommFormer(mcfg, derive_rng(cfg.seed, "init"))


def build_trainer(cfg: RunConfig) -> Trainer:
    make = env_factory(cfg)
    vec = VecEnv([make(s) for s in worker_seeds(cfg.seed, "env", cfg.train.n_envs)])
    return Trainer(build_model(cfg), vec, cfg.train, seed=cfg.seed)


def config_from_checkpoint(ckpt) -> RunConfig:
    return RunConfig().with_overrides(parse_pairs(ckpt.run_config, str(ckpt.path)))


def model_from_checkpoint(path: str | Path) -> tuple[CommFormer, RunConfig]:
    ckpt = load_checkpoint(path)
    cfg = config_from_checkpoint(ckpt)
    model = CommFormer(ModelConfig(**ckpt.model_config), np.random.default_rng(0))
    model.store.load_state_dict(ckpt.params)
    return model, cfg


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


class Run:
    """One training run bound to an output directory."""

    def __init__(self, cfg: RunConfig, out_dir: Path | None = None, log: Callable[[str], None] | None = None,
                 log_every: int = 10):
        self.cfg = cfg
        self.out = Path(out_dir) if out_dir is not None else resolve_out_dir(cfg)
        self.log = log if log is not None else (lambda msg: print(msg, file=sys.stderr))
        self.log_every = log_every
        self.checkpoints: list[str] = []
        self.started = _now()
        self.trainer: Trainer | None = None
        self.last_metrics: dict | None = None
        # env-step count at which stage 2 stops; fixed once stage 2 begins
        self.stage2_end: int | None = None

    # -- files ------------------------------------------------------------------

    def _open_streams(self, resume_iteration: int | None) -> None:
        if resume_iteration is None:
            mode = "w"
        else:
            mode = "a"
            for name in ("metrics.jsonl", "alpha.jsonl"):
                truncate_jsonl(self.out / name, lambda r: r["iteration"] <= resume_iteration)
        self.metrics = JsonlWriter(self.out / "metrics.jsonl", mode)
        self.alpha = JsonlWriter(self.out / "alpha.jsonl", mode)

    def checkpoint(self, tag: str) -> Path:
        path = save_trainer(self.out / "checkpoints" / tag, self.trainer, self.cfg.dumps(),
                            extra={"tag": tag, "config_hash": self.cfg.hash(), "stage2_end": self.stage2_end})
        if tag not in self.checkpoints:
            self.checkpoints.append(tag)
        return path

    def _on_iteration(self, metrics: dict, trainer: Trainer) -> None:
        record = snapshot(trainer.base_graph(), metrics["iteration"])
        record["stage"] = trainer.stage
        record["alpha"] = trainer.model.alpha.data.astype(float).tolist()
        line = self.alpha.write(record)
        metrics["alpha_snapshot_ref"] = snapshot_ref(line)
        self.metrics.write(metrics)
        self.last_metrics = metrics
        if self.cfg.checkpoint_every and metrics["iteration"] % self.cfg.checkpoint_every == 0:
            self.checkpoint(f"iter_{metrics['iteration']:06d}")
        if self.log_every and metrics["iteration"] % self.log_every == 0:
            self.log(f"[stage {trainer.stage}] iter {metrics['iteration']} steps {metrics['env_steps']} "
                     f"success {_fmt(metrics['success_rate'])} len {_fmt(metrics['mean_steps_taken'])} "
                     f"open {_fmt(metrics['gate_open_fraction'])}")

    # -- training -------------------------------------------------------------------

    def execute(self, resume: str | Path | None = None, init_from: str | Path | None = None) -> dict:
        cfg = self.cfg
        if cfg.stage == "2" and init_from is None and resume is None:
            raise ConfigError("stage 2 needs a stage-1 checkpoint (pass --init-from)")
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
        self.trainer = trainer = build_trainer(cfg)

        resume_iteration = None
        if resume is not None:
            ckpt = load_checkpoint(resume)
            restore_trainer(ckpt, trainer)
            resume_iteration = trainer.iteration
            self.stage2_end = ckpt.manifest["extra"].get("stage2_end")
            self.checkpoints = sorted(p.name for p in (self.out / "checkpoints").iterdir()
                                      if p.is_dir() and not p.name.endswith(".tmp")) \
                if (self.out / "checkpoints").exists() else []
        elif init_from is not None:
            ckpt = load_checkpoint(init_from)
            if ckpt.trainer_state.get("stage") != 1:
                raise ConfigError(f"{init_from} is not a stage-1 checkpoint")
            restore_trainer(ckpt, trainer)
        self._open_streams(resume_iteration)
        status = "failed"
        try:
            self._train(resume is not None, init_from is not None)
            status = "complete"
        except BaseException:
            if trainer.iteration > 0:
                self.checkpoint("aborted")
            raise
        finally:
            self.metrics.close()
            self.alpha.close()
            if status != "complete":
                self._write_manifest(status, None)
        summary = self._final_eval()
        self._write_manifest(status, summary)
        return {"out": str(self.out), "final_metrics": self.last_metrics, "eval": summary}

    def _train(self, resumed: bool, initialized: bool) -> None:
        cfg, trainer = self.cfg, self.trainer
        cb = self._on_iteration
        if cfg.stage == "1":
            train_stage1(trainer, cfg.steps, cb)
        else:
            continuing = resumed and trainer.stage == 2
            if cfg.stage == "both" and not continuing:
                train_stage1(trainer, cfg.steps, cb)
                self.checkpoint("stage1")
            if self.stage2_end is None:
                budget = cfg.steps if cfg.stage == "2" else cfg.stage2_budget
                self.stage2_end = trainer.env_steps + budget
            train_stage2(trainer, self.stage2_end, cb, reset_hidden=not continuing)
        self.checkpoint("final")

    def _final_eval(self) -> dict | None:
        cfg = self.cfg
        if cfg.eval_episodes <= 0:
            return None
        dyn = cfg.dyn_gate and self.trainer.stage == 2
        return evaluate(self.trainer.model, env_factory(cfg), cfg.eval_episodes, seed=cfg.seed, dyn_gate=dyn)

    def _write_manifest(self, status: str, summary: dict | None) -> None:
        trainer = self.trainer
        manifest = {
            "status": status,
            "config_hash": self.cfg.hash(),
            "code_version": __version__,
            "started": self.started,
            "finished": _now(),
            "env": self.cfg.env,
            "n_agents": trainer.model.config.n_agents,
            "sparsity": self.cfg.sparsity,
            "k": trainer.model.spec.k,
            "stage": trainer.stage,
            "iterations": trainer.iteration,
            "env_steps": trainer.env_steps,
            "execution_graph": trainer.base_graph().edges.astype(int).tolist(),
            "final_metrics": self.last_metrics,
            "eval": summary,
            "checkpoints": list(self.checkpoints),
        }
        _write_atomic(self.out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _fmt(value) -> str:
    return "-" if value is None else f"{value:.3f}"


def run_eval(checkpoint: str | Path, episodes: int, seed: int = 0, dyn_gate: bool = False,
             greedy: bool = False) -> dict:
    if not (Path(checkpoint) / "manifest.json").exists():
        raise CheckpointError(f"no checkpoint at {checkpoint}")
    model, cfg = model_from_checkpoint(checkpoint)
    start = time.perf_counter()
    result = evaluate(model, env_factory(cfg), episodes, seed=seed, dyn_gate=dyn_gate, greedy=greedy)
    result["checkpoint"] = str(checkpoint)
    result["dyn_gate"] = dyn_gate
    result["greedy"] = greedy
    result["seconds"] = round(time.perf_counter() - start, 3)
    return result
