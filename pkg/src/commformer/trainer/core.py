"""Bi-level training loop.

Each iteration collects ``rollout_length`` steps from every worker with the
deterministic execution graph, then alternates ``ppo_epochs`` times between

- an inner step on the encoder/decoder weights, using the training episodes
  and a freshly sampled k-hot graph, and
- an outer step on the graph logits (stage 1) or the gate networks (stage 2),
  using the validation episodes.

The target encoder is refreshed once per iteration.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from commformer.commgraph import CommGraph, apply_dynamic_gate, full_graph, identity_graph, sample_khot_gumbel
from commformer.diffmath import Adam, ParameterStore, Tensor, clip_grad_norm, no_grad, take_along_last
from commformer.envs import VecEnv
from commformer.errors import ConfigError
from commformer.gating import GateDecision, gate_forward, gate_forward_recurrent
from commformer.model import CommFormer
from commformer.relformer import act_autoregressive
from commformer.seeding import derive_rng
from commformer.trainer.buffer import Batch, RolloutBuffer
from commformer.trainer.losses import (
    compute_gae,
    decoder_loss,
    encoder_loss,
    normalize_advantages,
    policy_entropy,
    td_targets,
)


# "full" and "identity" fix the graph (ablations); "learned" searches it
GRAPH_MODES = ("learned", "full", "identity")


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    ppo_clip: float = 0.05
    ppo_epochs: int = 10
    lr: float = 5e-4
    alpha_lr: float = 1e-2
    gate_lr: float = 5e-4
    adam_eps: float = 1e-5
    entropy_coef: float = 0.01
    max_grad_norm: float = 10.0
    use_huber: bool = True
    huber_delta: float = 10.0
    target_rule: str = "ema"
    target_tau: float = 0.005
    target_period: int = 10
    train_fraction: float = 0.5
    n_envs: int = 32
    rollout_length: int = 100
    gumbel_temperature: float = 1.0
    gate_temperature: float = 1.0
    gate_penalty: float = 0.0
    freeze_backbone: bool = False
    graph: str = "learned"

    def __post_init__(self):
        if self.graph not in GRAPH_MODES:
            raise ConfigError(f"graph must be one of {GRAPH_MODES}, got {self.graph!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError(f"gae_lambda must lie in [0, 1], got {self.gae_lambda}")
        if self.ppo_clip <= 0:
            raise ConfigError(f"ppo_clip must be positive, got {self.ppo_clip}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.target_rule not in ("ema", "hard"):
            raise ConfigError(f"target_rule must be 'ema' or 'hard', got {self.target_rule!r}")
        if not 0.0 <= self.target_tau <= 1.0:
            raise ConfigError(f"target_tau must lie in [0, 1], got {self.target_tau}")
        for name in ("ppo_epochs", "n_envs", "rollout_length", "target_period"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.gumbel_temperature <= 0 or self.gate_temperature <= 0:
            raise ConfigError("temperatures must be positive")

    @property
    def batch_size(self) -> int:
        return self.n_envs * self.rollout_length

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


def update_target(pairs, rule: str = "ema", tau: float = 0.005, period: int = 1, iteration: int = 0) -> None:
    """Move each target tensor toward its source.

    ``ema``: ``target <- (1 - tau) target + tau source``.  ``hard``: copy the
    source whenever ``iteration`` is a multiple of ``period``.
    """
    if rule == "ema":
        for target, source in pairs:
            if target.shape != source.shape:
                raise ValueError(f"target shape {target.shape} != source {source.shape}")
            target.data = ((1.0 - tau) * target.data + tau * source.data).astype(target.dtype)
    elif rule == "hard":
        if iteration % period == 0:
            for target, source in pairs:
                target.data = source.data.copy()
    else:
        raise ConfigError(f"unknown target rule {rule!r}")


@dataclass
class LossParts:
    total: Tensor
    encoder: float
    decoder: float
    entropy: float


class Trainer:
    def __init__(self, model: CommFormer, vec: VecEnv, config: TrainConfig, seed: int, stage: int = 1):
        if vec.n_agents != model.config.n_agents:
            raise ConfigError(f"environment has {vec.n_agents} agents, model {model.config.n_agents}")
        self.model = model
        self.vec = vec
        self.config = config
        self.seed = seed
        self.dtype = model.config.np_dtype
        self.rngs = {label: derive_rng(seed, label) for label in ("sampler", "gate", "action")}
        self.opt_backbone = Adam(model.backbone_params(), config.lr, eps=config.adam_eps)
        self.opt_alpha = Adam(model.alpha_params(), config.alpha_lr, eps=config.adam_eps)
        self.opt_gate = Adam(model.gate_params(), config.gate_lr, eps=config.adam_eps)
        self.iteration = 0
        self.env_steps = 0
        self.gate_hidden = self._zero_hidden() if model.config.gate_recurrent else None
        self.set_stage(stage)

    # -- bookkeeping ---------------------------------------------------------

    def set_stage(self, stage: int) -> None:
        if stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {stage}")
        self.stage = stage

    def _zero_hidden(self) -> np.ndarray:
        m = self.model.config
        return np.zeros((self.vec.n_envs, m.n_agents, m.hidden_dim), self.dtype)

    def state_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "stage": self.stage,
            "rngs": {k: r.bit_generator.state for k, r in self.rngs.items()},
            "vec": self.vec.get_state(),
            "gate_hidden": None if self.gate_hidden is None else self.gate_hidden.tolist(),
        }

    def optimizer_states(self) -> dict[str, dict]:
        return {"backbone": self.opt_backbone.state_dict(), "alpha": self.opt_alpha.state_dict(),
                "gate": self.opt_gate.state_dict()}

    def load_state_dict(self, state: dict, optimizers: dict[str, dict] | None = None) -> None:
        self.iteration = int(state["iteration"])
        self.env_steps = int(state["env_steps"])
        self.set_stage(int(state["stage"]))
        for k, s in state["rngs"].items():
            self.rngs[k].bit_generator.state = s
        self.vec.set_state(state["vec"])
        if state.get("gate_hidden") is not None:
            self.gate_hidden = np.array(state["gate_hidden"], dtype=self.dtype)
        if optimizers:
            self.opt_backbone.load_state_dict(optimizers["backbone"])
            self.opt_alpha.load_state_dict(optimizers["alpha"])
            self.opt_gate.load_state_dict(optimizers["gate"])

    # -- graphs ----------------------------------------------------------------

    def _gate(self, obs, hidden, mode: str, rng=None) -> tuple[GateDecision, np.ndarray | None]:
        temp = self.config.gate_temperature
        if self.model.config.gate_recurrent:
            decision, nxt = gate_forward_recurrent(obs, hidden, self.model.gates, mode=mode, rng=rng, temperature=temp)
            return decision, nxt.data
        return gate_forward(obs, self.model.gates, mode=mode, rng=rng, temperature=temp), None

    def base_graph(self) -> CommGraph:
        n = self.model.config.n_agents
        if self.config.graph == "full":
            return full_graph(n)
        if self.config.graph == "identity":
            return identity_graph(n)
        return self.model.execution_graph()

    def execution_graph(self, obs, hidden=None) -> tuple[CommGraph, GateDecision | None, np.ndarray | None]:
        """Deterministic graph used for acting; gated in stage 2."""
        base = self.base_graph()
        if self.stage == 1:
            return base, None, None
        with no_grad():
            decision, nxt = self._gate(obs, hidden, "inference")
        return apply_dynamic_gate(base, decision.h), decision, nxt

    def training_graphs(self, batch: Batch, phase: str = "outer") -> tuple[CommGraph, CommGraph,
                                                                              GateDecision | None]:
        """(graph for the loss, constant graph for the target values, gate decision).

        In stage 2 the inner phase gates with the same deterministic decisions
        the rollouts acted under, so the PPO ratio compares like with like;
        the outer phase samples gates so their logits receive a gradient.
        """
        if self.stage == 1 and self.config.graph != "learned":
            g = self.base_graph()
            return g, g, None
        if self.stage == 1:
            g = sample_khot_gumbel(self.model.logits, self.model.spec, rng=self.rngs["sampler"],
                                   temperature=self.config.gumbel_temperature)
            return g, CommGraph(edges=g.edges), None
        base = self.base_graph()
        with no_grad():
            nxt, _ = self._gate(batch.next_obs, batch.next_gate_hidden, "inference")
            if phase == "inner":
                decision, _ = self._gate(batch.obs, batch.gate_hidden, "inference")
        if phase == "outer":
            decision, _ = self._gate(batch.obs, batch.gate_hidden, "train", rng=self.rngs["gate"])
        return apply_dynamic_gate(base, decision), apply_dynamic_gate(base, nxt.h), decision

    # -- losses ------------------------------------------------------------------

    def batch_loss(self, batch: Batch, graph, target_graph) -> LossParts:
        cfg = self.config
        model = self.model
        reps, values = model.encoder(batch.obs, graph)
        with no_grad():
            _, next_values = model.target_encoder(batch.next_obs, target_graph)
        targets = td_targets(batch.rewards, next_values.data, batch.dones, cfg.gamma)
        l_enc = encoder_loss(values, targets, use_huber=cfg.use_huber, delta=cfg.huber_delta)
        logp_all = model.decoder(reps, batch.actions, graph, batch.available)
        logp = take_along_last(logp_all, batch.actions)
        entropy = policy_entropy(logp_all)
        l_dec = decoder_loss(logp, batch.old_log_probs, batch.advantages, cfg.ppo_clip, entropy, cfg.entropy_coef)
        return LossParts(total=l_enc + l_dec, encoder=l_enc.item(), decoder=l_dec.item(), entropy=entropy.item())

    def inner_step(self, batch: Batch) -> tuple[LossParts, float]:
        """One gradient step of the encoder/decoder weights on ``batch``."""
        self.model.store.zero_grad()
        graph, target_graph, _ = self.training_graphs(batch, "inner")
        parts = self.batch_loss(batch, graph, target_graph)
        if self.stage == 2 and self.config.freeze_backbone:
            return parts, 0.0
        parts.total.backward()
        norm = clip_grad_norm(self.opt_backbone.store, self.config.max_grad_norm)
        self.opt_backbone.step()
        return parts, norm

    def outer_step(self, batch: Batch) -> tuple[LossParts, float]:
        """One gradient step of the upper-level variable (alpha, or the gates)."""
        self.model.store.zero_grad()
        graph, target_graph, decision = self.training_graphs(batch, "outer")
        parts = self.batch_loss(batch, graph, target_graph)
        loss = parts.total
        if decision is not None and self.config.gate_penalty:
            loss = loss + decision.soft.mean() * self.config.gate_penalty
        loss.backward()
        opt = self.opt_alpha if self.stage == 1 else self.opt_gate
        norm = clip_grad_norm(opt.store, self.config.max_grad_norm)
        opt.step()
        return parts, norm

    # -- rollouts -------------------------------------------------------------------

    def collect(self) -> tuple[RolloutBuffer, list, float]:
        """Run every worker for ``rollout_length`` steps with sampled actions."""
        vec, model, cfg = self.vec, self.model, self.config
        if vec.obs is None:
            vec.reset()
            if self.gate_hidden is not None:
                self.gate_hidden = self._zero_hidden()
        gate_dim = model.config.hidden_dim if model.config.gate_recurrent else None
        buf = RolloutBuffer(cfg.rollout_length, vec.n_envs, vec.n_agents, vec.obs_dim, vec.n_actions,
                            gate_dim=gate_dim, dtype=self.dtype)
        finished = []
        open_total = 0.0
        for _ in range(cfg.rollout_length):
            obs = vec.obs.astype(self.dtype)
            available = vec.available_actions()
            hidden_in = self.gate_hidden
            graph, decision, hidden_out = self.execution_graph(obs, hidden_in)
            res = act_autoregressive(obs, graph, model.encoder, model.decoder, mode="sample",
                                     rng=self.rngs["action"], available=available)
            episode_ids = vec.episode_ids.copy()
            _, rewards, dones, done_stats = vec.step(res.actions)
            gate_open = None if decision is None else decision.h
            open_total += 1.0 if decision is None else float(decision.h.mean())
            buf.insert(obs, res.actions, res.log_probs, res.values, rewards, dones, available, episode_ids,
                       gate_open=gate_open, gate_hidden=hidden_in)
            if hidden_out is not None:
                self.gate_hidden = np.where(dones[:, None, None], 0.0, hidden_out).astype(self.dtype)
            finished.extend(done_stats)
        self.env_steps += cfg.rollout_length * vec.n_envs
        buf.last_obs[:] = vec.obs
        if self.gate_hidden is not None:
            buf.last_gate_hidden[:] = self.gate_hidden
        with no_grad():
            graph, _, _ = self.execution_graph(buf.last_obs, self.gate_hidden)
            _, last_values = model.encoder(buf.last_obs, graph)
        buf.last_values[:] = last_values.data
        return buf, finished, open_total / cfg.rollout_length

    # -- one iteration ------------------------------------------------------------------

    def iterate(self) -> dict:
        cfg = self.config
        buf, finished, open_fraction = self.collect()
        adv, _ = compute_gae(buf.rewards, buf.values.mean(axis=-1), buf.dones, buf.last_values.mean(axis=-1),
                             cfg.gamma, cfg.gae_lambda)
        adv = normalize_advantages(adv)
        mask = buf.train_mask(cfg.train_fraction)
        train, val = buf.batch(adv, mask), buf.batch(adv, ~mask)

        inner_log, outer_log = [], []
        for _ in range(cfg.ppo_epochs):
            if len(train):
                inner_log.append(self.inner_step(train))
            if len(val) and not (self.stage == 1 and cfg.graph != "learned"):
                outer_log.append(self.outer_step(val))
        update_target(self.model.target_pairs(), cfg.target_rule, cfg.target_tau, cfg.target_period,
                      self.iteration)
        self.iteration += 1
        return self._metrics(finished, inner_log, outer_log, open_fraction)

    def _metrics(self, finished, inner_log, outer_log, open_fraction) -> dict:
        def avg(values):
            return float(np.mean(values)) if values else None

        upper = "alpha" if self.stage == 1 else "gate"
        return {
            "iteration": self.iteration,
            "stage": self.stage,
            "env_steps": self.env_steps,
            "episodes": len(finished),
            "mean_return": avg([e.ret for e in finished]),
            "success_rate": avg([float(e.success) for e in finished]),
            "mean_steps_taken": avg([e.steps_taken for e in finished]),
            "encoder_loss": avg([p.encoder for p, _ in inner_log]),
            "decoder_loss": avg([p.decoder for p, _ in inner_log]),
            "entropy": avg([p.entropy for p, _ in inner_log]),
            "val_loss": avg([p.encoder + p.decoder for p, _ in outer_log]),
            "grad_norms": {"backbone": avg([n for _, n in inner_log]), upper: avg([n for _, n in outer_log])},
            "gate_open_fraction": open_fraction,
            "alpha_snapshot_ref": None,
        }


def _run(trainer: Trainer, total_steps: int, callback, stop) -> list[dict]:
    history = []
    while trainer.env_steps < total_steps:
        metrics = trainer.iterate()
        history.append(metrics)
        if callback is not None:
            callback(metrics, trainer)
        if stop is not None and stop(metrics):
            break
    return history


def train_stage1(trainer: Trainer, total_steps: int, callback: Callable | None = None,
                 stop: Callable[[dict], bool] | None = None) -> list[dict]:
    """Learn the graph logits jointly with the encoder/decoder until ``total_steps``."""
    trainer.set_stage(1)
    return _run(trainer, total_steps, callback, stop)


def train_stage2(trainer: Trainer, total_steps: int, callback: Callable | None = None,
                 stop: Callable[[dict], bool] | None = None, reset_hidden: bool = True) -> list[dict]:
    """Freeze the graph logits and learn the gates; ``total_steps`` counts both stages.

    ``reset_hidden=False`` keeps a restored recurrent gate state when resuming.
    """
    trainer.set_stage(2)
    if reset_hidden and trainer.gate_hidden is not None:
        trainer.gate_hidden = trainer._zero_hidden()
    return _run(trainer, total_steps, callback, stop)


def evaluate(model: CommFormer, env_factory: Callable[[int], object], episodes: int, seed: int,
             dyn_gate: bool = False, greedy: bool = False, graph: CommGraph | None = None) -> dict:
    """Run ``episodes`` episodes in parallel, one per environment instance.

    Acting uses the deterministic top-k graph (or ``graph`` when given); with
    ``dyn_gate`` each row is additionally masked by the inference-mode gate
    decisions.  Actions are drawn from the policy unless ``greedy`` is set.
    """
    rng = derive_rng(seed, "eval")
    env_seeds = rng.integers(0, 2**31, size=episodes)
    vec = VecEnv([env_factory(int(s)) for s in env_seeds])
    obs = vec.reset()
    dtype = model.config.np_dtype
    base = graph if graph is not None else model.execution_graph()
    hidden = np.zeros((episodes, model.config.n_agents, model.config.hidden_dim), dtype) \
        if model.config.gate_recurrent else None
    first: dict[int, object] = {}
    open_fracs = []
    action_rng = derive_rng(seed, "eval-action")
    while len(first) < episodes:
        graph = base
        if dyn_gate:
            with no_grad():
                if hidden is not None:
                    decision, nxt = gate_forward_recurrent(obs.astype(dtype), hidden, model.gates)
                    hidden = nxt.data
                else:
                    decision = gate_forward(obs.astype(dtype), model.gates)
            graph = apply_dynamic_gate(base, decision.h)
            pending = [w for w in range(episodes) if w not in first]
            open_fracs.append(float(decision.h[pending].mean()))
        res = act_autoregressive(obs.astype(dtype), graph, model.encoder, model.decoder,
                                 mode="greedy" if greedy else "sample", rng=action_rng,
                                 available=vec.available_actions())
        obs, _, dones, stats = vec.step(res.actions)
        if hidden is not None:
            hidden = np.where(dones[:, None, None], 0.0, hidden).astype(dtype)
        for st in stats:
            # the initial reset numbers worker w's first episode w
            if st.episode_id < episodes:
                first[st.episode_id] = st
    results = [first[w] for w in range(episodes)]
    return {
        "episodes": episodes,
        "success_rate": float(np.mean([r.success for r in results])),
        "mean_steps_taken": float(np.mean([r.steps_taken for r in results])),
        "mean_return": float(np.mean([r.ret for r in results])),
        "gate_open_fraction": float(np.mean(open_fracs)) if open_fracs else 1.0,
    }
