"""Finite-difference suite for the full stage-1 loss.

The hard straight-through graph is piecewise constant in the logits, so
central differences cannot see its surrogate gradient.  The suite uses the
relaxed graph instead (soft weights on the forward pass), which runs the
same soft path the straight-through estimator backpropagates through.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from commformer.commgraph import CommGraph, sample_khot_gumbel
from commformer.diffmath import ParameterStore, gradcheck, no_grad, take_along_last
from commformer.envs import VecEnv, make_env
from commformer.model import CommFormer, ModelConfig
from commformer.seeding import derive_rng
from commformer.trainer import Batch, TrainConfig, Trainer


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    tol: float
    entries: int
    seconds: float
    worst: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} {self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g}, "
                f"{self.entries} entries, worst {self.worst}, {self.seconds:.1f}s)")


def stage1_instance(seed: int = 0, n_agents: int = 3, batch: int = 4, hidden_dim: int = 8, env: str = "pp"):
    """A double-precision trainer and batch drawn from real environment observations."""
    rng = derive_rng(seed, "gradcheck")
    vec = VecEnv([make_env(env, n_agents, seed=int(s)) for s in rng.integers(0, 2**31, size=batch)])
    model = CommFormer(ModelConfig(vec.obs_dim, vec.n_actions, n_agents, sparsity=1.0 / n_agents,
                                   hidden_dim=hidden_dim, dtype="float64"), derive_rng(seed, "init"))
    # move the logits away from the near-uniform init so the soft path carries signal
    model.alpha.data = rng.normal(0.0, 1.0, model.alpha.shape)
    trainer = Trainer(model, vec, TrainConfig(n_envs=batch, rollout_length=1), seed=seed)
    obs = vec.reset()
    actions = rng.integers(0, vec.n_actions, size=(batch, n_agents))
    next_obs, rewards, dones, _ = vec.step(actions)
    graph = model.execution_graph()
    with no_grad():
        reps, _ = model.encoder(obs, graph)
        logp = take_along_last(model.decoder(reps, actions, graph, vec.available_actions()), actions).data
    # old log-probs stay inside the clip band so the surrogate is smooth here
    old = logp + rng.uniform(-0.02, 0.02, size=logp.shape)
    data = Batch(obs=obs, next_obs=next_obs, actions=actions, old_log_probs=old,
                 advantages=rng.normal(size=batch), rewards=rewards, dones=dones,
                 available=np.ones((batch, n_agents, vec.n_actions), bool))
    return trainer, data


def check_stage1_loss(seed: int = 0, n_agents: int = 3, batch: int = 4, hidden_dim: int = 8,
                      tol: float = 1e-4, step: float = 1e-5, max_entries: int | None = None) -> SuiteResult:
    """Gradcheck the encoder + decoder loss on every trainable tensor and the logits."""
    start = time.perf_counter()
    trainer, data = stage1_instance(seed, n_agents, batch, hidden_dim)
    model = trainer.model
    noise = derive_rng(seed, "gradcheck-noise").gumbel(size=(n_agents, n_agents))

    def loss():
        g = sample_khot_gumbel(model.alpha, model.spec, noise=noise, relaxed=True)
        return trainer.batch_loss(data, g, CommGraph(edges=g.edges)).total

    params = ParameterStore({n: t for n, t in model.store.items()
                             if n.startswith(("encoder.", "decoder.")) or n == "alpha"})
    report = gradcheck(loss, params, step=step, tol=tol, max_entries=max_entries)
    name, _ = report.worst()
    return SuiteResult("stage-1 loss", report.max_rel_error, tol, report.entries_checked,
                       time.perf_counter() - start, name)


def run_suite(seed: int = 0, tol: float = 1e-4) -> list[SuiteResult]:
    return [check_stage1_loss(seed=seed, tol=tol)]
