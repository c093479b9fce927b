"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

The training criteria (7-9) take minutes of CPU time and carry the
``training`` marker.  Early stopping looks only at validation episodes whose
seeds are disjoint from the reported evaluation episodes.
"""

import time

import numpy as np
import pytest

from commformer import diffmath as dm
from commformer.commgraph import (
    AdjacencyLogits,
    CommGraph,
    SparsitySpec,
    argmax_khot,
    identity_graph,
    sample_khot_gumbel,
)
from commformer.envs import VecEnv, make_env
from commformer.harness import Run, RunConfig
from commformer.harness.gradsuite import check_stage1_loss
from commformer.model import CommFormer, ModelConfig
from commformer.relformer import Encoder
from commformer.seeding import derive_rng, worker_seeds
from commformer.trainer import TrainConfig, Trainer, compute_gae, decoder_loss, evaluate, train_stage1, train_stage2

TEST_EVAL_SEED = 2024
VAL_EVAL_OFFSET = 10_000


@pytest.fixture
def report(capsys):
    def emit(number: int, name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nCRITERION {number} {name}: {'PASS' if ok else 'FAIL'} | {detail}")

    return emit


# -- 1 -----------------------------------------------------------------------------


def test_c1_full_loss_gradcheck(report):
    start = time.perf_counter()
    result = check_stage1_loss(seed=0, n_agents=3, batch=4, tol=1e-4)
    elapsed = time.perf_counter() - start
    ok = result.passed and elapsed < 60.0
    report(1, "gradient correctness", ok,
           f"max rel err {result.max_rel_error:.2e} < 1e-4 over {result.entries} entries, {elapsed:.1f}s < 60s")
    assert ok


# -- 2 -----------------------------------------------------------------------------


def test_c2_mask_soundness(report):
    rng = np.random.default_rng(2)
    violations = 0
    checked = 0
    for trial in range(200):
        n = int(rng.integers(2, 7))
        obs_dim = int(rng.integers(2, 6))
        store = dm.ParameterStore()
        enc = Encoder(store, "enc", obs_dim, 8, 1, rng)
        edges = np.maximum(rng.random((n, n)) < 0.5, np.eye(n, dtype=bool)).astype(float)
        obs = dm.Tensor(rng.standard_normal((2, n, obs_dim)), requires_grad=True)
        reps, _ = enc(obs, CommGraph(edges=edges))
        for i in range(n):
            obs.grad = None
            store.zero_grad()
            weights = rng.standard_normal(reps.shape[-1])
            (reps[:, i] * weights).sum().backward()
            per_sender = np.abs(obs.grad).sum(axis=(0, 2))
            for j in range(n):
                if j != i and edges[i, j] == 0:
                    checked += 1
                    violations += int(per_sender[j] != 0.0)
    ok = violations == 0 and checked > 0
    report(2, "mask soundness", ok, f"200 instances, {checked} absent edges, {violations} nonzero gradients")
    assert ok


# -- 3 -----------------------------------------------------------------------------


def test_c3_sparsity_constraint(report):
    rng = np.random.default_rng(3)
    bad = 0
    combos = [(n, s) for n in (3, 8, 10) for s in (0.2, 0.4, 0.6)]
    for trial in range(1000):
        n, s = combos[trial % len(combos)]
        spec = SparsitySpec(s, n)
        expected = max(1, int(np.floor(s * n + 0.5)))
        logits = AdjacencyLogits(dm.ParameterStore(), n, rng, init_scale=float(rng.uniform(0.01, 3.0)))
        sampled = sample_khot_gumbel(logits, spec, rng=rng)
        det = argmax_khot(logits, spec)
        for g in (sampled, det):
            counts = g.off_diagonal_counts()
            bad += int(not np.all(counts == expected) or spec.k != expected
                       or not np.all(np.diag(g.edges) == 1))
    ok = bad == 0
    report(3, "sparsity constraint", ok, f"1000 sampled + 1000 deterministic graphs, {bad} rows off budget")
    assert ok


# -- 4 -----------------------------------------------------------------------------


def test_c4_gumbel_sampler_law(report):
    # row 2 of a 3-agent graph reads (log 2, 0, 0); its last entry is the
    # self-edge, which never competes, leaving softmax(log 2, 0) = (2/3, 1/3)
    alpha = np.zeros((3, 3))
    alpha[2] = [np.log(2.0), 0.0, 0.0]
    spec = SparsitySpec(0.4, 3)
    rng = np.random.default_rng(4)
    noise = rng.gumbel(size=(10_000, 3, 3))
    g = sample_khot_gumbel(dm.Tensor(alpha), spec, noise=noise)
    freq = float(g.edges[:, 2, 0].mean())
    ok = spec.k == 1 and abs(freq - 2.0 / 3.0) <= 0.02
    report(4, "Gumbel sampler law", ok, f"first-edge frequency {freq:.4f}, target 0.6667 +- 0.02")
    assert ok


# -- 5 -----------------------------------------------------------------------------


def brute_gae(rewards, values, dones, last_value, gamma, lam):
    T = len(rewards)
    ext = np.append(values, last_value)
    deltas = [rewards[t] + gamma * ext[t + 1] * (1 - dones[t]) - values[t] for t in range(T)]
    adv = np.zeros(T)
    for t in range(T):
        total, weight = 0.0, 1.0
        for l in range(T - t):
            total += weight * deltas[t + l]
            if dones[t + l]:
                break
            weight *= gamma * lam
        adv[t] = total
    return adv


def test_c5_gae_oracle(report):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        T = int(rng.integers(1, 9))
        rewards = rng.normal(size=T)
        values = rng.normal(size=T)
        dones = rng.random(T) < 0.3
        last = float(rng.normal())
        gamma, lam = float(rng.uniform(0.8, 1.0)), float(rng.uniform(0.0, 1.0))
        adv, ret = compute_gae(rewards[:, None], values[:, None], dones[:, None], np.array([last]), gamma, lam)
        oracle = brute_gae(rewards, values, dones, last, gamma, lam)
        worst = max(worst, float(np.abs(adv[:, 0] - oracle).max()), float(np.abs(ret[:, 0] - oracle - values).max()))
    ok = worst <= 1e-10
    report(5, "GAE oracle", ok, f"100 instances, max abs deviation {worst:.2e} <= 1e-10")
    assert ok


# -- 6 -----------------------------------------------------------------------------


def test_c6_ppo_clip_cases(report):
    adv = np.array([0.7, -1.3, 2.0])
    old = np.log(np.array([0.2, 0.5, 0.3]))
    unit = decoder_loss(dm.Tensor(old), old, adv, 0.2).item()
    up = decoder_loss(dm.Tensor(np.array([np.log(2.0)])), np.zeros(1), np.ones(1), 0.2).item()
    down = decoder_loss(dm.Tensor(np.array([np.log(0.5)])), np.zeros(1), -np.ones(1), 0.2).item()
    cases = [(unit, -adv.mean()), (-up, 1.2), (-down, -0.8)]
    ok = all(got == pytest.approx(want, abs=1e-12) for got, want in cases)
    report(6, "PPO clip cases", ok,
           f"ratio 1 loss {unit:.6f} (want {-adv.mean():.6f}), ratio 2 surrogate {-up:.6f} (want 1.2), "
           f"ratio 0.5 surrogate {-down:.6f} (want -0.8)")
    assert ok


# -- 7 -----------------------------------------------------------------------------

DIAG_BUDGET = 500_000
DIAG_ABLATION_STEPS = 30_000


def _diag_trainer(seed: int, graph: str = "learned") -> Trainer:
    vec = VecEnv([make_env("diag", 3, seed=s) for s in worker_seeds(seed, "env", 32)])
    model = CommFormer(ModelConfig(vec.obs_dim, vec.n_actions, 3, sparsity=0.4, hidden_dim=32, dtype="float32"),
                       derive_rng(seed, "init"))
    return Trainer(model, vec, TrainConfig(n_envs=32, rollout_length=8, graph=graph), seed)


def _diag_factory(seed):
    return make_env("diag", 3, seed=seed)


@pytest.mark.training
def test_c7_graph_search_end_to_end(report):
    start = time.perf_counter()
    recovered, learned_success, steps_used = [], [], []
    for seed in range(5):
        tr = _diag_trainer(seed)

        def stop(metrics, tr=tr, seed=seed):
            if metrics["iteration"] % 10:
                return False
            val = evaluate(tr.model, _diag_factory, 200, VAL_EVAL_OFFSET + seed)
            return val["success_rate"] >= 0.98

        train_stage1(tr, DIAG_BUDGET, stop=stop)
        edges = tr.model.execution_graph().edges
        recovered.append(bool(edges[1, 0] == 1))
        learned_success.append(evaluate(tr.model, _diag_factory, 200, TEST_EVAL_SEED + seed)["success_rate"])
        steps_used.append(tr.env_steps)
    ablation = []
    for seed in range(5):
        tr = _diag_trainer(seed, graph="identity")
        train_stage1(tr, DIAG_ABLATION_STEPS)
        ablation.append(evaluate(tr.model, _diag_factory, 200, TEST_EVAL_SEED + seed,
                                 graph=identity_graph(3))["success_rate"])
    mean_learned, mean_ablation = float(np.mean(learned_success)), float(np.mean(ablation))
    ok = sum(recovered) >= 4 and mean_learned >= 0.95 and mean_ablation <= 0.6
    report(7, "graph search end-to-end", ok,
           f"edge 0->1 recovered in {sum(recovered)}/5 seeds (need 4); success {mean_learned:.3f} >= 0.95 "
           f"(per seed {[round(s, 3) for s in learned_success]}); identity ablation {mean_ablation:.3f} <= 0.6; "
           f"steps {steps_used}; {time.perf_counter() - start:.0f}s")
    assert ok


# -- 8 and 9 -------------------------------------------------------------------------

PP_BUDGET = 2_000_000
PP_STAGE2_STEPS = 80_000
PP_GATE_PENALTY = 0.05
PP_SEED = 0


def _pp_factory(seed):
    return make_env("pp", 3, seed=seed)


@pytest.fixture(scope="module")
def pp_run():
    """Stage 1 on 3-predator PP, then stage 2 from the same weights."""
    start = time.perf_counter()
    vec = VecEnv([make_env("pp", 3, seed=s) for s in worker_seeds(PP_SEED, "env", 16)])
    model = CommFormer(ModelConfig(vec.obs_dim, vec.n_actions, 3, sparsity=0.4, hidden_dim=64, dtype="float32"),
                       derive_rng(PP_SEED, "init"))
    # the gate settings only act in stage 2: a small open-gate penalty, a faster gate optimizer and a
    # frozen backbone, so the gates learn where a message can be dropped without retraining the policy
    tr = Trainer(model, vec, TrainConfig(n_envs=16, rollout_length=50, gate_penalty=PP_GATE_PENALTY, gate_lr=5e-3,
                                         freeze_backbone=True), PP_SEED)

    def stop(metrics):
        if metrics["iteration"] % 25:
            return False
        val = evaluate(model, _pp_factory, 100, VAL_EVAL_OFFSET + PP_SEED, dyn_gate=tr.stage == 2)
        return tr.stage == 1 and val["success_rate"] >= 0.95 and val["mean_steps_taken"] <= 9.0

    train_stage1(tr, PP_BUDGET, stop=stop)
    out = {
        "stage1_steps": tr.env_steps,
        "k": model.spec.k,
        "stage1": evaluate(model, _pp_factory, 100, TEST_EVAL_SEED),
        "stage1_greedy": evaluate(model, _pp_factory, 100, TEST_EVAL_SEED, greedy=True),
        "stage1_seconds": time.perf_counter() - start,
    }
    history = train_stage2(tr, tr.env_steps + PP_STAGE2_STEPS)
    out["stage2_logged_open"] = [m["gate_open_fraction"] for m in history]
    out["stage2_dyn"] = evaluate(model, _pp_factory, 100, TEST_EVAL_SEED, dyn_gate=True)
    out["stage2_seconds"] = time.perf_counter() - start - out["stage1_seconds"]
    return out


@pytest.mark.training
def test_c8_predator_prey(report, pp_run):
    res = pp_run["stage1"]
    ok = pp_run["k"] == 1 and pp_run["stage1_steps"] <= PP_BUDGET and res["success_rate"] >= 0.9 \
        and res["mean_steps_taken"] <= 10.0
    greedy = pp_run["stage1_greedy"]
    report(8, "predator-prey desk scale", ok,
           f"success {res['success_rate']:.2f} >= 0.9, steps {res['mean_steps_taken']:.2f} <= 10 over 100 episodes "
           f"after {pp_run['stage1_steps']} env steps (k={pp_run['k']}); greedy-action success "
           f"{greedy['success_rate']:.2f}, steps {greedy['mean_steps_taken']:.2f}; {pp_run['stage1_seconds']:.0f}s")
    assert ok


@pytest.mark.training
def test_c9_gating_parity(report, pp_run):
    static, dyn = pp_run["stage1"], pp_run["stage2_dyn"]
    logged = pp_run["stage2_logged_open"]
    gap = abs(dyn["success_rate"] - static["success_rate"])
    mean_logged = float(np.mean(logged))
    ok = gap <= 0.10 and mean_logged < 1.0 and dyn["gate_open_fraction"] < 1.0
    report(9, "gating parity", ok,
           f"dyn success {dyn['success_rate']:.2f} vs static {static['success_rate']:.2f} (gap {gap:.2f} <= 0.10); "
           f"logged gate_open_fraction mean {mean_logged:.3f} < 1, at evaluation {dyn['gate_open_fraction']:.3f}; "
           f"{PP_STAGE2_STEPS} stage-2 steps, open penalty {PP_GATE_PENALTY}, backbone frozen; "
           f"{pp_run['stage2_seconds']:.0f}s")
    assert ok


# -- 10 ------------------------------------------------------------------------------


def test_c10_determinism(report, tmp_path):
    cfg = RunConfig().with_overrides({"env": "pp", "steps": "600", "seed": "7", "train.n_envs": "1",
                                      "train.rollout_length": "30", "model.hidden_dim": "16",
                                      "eval_episodes": "0", "checkpoint_every": "10"})
    for name in ("a", "b"):
        Run(cfg, tmp_path / name, log=lambda m: None).execute()
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    records = a.count(b"\n")
    ok = a == b and records > 0
    report(10, "determinism", ok, f"two single-worker runs, {records} records each, byte-identical: {a == b}")
    assert ok
