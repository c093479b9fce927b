"""Advantage estimation and the encoder (critic) and decoder (actor) losses."""

from __future__ import annotations

import numpy as np

from commformer.diffmath import Tensor, clip, exp, huber, minimum
from commformer.errors import ArityError, NumericError


def joint_value(values) -> np.ndarray:
    """Mean of the per-agent values over the last axis."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 0 or values.shape[-1] == 0:
        raise ArityError("joint value needs at least one agent")
    return values.mean(axis=-1)


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and returns along the leading time axis.

    ``rewards``, ``values`` and ``dones`` share shape ``(T, ...)``;
    ``last_values`` bootstraps the step after ``T - 1``.  A done flag at
    step ``t`` cuts both the bootstrap and the recursion there.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    nonterminal = 1.0 - np.asarray(dones, dtype=float)
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    next_values = np.asarray(last_values, dtype=float)
    for t in reversed(range(rewards.shape[0])):
        delta = rewards[t] + gamma * next_values * nonterminal[t] - values[t]
        running = delta + gamma * lam * nonterminal[t] * running
        adv[t] = running
        next_values = values[t]
    return adv, adv + values


def normalize_advantages(adv, eps: float = 1e-8) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    return (adv - adv.mean()) / (adv.std() + eps)


def td_targets(rewards, next_values, dones, gamma: float) -> np.ndarray:
    """``R + gamma * V'(1 - done)``, broadcast over a trailing agent axis."""
    rewards = np.asarray(rewards, dtype=float)[..., None]
    nonterminal = 1.0 - np.asarray(dones, dtype=float)[..., None]
    return rewards + gamma * nonterminal * np.asarray(next_values, dtype=float)


def encoder_loss(values: Tensor, targets, use_huber: bool = False, delta: float = 10.0) -> Tensor:
    """Mean squared (or Huber) TD residual over steps and agents."""
    residual = values - np.asarray(targets, dtype=values.dtype)
    per_entry = huber(residual, delta) if use_huber else residual * residual
    return per_entry.mean()


def clipped_surrogate(ratio: Tensor, advantages, eps: float) -> Tensor:
    """Elementwise ``min(r A, clip(r, 1 - eps, 1 + eps) A)``."""
    adv = np.asarray(advantages, dtype=ratio.dtype)
    return minimum(ratio * adv, clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def policy_entropy(log_probs_all: Tensor) -> Tensor:
    """Mean entropy of the categorical rows of ``(..., A)`` log-probabilities."""
    return -(exp(log_probs_all) * log_probs_all).sum(axis=-1).mean()


def decoder_loss(log_probs: Tensor, old_log_probs, advantages, eps: float,
                 entropy: Tensor | None = None, entropy_coef: float = 0.0) -> Tensor:
    """Negative clipped surrogate averaged over steps and agents, minus the entropy bonus.

    ``advantages`` has one entry per step and is shared by every agent.
    """
    old = np.asarray(old_log_probs, dtype=log_probs.dtype)
    with np.errstate(over="ignore"):
        ratio = exp(log_probs - old)
    if not np.all(np.isfinite(ratio.data)):
        raise NumericError("non-finite importance ratio in the policy loss")
    adv = np.asarray(advantages, dtype=log_probs.dtype)
    if adv.ndim == ratio.ndim - 1:
        adv = adv[..., None]
    loss = -clipped_surrogate(ratio, adv, eps).mean()
    if entropy is not None and entropy_coef:
        loss = loss - entropy * entropy_coef
    return loss
