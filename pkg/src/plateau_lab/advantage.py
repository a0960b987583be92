"""Generalized advantage estimation."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from plateau_lab.rollout import RolloutBatch


def gae(rewards, values, dones, bootstrap_values, gamma: float, lam: float) -> np.ndarray:
    """Backward GAE recursion over time-major arrays of shape (K, N).

    ``dones[t]`` marks that the episode ended at step ``t``; the value of the
    following observation (which belongs to the next episode) is not bootstrapped
    and the recursion is cut there.
    """
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError(f"gamma and lambda must lie in [0, 1], got {gamma}, {lam}")
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    cont = 1.0 - np.asarray(dones, dtype=np.float64)
    K = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.asarray(bootstrap_values, dtype=np.float64)
    running = np.zeros_like(next_value)
    for t in reversed(range(K)):
        delta = rewards[t] + gamma * cont[t] * next_value - values[t]
        running = delta + gamma * lam * cont[t] * running
        adv[t] = running
        next_value = values[t]
    return adv


def compute_gae(batch: RolloutBatch, gamma: float, lam: float) -> RolloutBatch:
    """Fill advantages and value targets (``values + advantages``), once per batch."""
    adv = gae(batch.rewards, batch.values, batch.dones, batch.bootstrap_values, gamma, lam)
    return replace(batch, advantages=adv, targets=batch.values.astype(np.float64) + adv)


def normalize(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + eps)
