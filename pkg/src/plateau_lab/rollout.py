"""Outer-loop data collection: N parallel slots for K steps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from plateau_lab import nn, rng
from plateau_lab.envs import VecEnv


@dataclass
class RolloutBatch:
    """One outer-loop dataset. Arrays are time-major, shape (K, N, ...)."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    successes: np.ndarray
    behavior_log_probs: np.ndarray
    behavior_dist: nn.DistParams
    values: np.ndarray
    bootstrap_values: np.ndarray
    advantages: np.ndarray | None = None
    targets: np.ndarray | None = None
    episode_returns: list[float] = field(default_factory=list)
    episode_successes: list[bool] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_envs(self) -> int:
        return self.rewards.shape[1]

    @property
    def n_transitions(self) -> int:
        return self.rewards.size


def policy_noise(policy_seed: int, n_slots: int, n_steps: int, kind: str, action_dim: int) -> np.ndarray:
    """Per-slot noise blocks, shape (K, N[, d]). Slot ``s`` only reads its own stream."""
    if kind == "categorical":
        blocks = [rng.stream(policy_seed, rng.POLICY, s).uniform(size=n_steps) for s in range(n_slots)]
    else:
        blocks = [rng.stream(policy_seed, rng.POLICY, s).standard_normal((n_steps, action_dim)) for s in range(n_slots)]
    return np.stack(blocks, axis=1)


def collect(params: nn.Params, spec: nn.MlpSpec, venv: VecEnv, n_steps: int, policy_seed: int,
            deterministic: bool = False) -> RolloutBatch:
    """Roll the current (behavior) policy for ``n_steps`` in every slot of ``venv``.

    Environments persist across calls; ``venv`` is advanced in place.
    """
    dtype = next(iter(params.values())).dtype
    N, K = venv.n_slots, n_steps
    noise = policy_noise(policy_seed, N, K, spec.head, spec.head_dim)

    obs_buf = np.zeros((K, N, spec.input_dim), dtype=dtype)
    act_shape = (K, N) if spec.head == "categorical" else (K, N, spec.head_dim)
    act_buf = np.zeros(act_shape, dtype=np.int64 if spec.head == "categorical" else dtype)
    rew = np.zeros((K, N))
    dones = np.zeros((K, N), dtype=bool)
    succ = np.zeros((K, N), dtype=bool)
    logp = np.zeros((K, N), dtype=dtype)
    vals = np.zeros((K, N), dtype=dtype)
    dists = []
    ep_returns, ep_success = [], []

    for t in range(K):
        obs = venv.obs.astype(dtype)
        dist, v = nn.forward(params, spec, obs)
        if not (np.isfinite(v).all() and np.isfinite(dist.logits if dist.kind == "categorical" else dist.mean).all()):
            raise nn.NonFiniteError(f"non-finite network output at rollout step {t}")
        a = nn.mode(dist) if deterministic else nn.sample(dist, noise[t])
        a = a.astype(act_buf.dtype, copy=False)
        obs_buf[t] = obs
        act_buf[t] = a
        logp[t] = nn.log_prob(dist, a)
        vals[t] = v
        dists.append(dist)
        _, r, d, s, finished = venv.step(a)
        rew[t], dones[t], succ[t] = r, d, s
        for slot in np.flatnonzero(d):
            ep_returns.append(float(finished[slot]))
            ep_success.append(bool(s[slot]))

    boot = nn.value(params, spec, venv.obs.astype(dtype))
    if spec.head == "categorical":
        bdist = nn.DistParams("categorical", logits=np.stack([d.logits for d in dists]))
    else:
        bdist = nn.DistParams("gaussian", mean=np.stack([d.mean for d in dists]),
                              log_std=np.stack([np.array(d.log_std) for d in dists]))
    return RolloutBatch(obs_buf, act_buf, rew, dones, succ, logp, bdist, vals, boot,
                        episode_returns=ep_returns, episode_successes=ep_success)
