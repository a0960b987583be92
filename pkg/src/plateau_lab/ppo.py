"""PPO and PPO-EWMA losses and the inner optimization loop.

Everything here is phrased as a loss to *minimize*: the negated PPO objective
``-(surrogate - c1 * value_loss + c2 * entropy)``.

In PPO-EWMA mode the surrogate is clipped against a proximal policy whose
weights are an exponential moving average of the live weights, refreshed after
every minibatch step. The behavior policy then only enters through the
importance weight ``pi_prox / pi_behavior``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from plateau_lab import advantage, nn, rng
from plateau_lab.rollout import RolloutBatch

STANDARD = "standard_ppo"
EWMA = "ppo_ewma"


@dataclass
class PpoConfig:
    gamma: float = 0.995
    gae_lambda: float = 0.9
    clip_eps: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    n_envs: int = 2048
    n_steps: int = 256
    n_epochs: int = 8
    n_minibatches: int = 32
    lr: float = 3e-4
    max_grad_norm: float = 0.5
    mode: str = STANDARD
    com: float = 0.0
    value_clip: bool = True
    lr_anneal: bool = False
    adv_norm: bool = True

    def validate(self) -> None:
        if self.mode not in (STANDARD, EWMA):
            raise ValueError(f"unknown mode {self.mode!r}")
        if (self.n_envs * self.n_steps) % self.n_minibatches:
            raise ValueError(
                f"n_envs*n_steps={self.n_envs * self.n_steps} not divisible by n_minibatches={self.n_minibatches}")
        if self.clip_eps < 0:
            raise ValueError("clip_eps must be >= 0")
        if self.com < 0:
            raise ValueError("com must be >= 0")
        if min(self.n_envs, self.n_steps, self.n_epochs, self.n_minibatches) < 1:
            raise ValueError("counts must be >= 1")
        if self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")


# ---------------------------------------------------------------------------
# EWMA proximal policy
# ---------------------------------------------------------------------------

def com_to_beta(com: float) -> float:
    if com < 0:
        raise ValueError(f"center of mass must be >= 0, got {com}")
    return com / (com + 1.0)


def beta_to_com(beta: float) -> float:
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    return 1.0 / (1.0 - beta) - 1.0


@dataclass
class EwmaState:
    prox: nn.Params
    beta: float

    @classmethod
    def from_com(cls, params: nn.Params, com: float) -> "EwmaState":
        return cls(nn.copy_params(params), com_to_beta(com))

    @property
    def com(self) -> float:
        return beta_to_com(self.beta)


def ewma_update(state: EwmaState, params: nn.Params) -> EwmaState:
    b = state.beta
    prox = {k: (b * p + (1.0 - b) * params[k]).astype(p.dtype, copy=False) for k, p in state.prox.items()}
    return EwmaState(prox, b)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class Minibatch:
    obs: np.ndarray
    actions: np.ndarray
    behavior_log_probs: np.ndarray
    advantages: np.ndarray
    targets: np.ndarray
    old_values: np.ndarray

    def __len__(self) -> int:
        return len(self.advantages)


def _surrogate(logp, ref_logp, adv, eps, weight=1.0):
    """Per-sample clipped surrogate and its derivative w.r.t. ``logp``.

    Where the clipped branch is strictly smaller the sample contributes no
    gradient: the ratio already left the band in the direction the advantage
    favours.
    """
    ratio = np.exp(logp - ref_logp)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    active = unclipped <= clipped
    obj = weight * np.where(active, unclipped, clipped)
    d_logp = weight * np.where(active, unclipped, 0.0)
    return obj, d_logp, ~active, ratio


def _value_terms(values, targets, old_values, value_clip, eps):
    diff = values - targets
    sq = diff * diff
    if not value_clip:
        return sq, 2.0 * diff
    delta = values - old_values
    v_clip = old_values + np.clip(delta, -eps, eps)
    diff_c = v_clip - targets
    sq_c = diff_c * diff_c
    use_plain = sq >= sq_c
    inside = np.abs(delta) < eps
    grad = np.where(use_plain, 2.0 * diff, 2.0 * diff_c * inside)
    return np.maximum(sq, sq_c), grad


def _add(a: nn.DistParams, b: nn.DistParams) -> nn.DistParams:
    if a.kind == "categorical":
        return nn.DistParams("categorical", logits=a.logits + b.logits)
    return nn.DistParams("gaussian", mean=a.mean + b.mean, log_std=a.log_std + b.log_std)


def make_head_loss(mb: Minibatch, cfg: PpoConfig, prox_log_probs: np.ndarray | None = None, stats: dict | None = None):
    """Loss on network outputs for one minibatch (see :func:`nn.value_and_grad`).

    With ``prox_log_probs`` the decoupled (EWMA) surrogate is used.
    """
    n = len(mb)
    adv = np.asarray(mb.advantages, dtype=np.float64)
    blogp = np.asarray(mb.behavior_log_probs, dtype=np.float64)

    def head_loss(dist, values):
        logp = nn.log_prob(dist, mb.actions).astype(np.float64)
        if prox_log_probs is None:
            obj, d_obj, clipped, ratio = _surrogate(logp, blogp, adv, cfg.clip_eps)
        else:
            plogp = np.asarray(prox_log_probs, dtype=np.float64)
            obj, d_obj, clipped, ratio = _surrogate(logp, plogp, adv, cfg.clip_eps, np.exp(plogp - blogp))
        pg = obj.mean()
        ent = nn.entropy(dist).astype(np.float64)
        v = np.asarray(values, dtype=np.float64)
        vl, dv = _value_terms(v, mb.targets, mb.old_values, cfg.value_clip, cfg.clip_eps)
        loss = -pg + cfg.vf_coef * vl.mean() - cfg.ent_coef * ent.mean()
        d_dist = _add(nn.log_prob_vjp(dist, mb.actions, -d_obj / n),
                      nn.entropy_vjp(dist, np.full(n, -cfg.ent_coef / n)))
        if stats is not None:
            stats.update(policy_objective=pg, value_loss=vl.mean(), entropy=ent.mean(),
                         clip_fraction=float(clipped.mean()), ratio=ratio)
        return loss, d_dist, cfg.vf_coef * dv / n

    return head_loss


def _prox_log_probs(prox, spec, mb):
    return nn.log_prob(nn.policy(prox, spec, mb.obs), mb.actions)


def clip_loss(params: nn.Params, spec: nn.MlpSpec, mb: Minibatch, clip_eps: float) -> float:
    """Standard clipped surrogate (to be maximized)."""
    logp = nn.log_prob(nn.policy(params, spec, mb.obs), mb.actions).astype(np.float64)
    obj, *_ = _surrogate(logp, np.asarray(mb.behavior_log_probs, np.float64), np.asarray(mb.advantages, np.float64), clip_eps)
    return float(obj.mean())


def decoupled_clip_loss(params: nn.Params, prox: nn.Params, spec: nn.MlpSpec, mb: Minibatch, clip_eps: float) -> float:
    """Surrogate clipped against the proximal policy, importance-weighted by pi_prox / pi_behavior."""
    logp = nn.log_prob(nn.policy(params, spec, mb.obs), mb.actions).astype(np.float64)
    plogp = _prox_log_probs(prox, spec, mb).astype(np.float64)
    blogp = np.asarray(mb.behavior_log_probs, np.float64)
    obj, *_ = _surrogate(logp, plogp, np.asarray(mb.advantages, np.float64), clip_eps, np.exp(plogp - blogp))
    return float(obj.mean())


def value_loss(params: nn.Params, spec: nn.MlpSpec, mb: Minibatch, value_clip: bool, clip_eps: float) -> float:
    v = nn.value(params, spec, mb.obs).astype(np.float64)
    per, _ = _value_terms(v, mb.targets, mb.old_values, value_clip, clip_eps)
    return float(per.mean())


def total_loss(params: nn.Params, prox: nn.Params | None, spec: nn.MlpSpec, mb: Minibatch, cfg: PpoConfig) -> float:
    plogp = _prox_log_probs(prox, spec, mb) if cfg.mode == EWMA else None
    dist, values = nn.forward(params, spec, mb.obs)
    return float(make_head_loss(mb, cfg, plogp)(dist, values)[0])


def total_loss_and_grad(params, prox, spec, mb, cfg, stats=None):
    plogp = _prox_log_probs(prox, spec, mb) if cfg.mode == EWMA else None
    return nn.value_and_grad(make_head_loss(mb, cfg, plogp, stats), params, spec, mb.obs)


# ---------------------------------------------------------------------------
# inner loop
# ---------------------------------------------------------------------------

@dataclass
class UpdateStats:
    n_adam_steps: int = 0
    n_ewma_updates: int = 0
    pre_clip_grad_norm: float = 0.0
    post_clip_grad_norm: float = 0.0
    kl_behavior: float = 0.0
    param_update_l2: float = 0.0
    entropy: float = 0.0
    clip_fraction: float = 0.0
    pre_norms: list[float] = field(default_factory=list)
    max_ratio: float = 1.0
    min_ratio: float = 1.0


def flatten_batch(batch: RolloutBatch, adv_norm: bool) -> Minibatch:
    adv = batch.advantages.reshape(-1)
    if adv_norm:
        adv = advantage.normalize(adv)
    return Minibatch(
        obs=batch.obs.reshape(batch.n_transitions, -1),
        actions=batch.actions.reshape(batch.n_transitions, *batch.actions.shape[2:]),
        behavior_log_probs=batch.behavior_log_probs.reshape(-1),
        advantages=adv,
        targets=batch.targets.reshape(-1),
        old_values=batch.values.reshape(-1).astype(np.float64),
    )


def _take(mb: Minibatch, idx) -> Minibatch:
    return Minibatch(mb.obs[idx], mb.actions[idx], mb.behavior_log_probs[idx],
                     mb.advantages[idx], mb.targets[idx], mb.old_values[idx])


def update(batch: RolloutBatch, params: nn.Params, adam: nn.AdamState, ewma: EwmaState | None,
           cfg: PpoConfig, spec: nn.MlpSpec, update_seed: int):
    """One inner loop: ``n_epochs`` shuffled passes of ``n_minibatches`` Adam steps.

    ``adam.lr`` is used as given (the caller applies any annealing). Returns
    ``(params, adam, ewma, UpdateStats)``.
    """
    if batch.advantages is None:
        raise ValueError("compute advantages before calling update")
    if batch.n_transitions % cfg.n_minibatches:
        raise ValueError(f"{batch.n_transitions} transitions not divisible into {cfg.n_minibatches} minibatches")
    if (cfg.mode == EWMA) != (ewma is not None):
        raise ValueError(f"mode {cfg.mode!r} inconsistent with ewma state {ewma is not None}")

    full = flatten_batch(batch, cfg.adv_norm)
    B = len(full)
    size = B // cfg.n_minibatches
    start_params = params
    stats = UpdateStats()
    pre, post, clipfrac = [], [], []
    for epoch in range(cfg.n_epochs):
        perm = rng.stream(update_seed, rng.SHUFFLE, epoch).permutation(B)
        for j in range(cfg.n_minibatches):
            mb = _take(full, perm[j * size:(j + 1) * size])
            info: dict = {}
            try:
                _, grads = total_loss_and_grad(params, ewma.prox if ewma else None, spec, mb, cfg, info)
            except nn.NonFiniteError as exc:
                raise nn.NonFiniteError(f"epoch {epoch}, minibatch {j}: {exc}") from exc
            g_norm = nn.global_norm(grads)
            grads = nn.global_norm_clip(grads, cfg.max_grad_norm)
            pre.append(g_norm)
            post.append(min(g_norm, cfg.max_grad_norm))
            clipfrac.append(info["clip_fraction"])
            stats.max_ratio = max(stats.max_ratio, float(info["ratio"].max()))
            stats.min_ratio = min(stats.min_ratio, float(info["ratio"].min()))
            params, adam = nn.adam_step(adam, params, grads)
            stats.n_adam_steps += 1
            if ewma is not None:
                ewma = ewma_update(ewma, params)
                stats.n_ewma_updates += 1

    dist_after = nn.policy(params, spec, full.obs)
    bdist = batch.behavior_dist.reshape(B)
    stats.kl_behavior = float(np.mean(nn.kl(bdist, dist_after)))
    stats.entropy = float(np.mean(nn.entropy(dist_after)))
    stats.param_update_l2 = math.sqrt(sum(
        float(np.sum((params[k].astype(np.float64) - start_params[k]) ** 2)) for k in params))
    stats.pre_clip_grad_norm = float(np.mean(pre))
    stats.post_clip_grad_norm = float(np.mean(post))
    stats.clip_fraction = float(np.mean(clipfrac))
    stats.pre_norms = pre
    return params, adam, ewma, stats
