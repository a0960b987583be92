"""Outer-loop diagnostics: KL to the behavior policy, DDR, solve rate."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from plateau_lab import envs, nn, rng
from plateau_lab.rollout import RolloutBatch

CSV_HEADER = ("update,env_steps,mean_return,solve_rate,kl_behavior,ddr,"
              "grad_norm_pre,grad_norm_post,param_update_l2,entropy,lr")


@dataclass
class MetricsRecord:
    update_index: int
    env_steps: int
    mean_kl_behavior: float
    ddr: float
    pre_clip_grad_norm: float
    post_clip_grad_norm: float
    param_update_l2: float
    mean_return: float
    solve_rate: float
    entropy: float
    lr_effective: float

    def csv_row(self) -> str:
        vals = (self.update_index, self.env_steps, self.mean_return, self.solve_rate, self.mean_kl_behavior,
                self.ddr, self.pre_clip_grad_norm, self.post_clip_grad_norm, self.param_update_l2,
                self.entropy, self.lr_effective)
        return ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in vals)

    @classmethod
    def from_csv_row(cls, row: dict[str, str]) -> "MetricsRecord":
        return cls(
            update_index=int(row["update"]), env_steps=int(row["env_steps"]),
            mean_return=float(row["mean_return"]), solve_rate=float(row["solve_rate"]),
            mean_kl_behavior=float(row["kl_behavior"]), ddr=float(row["ddr"]),
            pre_clip_grad_norm=float(row["grad_norm_pre"]), post_clip_grad_norm=float(row["grad_norm_post"]),
            param_update_l2=float(row["param_update_l2"]), entropy=float(row["entropy"]),
            lr_effective=float(row["lr"]),
        )

    def as_dict(self) -> dict:
        return asdict(self)


def kl_to_behavior(batch: RolloutBatch, params: nn.Params, spec: nn.MlpSpec) -> float:
    """Mean over visited states of KL(pi_behavior || pi_params), exact per state."""
    n = batch.n_transitions
    obs = batch.obs.reshape(n, -1)
    return float(np.mean(nn.kl(batch.behavior_dist.reshape(n), nn.policy(params, spec, obs))))


def ddr(n_transitions: int, mean_kl: float) -> float:
    """Data-to-divergence ratio: transitions per nat of KL from the behavior policy."""
    if n_transitions < 0 or mean_kl < 0:
        raise ValueError(f"ddr needs non-negative inputs, got {n_transitions}, {mean_kl}")
    if mean_kl == 0:
        return math.inf
    return n_transitions / mean_kl


def run_ddr_aggregate(records: Iterable[MetricsRecord | float]) -> float:
    """Geometric mean of the finite per-update DDRs of a run."""
    vals = [r.ddr if isinstance(r, MetricsRecord) else float(r) for r in records]
    if not vals:
        raise ValueError("no records to aggregate")
    finite = np.array([v for v in vals if math.isfinite(v) and v > 0])
    if finite.size == 0:
        raise ValueError("no finite DDR values to aggregate")
    return float(np.exp(np.mean(np.log(finite))))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

PolicyFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def make_policy_fn(params: nn.Params, spec: nn.MlpSpec, deterministic: bool = False) -> PolicyFn:
    dtype = next(iter(params.values())).dtype

    def act(obs, noise):
        dist = nn.policy(params, spec, obs.astype(dtype))
        return nn.mode(dist) if deterministic else nn.sample(dist, noise)

    return act


@dataclass
class EvalResult:
    solve_rate: float
    mean_return: float
    successes: np.ndarray  # (n_levels, episodes_per_level)


def run_episodes(policy_fn: PolicyFn, venv: envs.VecEnv, seed: int, max_steps: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Run the first episode of every slot to completion (or ``max_steps``).

    Returns per-slot (success, undiscounted return). Auto-reset is switched
    off; finished slots keep stepping in place and are ignored.
    """
    n = venv.n_slots
    venv.auto_reset = False
    finished = np.zeros(n, dtype=bool)
    success = np.zeros(n, dtype=bool)
    returns = np.zeros(n)
    kind = venv.action_kind
    t = 0
    while not finished.all() and (max_steps is None or t < max_steps):
        gen = rng.stream(seed, rng.EVAL, t)
        noise = gen.uniform(size=n) if kind == "categorical" else gen.standard_normal((n, venv.action_dim))
        actions = policy_fn(venv.obs, noise)
        _, r, d, s, _ = venv.step(actions)
        live = ~finished
        returns[live] += r[live]
        success[live & s] = True
        finished |= d
        t += 1
    return success, returns


def evaluate(policy_fn: PolicyFn, make_venv: Callable[[np.ndarray, int], envs.VecEnv], eval_levels: Sequence[int],
             episodes_per_level: int, seed: int, max_steps: int | None = None) -> EvalResult:
    """Stochastic-policy evaluation over fixed levels.

    ``make_venv(levels_per_slot, run_seed)`` builds a vector env whose slot
    ``i`` plays ``levels_per_slot[i]``.
    """
    if len(eval_levels) == 0:
        raise ValueError("empty evaluation set")
    levels = np.repeat(np.asarray(eval_levels, dtype=np.int64), episodes_per_level)
    venv = make_venv(levels, seed)
    success, returns = run_episodes(policy_fn, venv, seed, max_steps)
    return EvalResult(float(success.mean()), float(returns.mean()),
                      success.reshape(len(eval_levels), episodes_per_level))


def evaluate_solve_rate(policy_fn: PolicyFn, make_venv, eval_levels, episodes_per_level: int, seed: int) -> float:
    return evaluate(policy_fn, make_venv, eval_levels, episodes_per_level, seed).solve_rate
