"""Run configuration and its flat ``key = value`` file format.

One key per line, ``#`` starts a comment, blank lines are ignored, unknown
keys are an error. Every field of :class:`TrainConfig` is a valid key::

    # weak regularization arm
    env = pointnav
    mode = ppo_ewma
    com = 1
    n_envs = 64
    hidden = 64,64
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from plateau_lab.curriculum import SflConfig
from plateau_lab.ppo import PpoConfig
from plateau_lab.scaling import ScalingStrategy, derive_schedule


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # environment
    env: str = "pointnav"  # pointnav | chain
    pointnav_cap: int = 256
    chain_n: int = 8
    chain_cap: int = 16
    chain_slip: float = 0.0
    # network
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    dtype: str = "float32"
    # PPO (defaults follow the locomotion hyperparameter table, except the
    # environment count which is desk-scale)
    gamma: float = 0.995
    gae_lambda: float = 0.9
    clip_eps: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    n_envs: int = 64
    n_steps: int = 64
    n_epochs: int = 8
    n_minibatches: int = 32
    lr: float = 3e-4
    max_grad_norm: float = 0.5
    mode: str = "standard_ppo"  # standard_ppo | ppo_ewma
    com: float = 0.0
    value_clip: bool = True
    lr_anneal: bool = False
    adv_norm: bool = True
    # parallelization scaling
    strategy: str = "none"  # none | more_minibatches | bigger_minibatches_fixed_lr | bigger_minibatches_sqrt_lr
    minibatch_size: int = 0
    base_minibatch_size: int = 0
    base_lr: float = 0.0
    # budget, evaluation, persistence
    seed: int = 0
    total_env_steps: int = 64 * 64 * 100
    eval_levels: int = 32
    eval_episodes: int = 4
    eval_interval: int = 1
    eval_set_seed: int = 20250101
    eval_seed: int = 7
    checkpoint_interval: int = 0  # updates; 0 = final checkpoint only
    # learnability curriculum
    sfl: bool = False
    sfl_rollout_length: int = 512
    sfl_sample_ratio: float = 0.5
    sfl_filter_batch: int = 256
    sfl_buffer_size: int = 32
    sfl_update_period: int = 8
    sfl_episodes_per_level: int = 4
    # training level distribution: difficulty is uniform in [min, max]
    level_difficulty_min: float = 0.0
    level_difficulty_max: float = 1.0

    # ------------------------------------------------------------------
    def ppo(self) -> PpoConfig:
        n_mb, _, lr = self.schedule()
        return PpoConfig(
            gamma=self.gamma, gae_lambda=self.gae_lambda, clip_eps=self.clip_eps, vf_coef=self.vf_coef,
            ent_coef=self.ent_coef, n_envs=self.n_envs, n_steps=self.n_steps, n_epochs=self.n_epochs,
            n_minibatches=n_mb, lr=lr, max_grad_norm=self.max_grad_norm, mode=self.mode, com=self.com,
            value_clip=self.value_clip, lr_anneal=self.lr_anneal, adv_norm=self.adv_norm)

    def sfl_config(self) -> SflConfig:
        return SflConfig(self.sfl_rollout_length, self.sfl_sample_ratio, self.sfl_filter_batch,
                         self.sfl_buffer_size, self.sfl_update_period, self.sfl_episodes_per_level)

    def scaling(self) -> ScalingStrategy:
        return ScalingStrategy(self.strategy, minibatch_size=self.minibatch_size,
                               n_minibatches=self.n_minibatches, base_minibatch_size=self.base_minibatch_size,
                               base_lr=self.base_lr)

    def schedule(self) -> tuple[int, int, float]:
        """Effective (n_minibatches, minibatch_size, lr) after the scaling strategy."""
        return derive_schedule(self.scaling(), self.n_envs, self.n_steps, self.n_minibatches, self.lr)

    @property
    def batch_size(self) -> int:
        return self.n_envs * self.n_steps

    @property
    def total_updates(self) -> int:
        return self.total_env_steps // self.batch_size

    def validate(self) -> "TrainConfig":
        if self.env not in ("pointnav", "chain"):
            raise ConfigError(f"unknown env {self.env!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.total_env_steps < 0:
            raise ConfigError("total_env_steps must be >= 0")
        if self.eval_levels < 1 or self.eval_episodes < 1 or self.eval_interval < 1:
            raise ConfigError("eval_levels, eval_episodes and eval_interval must be >= 1")
        if self.sfl and self.env != "pointnav":
            raise ConfigError("the curriculum needs env = pointnav")
        if not 0.0 <= self.level_difficulty_min <= self.level_difficulty_max <= 1.0:
            raise ConfigError("need 0 <= level_difficulty_min <= level_difficulty_max <= 1")
        try:
            self.ppo().validate()
            self.sfl_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    # ------------------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> bytes:
        return hashlib.sha256(self.to_text().encode()).digest()

    def replace(self, **overrides) -> "TrainConfig":
        return apply_overrides(self, {k: v for k, v in overrides.items()})


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(name: str, raw):
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    default = getattr(TrainConfig(), name)
    if not isinstance(raw, str):
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw)
        if isinstance(default, float) and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(float(text)) if "e" in text.lower() else int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    values = {k: _coerce(k, v) for k, v in overrides.items()}
    return dataclasses.replace(cfg, **values)


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = val
    return apply_overrides(base or TrainConfig(), values)


def load_config(path: str | Path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())
