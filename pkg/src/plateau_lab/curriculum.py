"""Learnability-filtered level sampling for PointNav.

Levels are scored by ``p (1 - p)`` where ``p`` is the agent's empirical
success rate on them, so a level the agent solves about half the time scores
highest (0.25) and trivial or impossible levels score zero. Every
``update_period`` updates a fresh batch of candidate levels is scored and the
top ``buffer_size`` replace the buffer; training slots are then filled with a
``sample_ratio`` share of buffer levels and fresh random levels for the rest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from plateau_lab import envs, rng
from plateau_lab.metrics import PolicyFn, run_episodes


@dataclass
class SflConfig:
    rollout_length: int = 512
    sample_ratio: float = 0.5
    filter_batch: int = 256
    buffer_size: int = 32
    update_period: int = 8
    episodes_per_level: int = 4

    def validate(self) -> None:
        if self.buffer_size > self.filter_batch:
            raise ValueError("buffer_size must not exceed filter_batch")
        if not 0.0 <= self.sample_ratio <= 1.0:
            raise ValueError("sample_ratio must lie in [0, 1]")
        if min(self.rollout_length, self.buffer_size, self.update_period, self.episodes_per_level) < 1:
            raise ValueError("counts must be >= 1")


@dataclass
class BufferEntry:
    level_seed: int
    score: float
    scored_at: int


@dataclass
class LevelBuffer:
    capacity: int
    entries: list[BufferEntry] = field(default_factory=list)

    @property
    def seeds(self) -> np.ndarray:
        return np.array([e.level_seed for e in self.entries], dtype=np.int64)

    def to_json(self) -> dict:
        return {"capacity": self.capacity,
                "entries": [[e.level_seed, e.score, e.scored_at] for e in self.entries]}

    @classmethod
    def from_json(cls, obj: dict) -> "LevelBuffer":
        return cls(obj["capacity"], [BufferEntry(int(s), float(sc), int(u)) for s, sc, u in obj["entries"]])


def learnability(success_rate):
    p = np.asarray(success_rate, dtype=np.float64)
    return p * (1.0 - p)


def score_learnability(policy_fn: PolicyFn, levels: Sequence, rollout_length: int, episodes_per_level: int,
                       seed: int, episode_cap: int = 256) -> np.ndarray:
    """Score each level by ``p (1 - p)`` of its empirical success rate.

    ``levels`` holds level seeds or explicit :class:`envs.PointNavParams`.
    Episodes are cut at ``rollout_length`` steps (an unfinished episode counts
    as a failure).
    """
    if episodes_per_level < 1:
        raise ValueError("episodes_per_level must be >= 1")
    params = [lv if isinstance(lv, envs.PointNavParams) else envs.pointnav_level(int(lv), episode_cap) for lv in levels]
    n = len(params)
    venv = envs.PointNavVec(n * episodes_per_level, seed, levels=np.repeat(np.arange(n), episodes_per_level),
                            level_fn=lambda i: params[i], episode_cap=episode_cap)
    success, _ = run_episodes(policy_fn, venv, seed, max_steps=rollout_length)
    p_hat = success.reshape(n, episodes_per_level).mean(axis=1)
    return learnability(p_hat)


def refresh_buffer(buffer: LevelBuffer, policy_fn: PolicyFn, config: SflConfig, seed: int, update_index: int,
                   episode_cap: int = 256, log: Callable[[dict], None] | None = None) -> LevelBuffer:
    """Score ``filter_batch`` fresh random levels and keep the best ``buffer_size``.

    Ties are broken by ascending level seed. The old buffer is discarded.
    """
    candidates = [rng.derive_seed(seed, rng.FILTER, update_index, i) for i in range(config.filter_batch)]
    scores = score_learnability(policy_fn, candidates, config.rollout_length, config.episodes_per_level,
                                rng.derive_seed(seed, rng.FILTER, update_index, config.filter_batch), episode_cap)
    order = top_k(candidates, scores, config.buffer_size)
    new = LevelBuffer(config.buffer_size, [BufferEntry(candidates[i], float(scores[i]), update_index) for i in order])
    if log is not None:
        log({"event": "buffer_refresh", "update": update_index, **new.to_json()})
    return new


def top_k(seeds: Sequence[int], scores: Sequence[float], k: int) -> list[int]:
    """Indices of the ``k`` best scores, ties broken by ascending seed."""
    return sorted(range(len(seeds)), key=lambda i: (-scores[i], seeds[i]))[:k]


def sample_training_levels(buffer: LevelBuffer | None, n_slots: int, sample_ratio: float, seed: int) -> np.ndarray:
    """Level seed per slot: ``round(sample_ratio * n_slots)`` from the buffer
    (uniform, with replacement), the rest fresh random levels."""
    n_buf = int(round(sample_ratio * n_slots))
    if n_buf > 0 and (buffer is None or not buffer.entries):
        raise ValueError("sample_ratio > 0 needs a non-empty buffer")
    out = np.array([rng.derive_seed(seed, rng.LEVEL, s) for s in range(n_slots)], dtype=np.int64)
    if n_buf:
        pick = rng.stream(seed, rng.BUFFER_PICK).integers(0, len(buffer.entries), size=n_buf)
        out[:n_buf] = buffer.seeds[pick]
    return out
