"""Noisy gradient descent on ``f(x) = x.x`` and its stationary oracle.

The update is ``x <- x - lr * (2 x + noise)`` with i.i.d. Gaussian gradient
noise. For a constant step size every coordinate is an AR(1) process with
factor ``1 - 2 lr``, so the stationary second moment is available in closed
form; a step-size schedule lets the plateau be lowered or raised mid-run.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from plateau_lab import rng

DEFAULT_DIM = 50
DEFAULT_NOISE_STD = 3.0 / math.sqrt(50.0)
INIT_NORM = 5.0
DIVERGENCE_NORM = 1e6


class DivergenceError(ArithmeticError):
    pass


@dataclass
class QuadConfig:
    dim: int = DEFAULT_DIM
    noise_std: float = DEFAULT_NOISE_STD
    lr: float | Sequence[tuple[int, float]] = 0.1
    total_steps: int = 10_000
    seed: int = 0

    def schedule(self) -> list[tuple[int, float]]:
        """Piecewise-constant schedule as ``[(start_step, lr), ...]``."""
        if isinstance(self.lr, (int, float)):
            return [(0, float(self.lr))]
        sched = [(int(s), float(v)) for s, v in self.lr]
        if not sched or sched[0][0] != 0:
            raise ValueError("schedule must start at step 0")
        if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
            raise ValueError("schedule steps must be strictly increasing")
        return sched

    def validate(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        for _, lr in self.schedule():
            if not 0.0 < lr < 1.0:
                warnings.warn(f"lr={lr} outside (0, 1): the iteration does not contract", stacklevel=2)


@dataclass
class QuadTrace:
    steps: np.ndarray  # 0..total_steps
    sq_norm: np.ndarray  # ||x_t||^2

    @property
    def neg_distance(self) -> np.ndarray:
        return -np.sqrt(self.sq_norm)

    def trailing_mean(self, start: int, stop: int | None = None) -> float:
        return float(self.sq_norm[start:stop].mean())


def lr_at(schedule: list[tuple[int, float]], step: int) -> float:
    lr = schedule[0][1]
    for s, v in schedule:
        if step >= s:
            lr = v
    return lr


def run_quad(config: QuadConfig) -> QuadTrace:
    config.validate()
    sched = config.schedule()
    gen = rng.stream(config.seed, rng.QUAD)
    x = gen.standard_normal(config.dim)
    x *= INIT_NORM / np.linalg.norm(x)
    sq = np.empty(config.total_steps + 1)
    sq[0] = x @ x
    bounds = [s for s, _ in sched[1:]] + [config.total_steps]
    t = 0
    for (start, lr), stop in zip(sched, bounds):
        stop = min(stop, config.total_steps)
        n = max(stop - t, 0)
        noise = gen.standard_normal((n, config.dim)) * config.noise_std
        for i in range(n):
            x = x - lr * (2.0 * x + noise[i])
            sq[t + 1] = x @ x
            t += 1
            if sq[t] > DIVERGENCE_NORM ** 2:
                raise DivergenceError(f"||x|| exceeded {DIVERGENCE_NORM:g} at step {t} (lr={lr})")
    return QuadTrace(np.arange(config.total_steps + 1), sq)


def stationary_second_moment(lr: float, noise_std: float, dim: int) -> float:
    """Stationary E||x||^2 for constant ``lr``: ``dim * lr^2 sigma^2 / (1 - (1 - 2 lr)^2)``."""
    if not 0.0 < lr < 1.0:
        raise ValueError(f"lr must lie in (0, 1), got {lr}")
    per_coord = lr * lr * noise_std * noise_std / (1.0 - (1.0 - 2.0 * lr) ** 2)
    return dim * per_coord


def write_trace_csv(trace: QuadTrace, path, schedule: list[tuple[int, float]]) -> None:
    with open(path, "w") as fh:
        fh.write("step,lr,neg_distance,sq_norm\n")
        for t, sq in zip(trace.steps, trace.sq_norm):
            fh.write(f"{t},{lr_at(schedule, int(t))!r},{-math.sqrt(sq)!r},{float(sq)!r}\n")
