"""How to partition a bigger rollout batch when adding parallel environments.

* ``more_minibatches``: keep the minibatch size and learning rate, add minibatches.
* ``bigger_minibatches_fixed_lr``: keep the minibatch count and learning rate.
* ``bigger_minibatches_sqrt_lr``: keep the minibatch count, scale the learning
  rate with the square root of the minibatch-size ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

NONE = "none"
MORE_MINIBATCHES = "more_minibatches"
BIGGER_FIXED_LR = "bigger_minibatches_fixed_lr"
BIGGER_SQRT_LR = "bigger_minibatches_sqrt_lr"
STRATEGIES = (NONE, MORE_MINIBATCHES, BIGGER_FIXED_LR, BIGGER_SQRT_LR)


@dataclass(frozen=True)
class ScalingStrategy:
    kind: str = NONE
    minibatch_size: int = 0  # more_minibatches
    n_minibatches: int = 0  # bigger_minibatches_*
    base_minibatch_size: int = 0  # bigger_minibatches_sqrt_lr
    base_lr: float = 0.0  # bigger_minibatches_sqrt_lr

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown scaling strategy {self.kind!r}")


def derive_schedule(strategy: ScalingStrategy, n_envs: int, n_steps: int, n_minibatches: int,
                    lr: float) -> tuple[int, int, float]:
    """Return ``(n_minibatches, minibatch_size, lr)`` for ``n_envs * n_steps`` transitions.

    ``n_minibatches`` and ``lr`` are the configured values, used as-is by the
    strategies that keep them fixed (and by ``none``).
    """
    batch = n_envs * n_steps
    kind = strategy.kind
    if kind == MORE_MINIBATCHES:
        size = strategy.minibatch_size
        if size <= 0 or batch % size:
            raise ValueError(f"batch of {batch} transitions not divisible by minibatch_size={size}")
        return batch // size, size, lr
    n_mb = strategy.n_minibatches if kind != NONE and strategy.n_minibatches > 0 else n_minibatches
    if n_mb <= 0 or batch % n_mb:
        raise ValueError(f"batch of {batch} transitions not divisible by n_minibatches={n_mb}")
    size = batch // n_mb
    if kind == BIGGER_SQRT_LR:
        if strategy.base_minibatch_size <= 0 or strategy.base_lr <= 0:
            raise ValueError("square-root scaling needs base_minibatch_size and base_lr")
        return n_mb, size, strategy.base_lr * math.sqrt(size / strategy.base_minibatch_size)
    return n_mb, size, lr
