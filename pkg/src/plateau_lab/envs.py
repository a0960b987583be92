"""Vectorized toy environments.

``PointNav`` is a procedural 2D point-mass reaching task with a dense
distance-delta reward and a success bonus; every level (goal, force gain,
friction, success radius) is a deterministic function of a level seed.
``Chain`` is a left/right chain MDP small enough for exact dynamic programming.

Both come as single-episode functions (``pointnav_reset``/``pointnav_step``,
``chain_reset``/``chain_step``) and as vectorized facades with auto-reset.
The single-episode functions call the same kernels on a batch of one, so a
slot in a vector env is bitwise identical to the stand-alone simulation.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from plateau_lab import rng

DT = 0.1
SUCCESS_BONUS = 1.0
POINTNAV_OBS_DIM = 6
POINTNAV_ACTION_DIM = 2

# Level generator ranges, indexed by difficulty in [0, 1].
RADIUS_RANGE = (0.05, 0.005)
FORCE_GAIN_RANGE = (4.0, 20.0)
FRICTION_RANGE = (0.30, 0.02)


@dataclass(frozen=True)
class PointNavParams:
    goal: tuple[float, float]
    force_gain: float
    friction: float
    success_radius: float
    episode_cap: int = 256
    level_seed: int = 0

    def __post_init__(self):
        if self.success_radius <= 0:
            raise ValueError("success_radius must be positive")
        if self.episode_cap < 1:
            raise ValueError("episode_cap must be >= 1")
        if not 0.0 < self.friction < 1.0:
            raise ValueError("friction must lie in (0, 1)")


@dataclass(frozen=True)
class ChainParams:
    n_states: int = 8
    episode_cap: int = 16
    slip_prob: float = 0.0

    def __post_init__(self):
        if self.n_states < 2:
            raise ValueError("chain needs at least 2 states")
        if self.episode_cap < 1:
            raise ValueError("episode_cap must be >= 1")
        if not 0.0 <= self.slip_prob < 1.0:
            raise ValueError("slip_prob must lie in [0, 1)")


@dataclass
class PointNavState:
    position: np.ndarray
    velocity: np.ndarray
    steps_elapsed: int = 0


@dataclass
class ChainState:
    position: int
    steps_elapsed: int
    slip_draws: np.ndarray  # one uniform per step, drawn at reset


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool
    success: bool


@functools.lru_cache(maxsize=65536)
def pointnav_level(level_seed: int, episode_cap: int = 256, difficulty: float | None = None,
                   difficulty_range: tuple[float, float] = (0.0, 1.0)) -> PointNavParams:
    """Procedural level. Harder levels have a smaller target, a stronger and
    less damped actuator (so overshooting is easy).

    Unless ``difficulty`` is given it is drawn uniformly from ``difficulty_range``.
    """
    gen = rng.stream(level_seed, rng.LEVEL)
    goal = gen.uniform(-1.0, 1.0, size=2)
    u = gen.uniform()
    d = difficulty_range[0] + (difficulty_range[1] - difficulty_range[0]) * u if difficulty is None else float(difficulty)
    jitter = gen.uniform(0.9, 1.1, size=3)

    def lerp(lo_hi):
        lo, hi = lo_hi
        return lo + (hi - lo) * d

    return PointNavParams(
        goal=(float(goal[0]), float(goal[1])),
        force_gain=float(lerp(FORCE_GAIN_RANGE) * jitter[0]),
        friction=float(np.clip(lerp(FRICTION_RANGE) * jitter[1], 1e-3, 0.99)),
        success_radius=float(lerp(RADIUS_RANGE) * jitter[2]),
        episode_cap=int(episode_cap),
        level_seed=int(level_seed),
    )


# ---------------------------------------------------------------------------
# kernels (batched over a leading slot axis)
# ---------------------------------------------------------------------------

def _pointnav_obs(pos, vel, goal):
    return np.concatenate([pos, vel, goal - pos], axis=-1)


def _pointnav_kernel(goal, gain, friction, radius, cap, pos, vel, steps, action):
    a = np.clip(action, -1.0, 1.0)
    vel2 = (1.0 - friction)[:, None] * vel + gain[:, None] * a * DT
    pos2 = pos + vel2 * DT
    d0 = np.sqrt(np.sum((pos - goal) ** 2, axis=-1))
    d1 = np.sqrt(np.sum((pos2 - goal) ** 2, axis=-1))
    success = d1 <= radius
    steps2 = steps + 1
    done = success | (steps2 >= cap)
    reward = (d0 - d1) + SUCCESS_BONUS * success
    return pos2, vel2, steps2, reward, done, success


def _episode_start(episode_seed: int) -> np.ndarray:
    return rng.stream(episode_seed, rng.EPISODE).uniform(-1.0, 1.0, size=2)


def _chain_slips(episode_seed: int, cap: int) -> np.ndarray:
    return rng.stream(episode_seed, rng.EPISODE).uniform(size=cap)


def _chain_kernel(n, slip, cap, s, steps, slip_u, action):
    move = np.where(np.asarray(action) == 1, 1, -1)
    move = np.where(slip_u < slip, -move, move)
    s2 = np.clip(s + move, 0, n - 1)
    steps2 = steps + 1
    success = s2 == n - 1
    done = success | (steps2 >= cap)
    return s2, steps2, success.astype(np.float64), done, success


def _one_hot(s, n):
    out = np.zeros((len(s), n))
    out[np.arange(len(s)), s] = 1.0
    return out


# ---------------------------------------------------------------------------
# single-episode API
# ---------------------------------------------------------------------------

def pointnav_reset(params: PointNavParams, episode_seed: int) -> tuple[PointNavState, np.ndarray]:
    pos = _episode_start(episode_seed)
    state = PointNavState(pos, np.zeros(2), 0)
    return state, _pointnav_obs(pos[None], state.velocity[None], np.asarray(params.goal)[None])[0]


def pointnav_step(params: PointNavParams, state: PointNavState, action) -> tuple[PointNavState, StepResult]:
    action = np.asarray(action, dtype=np.float64).reshape(1, 2)
    if not np.isfinite(action).all():
        raise ValueError("non-finite action")
    goal = np.asarray(params.goal, dtype=np.float64)[None]
    pos, vel, steps, reward, done, success = _pointnav_kernel(
        goal, np.array([params.force_gain]), np.array([params.friction]),
        np.array([params.success_radius]), np.array([params.episode_cap]),
        state.position[None], state.velocity[None], np.array([state.steps_elapsed]), action)
    new = PointNavState(pos[0], vel[0], int(steps[0]))
    obs = _pointnav_obs(pos, vel, goal)[0]
    return new, StepResult(obs, float(reward[0]), bool(done[0]), bool(success[0]))


def chain_reset(params: ChainParams, episode_seed: int) -> tuple[ChainState, np.ndarray]:
    state = ChainState(0, 0, _chain_slips(episode_seed, params.episode_cap))
    return state, _one_hot(np.array([0]), params.n_states)[0]


def chain_step(params: ChainParams, state: ChainState, action: int) -> tuple[ChainState, StepResult]:
    s2, steps2, reward, done, success = _chain_kernel(
        params.n_states, params.slip_prob, params.episode_cap,
        np.array([state.position]), np.array([state.steps_elapsed]),
        np.array([state.slip_draws[state.steps_elapsed]]), np.array([action]))
    new = ChainState(int(s2[0]), int(steps2[0]), state.slip_draws)
    return new, StepResult(_one_hot(s2, params.n_states)[0], float(reward[0]), bool(done[0]), bool(success[0]))


def chain_value_iteration(params: ChainParams, gamma: float) -> np.ndarray:
    """Optimal finite-horizon values ``V[h, s]`` with ``h`` steps remaining."""
    return _chain_dp(params, gamma, None)


def chain_policy_value(params: ChainParams, gamma: float, p_right: np.ndarray) -> float:
    """Exact expected discounted return from the start state of the stationary
    policy that moves right with probability ``p_right[s]``."""
    return float(_chain_dp(params, gamma, np.asarray(p_right, dtype=np.float64))[params.episode_cap, 0])


def _chain_dp(params, gamma, p_right):
    n, cap, slip = params.n_states, params.episode_cap, params.slip_prob
    V = np.zeros((cap + 1, n))
    idx = np.arange(n)
    up = np.minimum(idx + 1, n - 1)
    down = np.maximum(idx - 1, 0)
    for h in range(1, cap + 1):
        nxt = V[h - 1]

        def backup(s2):
            return np.where(s2 == n - 1, 1.0, gamma * nxt[s2])

        q_right = (1 - slip) * backup(up) + slip * backup(down)
        q_left = (1 - slip) * backup(down) + slip * backup(up)
        if p_right is None:
            V[h] = np.maximum(q_right, q_left)
        else:
            V[h] = p_right * q_right + (1 - p_right) * q_left
        V[h, n - 1] = 0.0  # terminal
    return V


# ---------------------------------------------------------------------------
# vectorized facades
# ---------------------------------------------------------------------------

class VecEnv:
    """N independent slots with auto-reset.

    On ``done`` a slot is reset immediately: the returned observation is the
    first observation of the next episode and ``dones`` marks the boundary.
    The reset uses the level in ``pending_levels[slot]`` and an episode seed
    drawn from the slot's own counter-based stream.
    """

    obs_dim: int
    action_kind: str
    action_dim: int

    def __init__(self, n_slots: int, run_seed: int, levels=None, auto_reset: bool = True):
        if n_slots < 1:
            raise ValueError("need at least one slot")
        self.n_slots = n_slots
        self.auto_reset = auto_reset
        self.run_seed = int(run_seed)
        self.episode_count = np.zeros(n_slots, dtype=np.int64)
        self.episode_return = np.zeros(n_slots)
        self.pending_levels = np.zeros(n_slots, dtype=np.int64) if levels is None else np.asarray(levels, dtype=np.int64).copy()
        self.level_seeds = self.pending_levels.copy()
        self.obs = None
        for s in range(n_slots):
            self._reset_slot(s)
        self.obs = self._observe()

    def episode_seed(self, slot: int) -> int:
        return rng.derive_seed(self.run_seed, rng.EPISODE, slot, int(self.episode_count[slot]))

    def set_levels(self, level_seeds) -> None:
        """Levels used by each slot at its next reset."""
        level_seeds = np.asarray(level_seeds, dtype=np.int64)
        if level_seeds.shape != (self.n_slots,):
            raise ValueError(f"expected {self.n_slots} level seeds, got {level_seeds.shape}")
        self.pending_levels = level_seeds.copy()

    def step(self, actions):
        actions = np.asarray(actions)
        if len(actions) != self.n_slots:
            raise ValueError(f"got {len(actions)} actions for {self.n_slots} slots")
        reward, done, success = self._step(actions)
        self.episode_return += reward
        finished_return = np.where(done, self.episode_return, np.nan)
        for s in np.flatnonzero(done):
            self.episode_count[s] += 1
            self.episode_return[s] = 0.0
            if self.auto_reset:
                self._reset_slot(s)
        self.obs = self._observe()
        return self.obs, reward, done, success, finished_return

    # subclass hooks: _reset_slot, _step, _observe, state arrays

    _state_keys: tuple[str, ...] = ()

    def state_dict(self) -> dict[str, np.ndarray]:
        keys = ("episode_count", "episode_return", "pending_levels", "level_seeds") + self._state_keys
        return {k: np.array(getattr(self, k)) for k in keys}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            setattr(self, k, np.array(v))
        self.obs = self._observe()


class PointNavVec(VecEnv):
    obs_dim = POINTNAV_OBS_DIM
    action_kind = "gaussian"
    action_dim = POINTNAV_ACTION_DIM
    _state_keys = ("goal", "force_gain", "friction", "radius", "cap", "pos", "vel", "steps")

    def __init__(self, n_slots: int, run_seed: int, levels=None, episode_cap: int = 256, level_fn=None,
                 auto_reset: bool = True):
        self.episode_cap = int(episode_cap)
        self.level_fn = level_fn or (lambda seed: pointnav_level(seed, self.episode_cap))
        self.goal = np.zeros((n_slots, 2))
        self.force_gain = np.zeros(n_slots)
        self.friction = np.zeros(n_slots)
        self.radius = np.zeros(n_slots)
        self.cap = np.zeros(n_slots, dtype=np.int64)
        self.pos = np.zeros((n_slots, 2))
        self.vel = np.zeros((n_slots, 2))
        self.steps = np.zeros(n_slots, dtype=np.int64)
        super().__init__(n_slots, run_seed, levels, auto_reset)

    def set_params(self, slot: int, p: PointNavParams) -> None:
        self.goal[slot] = p.goal
        self.force_gain[slot] = p.force_gain
        self.friction[slot] = p.friction
        self.radius[slot] = p.success_radius
        self.cap[slot] = p.episode_cap
        self.level_seeds[slot] = p.level_seed

    def _reset_slot(self, s):
        level = self.pending_levels[s]
        p = self.level_fn(int(level)) if not isinstance(level, PointNavParams) else level
        self.set_params(s, p)
        self.pos[s] = _episode_start(self.episode_seed(s))
        self.vel[s] = 0.0
        self.steps[s] = 0

    def _step(self, actions):
        if not np.isfinite(actions).all():
            raise ValueError("non-finite action")
        self.pos, self.vel, self.steps, reward, done, success = _pointnav_kernel(
            self.goal, self.force_gain, self.friction, self.radius, self.cap,
            self.pos, self.vel, self.steps, actions.astype(np.float64))
        return reward, done, success

    def _observe(self):
        return _pointnav_obs(self.pos, self.vel, self.goal)


class ChainVec(VecEnv):
    action_kind = "categorical"
    action_dim = 2
    _state_keys = ("pos", "steps", "slip_u")

    def __init__(self, n_slots: int, run_seed: int, params: ChainParams, levels=None, auto_reset: bool = True):
        self.params = params
        self.obs_dim = params.n_states
        self.pos = np.zeros(n_slots, dtype=np.int64)
        self.steps = np.zeros(n_slots, dtype=np.int64)
        self.slip_u = np.zeros((n_slots, params.episode_cap))
        super().__init__(n_slots, run_seed, levels, auto_reset)

    def _reset_slot(self, s):
        self.level_seeds[s] = self.pending_levels[s]
        self.pos[s] = 0
        self.steps[s] = 0
        self.slip_u[s] = _chain_slips(self.episode_seed(s), self.params.episode_cap)

    def _step(self, actions):
        p = self.params
        # finished slots may keep stepping when auto-reset is off
        u = self.slip_u[np.arange(self.n_slots), np.minimum(self.steps, p.episode_cap - 1)]
        self.pos, self.steps, reward, done, success = _chain_kernel(
            p.n_states, p.slip_prob, p.episode_cap, self.pos, self.steps, u, actions)
        return reward, done, success

    def _observe(self):
        return _one_hot(self.pos, self.params.n_states)
