"""Small actor-critic MLPs with hand-written reverse-mode gradients.

Parameters are a flat, ordered ``dict`` of arrays (a "param tree")::

    actor.0.w, actor.0.b, ..., actor.L.w, actor.L.b,
    critic.0.w, ..., critic.L.b,
    log_std                      # diagonal-Gaussian head only

Weights are stored ``(fan_in, fan_out)`` and applied as ``x @ w + b``. Gradients
use the same keys, so optimizer and clipping code is just a loop over a dict.

Losses are written against the network *outputs*: a head loss receives the
action distribution and the values and returns the scalar together with its
gradient with respect to those outputs. :func:`value_and_grad` chains that with
the backward pass through both towers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from plateau_lab import rng

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
_LOG_2PI = math.log(2.0 * math.pi)

Params = dict[str, np.ndarray]


class NonFiniteError(FloatingPointError):
    """A loss, gradient or network output contained NaN or inf."""


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    head: str = "categorical"  # or "gaussian"
    head_dim: int = 2  # number of actions, or action dimension

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise ValueError(f"all widths must be >= 1: {self}")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in ("categorical", "gaussian"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "categorical" and self.head_dim < 2:
            raise ValueError("categorical head needs at least 2 actions")
        if self.head_dim < 1:
            raise ValueError("head_dim must be >= 1")

    @property
    def n_layers(self) -> int:
        return len(self.hidden_widths) + 1


@dataclass
class DistParams:
    """Per-state action distribution; also used for gradients w.r.t. it.

    ``logits`` has shape (B, n_actions) for a categorical head. For a Gaussian
    head ``mean`` and ``log_std`` both have shape (B, d); ``log_std`` is the
    clamped, state-independent vector broadcast over the batch.
    """

    kind: str
    logits: np.ndarray | None = None
    mean: np.ndarray | None = None
    log_std: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.logits if self.kind == "categorical" else self.mean)

    def take(self, idx) -> "DistParams":
        if self.kind == "categorical":
            return DistParams("categorical", logits=self.logits[idx])
        return DistParams("gaussian", mean=self.mean[idx], log_std=self.log_std[idx])

    def reshape(self, *lead: int) -> "DistParams":
        if self.kind == "categorical":
            return DistParams("categorical", logits=self.logits.reshape(*lead, -1))
        return DistParams("gaussian", mean=self.mean.reshape(*lead, -1),
                          log_std=self.log_std.reshape(*lead, -1))


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _orthogonal(gen: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    a = gen.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q


def init_params(spec: MlpSpec, seed: int, dtype=np.float64) -> Params:
    """Orthogonal init: gain sqrt(2) for hidden layers, 0.01 policy output, 1.0 value output."""
    params: Params = {}
    for tower, out_dim, out_gain, tag in (("actor", spec.head_dim, 0.01, 0), ("critic", 1, 1.0, 1)):
        gen = rng.stream(seed, rng.INIT, tag)
        dims = (spec.input_dim, *spec.hidden_widths, out_dim)
        for i in range(spec.n_layers):
            gain = out_gain if i == spec.n_layers - 1 else math.sqrt(2.0)
            params[f"{tower}.{i}.w"] = _orthogonal(gen, dims[i], dims[i + 1], gain).astype(dtype)
            params[f"{tower}.{i}.b"] = np.zeros(dims[i + 1], dtype=dtype)
    if spec.head == "gaussian":
        params["log_std"] = np.zeros(spec.head_dim, dtype=dtype)
    return params


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def params_allfinite(params: Params) -> bool:
    return all(np.isfinite(v).all() for v in params.values())


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _act(z, kind):
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0)


def _act_grad_from_output(h, kind):
    return 1 - h * h if kind == "tanh" else (h > 0).astype(h.dtype)


def _tower_forward(params, tower, spec, x):
    hs = [x]
    h = x
    for i in range(spec.n_layers):
        z = h @ params[f"{tower}.{i}.w"] + params[f"{tower}.{i}.b"]
        h = _act(z, spec.activation) if i < spec.n_layers - 1 else z
        hs.append(h)
    return h, hs


def _tower_backward(params, tower, spec, hs, dout, grads):
    dz = dout
    for i in reversed(range(spec.n_layers)):
        grads[f"{tower}.{i}.w"] = hs[i].T @ dz
        grads[f"{tower}.{i}.b"] = dz.sum(axis=0)
        if i > 0:
            dz = (dz @ params[f"{tower}.{i}.w"].T) * _act_grad_from_output(hs[i], spec.activation)


def _as_batch(spec: MlpSpec, obs) -> np.ndarray:
    obs = np.asarray(obs)
    if obs.ndim == 1:
        obs = obs[None, :]
    if obs.ndim != 2 or obs.shape[1] != spec.input_dim:
        raise ValueError(f"expected observations of shape (B, {spec.input_dim}), got {obs.shape}")
    return obs


def _head(params, spec, out) -> DistParams:
    if spec.head == "categorical":
        return DistParams("categorical", logits=out)
    log_std = np.clip(params["log_std"], LOG_STD_MIN, LOG_STD_MAX)
    return DistParams("gaussian", mean=out, log_std=np.broadcast_to(log_std, out.shape))


def policy(params: Params, spec: MlpSpec, obs) -> DistParams:
    """Actor tower only."""
    obs = _as_batch(spec, obs)
    out, _ = _tower_forward(params, "actor", spec, obs)
    return _head(params, spec, out)


def value(params: Params, spec: MlpSpec, obs) -> np.ndarray:
    """Critic tower only."""
    obs = _as_batch(spec, obs)
    out, _ = _tower_forward(params, "critic", spec, obs)
    return out[:, 0]


def forward(params: Params, spec: MlpSpec, obs) -> tuple[DistParams, np.ndarray]:
    return policy(params, spec, obs), value(params, spec, obs)


HeadLoss = Callable[[DistParams, np.ndarray], tuple[float, "DistParams | None", "np.ndarray | None"]]


def value_and_grad(loss_fn: HeadLoss, params: Params, spec: MlpSpec, obs) -> tuple[float, Params]:
    """Evaluate ``loss_fn(forward(params, obs))`` and its exact gradient.

    ``loss_fn(dist, values)`` must return ``(loss, d_dist, d_values)`` where the
    last two are gradients of the loss w.r.t. the distribution parameters and
    the value predictions (``None`` when the loss does not depend on them).
    """
    obs = _as_batch(spec, obs)
    a_out, a_hs = _tower_forward(params, "actor", spec, obs)
    c_out, c_hs = _tower_forward(params, "critic", spec, obs)
    dist = _head(params, spec, a_out)
    loss, d_dist, d_values = loss_fn(dist, c_out[:, 0])
    loss = float(loss)
    if not math.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss}")

    grads = zeros_like(params)
    if d_dist is not None:
        if spec.head == "categorical":
            d_out = d_dist.logits
        else:
            d_out = d_dist.mean
            raw = params["log_std"]
            inside = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
            grads["log_std"] = (d_dist.log_std.sum(axis=0) * inside).astype(raw.dtype)
        _tower_backward(params, "actor", spec, a_hs, d_out.astype(a_out.dtype, copy=False), grads)
    if d_values is not None:
        d_c = np.asarray(d_values, dtype=c_out.dtype)[:, None]
        _tower_backward(params, "critic", spec, c_hs, d_c, grads)
    return loss, grads


def grad(loss_fn: HeadLoss, params: Params, spec: MlpSpec, obs) -> Params:
    return value_and_grad(loss_fn, params, spec, obs)[1]


# ---------------------------------------------------------------------------
# distributions
# ---------------------------------------------------------------------------

def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_prob(dist: DistParams, actions) -> np.ndarray:
    actions = np.asarray(actions)
    if dist.kind == "categorical":
        n = dist.logits.shape[-1]
        idx = actions.astype(np.int64)
        if idx.min(initial=0) < 0 or idx.max(initial=0) >= n:
            raise IndexError(f"action index out of range [0, {n})")
        lsm = _log_softmax(dist.logits)
        return np.take_along_axis(lsm, idx[..., None], axis=-1)[..., 0]
    z = (actions - dist.mean) * np.exp(-dist.log_std)
    return np.sum(-0.5 * z * z - dist.log_std - 0.5 * _LOG_2PI, axis=-1)


def log_prob_vjp(dist: DistParams, actions, upstream) -> DistParams:
    """Gradient of ``sum(upstream * log_prob(dist, actions))`` w.r.t. ``dist``."""
    upstream = np.asarray(upstream)[..., None]
    if dist.kind == "categorical":
        p = np.exp(_log_softmax(dist.logits))
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, np.asarray(actions).astype(np.int64)[..., None], 1.0, axis=-1)
        return DistParams("categorical", logits=upstream * (onehot - p))
    inv_var = np.exp(-2.0 * dist.log_std)
    diff = np.asarray(actions) - dist.mean
    return DistParams("gaussian", mean=upstream * diff * inv_var,
                      log_std=upstream * (diff * diff * inv_var - 1.0))


def entropy(dist: DistParams) -> np.ndarray:
    if dist.kind == "categorical":
        lsm = _log_softmax(dist.logits)
        return -np.sum(np.exp(lsm) * lsm, axis=-1)
    d = dist.log_std.shape[-1]
    return np.sum(dist.log_std, axis=-1) + 0.5 * d * (1.0 + _LOG_2PI)


def entropy_vjp(dist: DistParams, upstream) -> DistParams:
    upstream = np.asarray(upstream)[..., None]
    if dist.kind == "categorical":
        lsm = _log_softmax(dist.logits)
        p = np.exp(lsm)
        h = -np.sum(p * lsm, axis=-1, keepdims=True)
        return DistParams("categorical", logits=-upstream * p * (lsm + h))
    return DistParams("gaussian", mean=np.zeros_like(dist.mean),
                      log_std=upstream * np.ones_like(dist.log_std))


def kl(p: DistParams, q: DistParams) -> np.ndarray:
    """Closed-form KL(p || q) per state."""
    if p.kind != q.kind:
        raise ValueError(f"KL between different heads: {p.kind} vs {q.kind}")
    if p.kind == "categorical":
        lp = _log_softmax(p.logits)
        lq = _log_softmax(q.logits)
        out = np.sum(np.exp(lp) * (lp - lq), axis=-1)
    else:
        var_ratio = np.exp(2.0 * (p.log_std - q.log_std))
        mean_term = (p.mean - q.mean) ** 2 * np.exp(-2.0 * q.log_std)
        out = np.sum(q.log_std - p.log_std + 0.5 * (var_ratio + mean_term) - 0.5, axis=-1)
    # rounding can push an exact zero slightly negative
    return np.maximum(out, 0.0)


def sample(dist: DistParams, noise: np.ndarray) -> np.ndarray:
    """Draw actions from caller-provided noise.

    Categorical heads expect uniforms in [0, 1) of shape (B,) and use the
    inverse CDF; Gaussian heads expect standard normals of shape (B, d).
    """
    if dist.kind == "categorical":
        p = np.exp(_log_softmax(dist.logits.astype(np.float64)))
        cdf = np.cumsum(p, axis=-1)
        n = p.shape[-1]
        return np.minimum((noise[:, None] >= cdf).sum(axis=-1), n - 1)
    return dist.mean + np.exp(dist.log_std) * noise


def mode(dist: DistParams) -> np.ndarray:
    if dist.kind == "categorical":
        return np.argmax(dist.logits, axis=-1)
    return dist.mean.copy()


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def global_norm(grads: Params) -> float:
    # fixed key order and float64 accumulation keep this reproducible
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def global_norm_clip(grads: Params, max_norm: float) -> Params:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}


@dataclass
class AdamState:
    m: Params
    v: Params
    lr: float
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Params, lr: float, **kw) -> "AdamState":
        return cls(m=zeros_like(params), v=zeros_like(params), lr=lr, **kw)


def adam_step(state: AdamState, params: Params, grads: Params) -> tuple[Params, AdamState]:
    if not all(np.isfinite(g).all() for g in grads.values()):
        raise NonFiniteError("non-finite gradient passed to adam_step")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p[k] = (p - step).astype(p.dtype, copy=False)
        new_m[k] = m.astype(p.dtype, copy=False)
        new_v[k] = v.astype(p.dtype, copy=False)
    return new_p, replace(state, m=new_m, v=new_v, t=t)
