"""The outer training loop, run directories, checkpoint and resume.

A run directory holds::

    config.txt      canonical config (``key = value``)
    metrics.csv     one row per outer update
    log.jsonl       events: checkpoints, curriculum buffer refreshes, aborts
    eval.json       final evaluation
    checkpoints/    ckpt_<update>.plab

Nothing in a run directory depends on wall-clock time, so two runs with the
same config are byte-identical.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from plateau_lab import advantage, checkpoint, curriculum, envs, metrics, nn, ppo, rng
from plateau_lab.config import ConfigError, TrainConfig, apply_overrides, parse_config_text
from plateau_lab.rollout import collect

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


def build_spec(cfg: TrainConfig) -> nn.MlpSpec:
    if cfg.env == "pointnav":
        return nn.MlpSpec(envs.POINTNAV_OBS_DIM, cfg.hidden, cfg.activation, "gaussian", envs.POINTNAV_ACTION_DIM)
    return nn.MlpSpec(cfg.chain_n, cfg.hidden, cfg.activation, "categorical", 2)


def chain_params(cfg: TrainConfig) -> envs.ChainParams:
    return envs.ChainParams(cfg.chain_n, cfg.chain_cap, cfg.chain_slip)


def level_fn(cfg: TrainConfig):
    rng_range = (cfg.level_difficulty_min, cfg.level_difficulty_max)
    return lambda seed: envs.pointnav_level(seed, cfg.pointnav_cap, difficulty_range=rng_range)


def make_venv(cfg: TrainConfig, levels, run_seed: int) -> envs.VecEnv:
    levels = np.asarray(levels, dtype=np.int64)
    if cfg.env == "pointnav":
        return envs.PointNavVec(len(levels), run_seed, levels, cfg.pointnav_cap, level_fn(cfg))
    return envs.ChainVec(len(levels), run_seed, chain_params(cfg), levels)


def eval_level_set(cfg: TrainConfig) -> list[int]:
    return [rng.derive_seed(cfg.eval_set_seed, rng.LEVEL, i) for i in range(cfg.eval_levels)]


def evaluate_params(cfg: TrainConfig, params: nn.Params, levels=None, episodes: int | None = None,
                    seed: int | None = None) -> metrics.EvalResult:
    spec = build_spec(cfg)
    return metrics.evaluate(
        metrics.make_policy_fn(params, spec), lambda lv, s: make_venv(cfg, lv, s),
        eval_level_set(cfg) if levels is None else levels,
        cfg.eval_episodes if episodes is None else episodes,
        cfg.eval_seed if seed is None else seed)


def chain_exact_return(cfg: TrainConfig, params: nn.Params) -> tuple[float, float]:
    """(policy return, optimal return) on the chain, both computed exactly by
    dynamic programming over the stochastic policy's per-state action probabilities."""
    cp = chain_params(cfg)
    logits = nn.policy(params, build_spec(cfg), np.eye(cp.n_states)).logits
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    p_right = z[:, 1] / z.sum(axis=1)
    optimum = float(envs.chain_value_iteration(cp, cfg.gamma)[cp.episode_cap, 0])
    return envs.chain_policy_value(cp, cfg.gamma, p_right), optimum


@dataclass
class TrainState:
    cfg: TrainConfig
    spec: nn.MlpSpec
    params: nn.Params
    adam: nn.AdamState
    ewma: ppo.EwmaState | None
    venv: envs.VecEnv
    update: int = 0
    env_steps: int = 0
    buffer: curriculum.LevelBuffer | None = None
    last_solve_rate: float = float("nan")
    last_return: float = float("nan")
    rows: list[str] = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        cfg.validate()
        spec = build_spec(cfg)
        dtype = np.dtype(cfg.dtype)
        params = nn.init_params(spec, cfg.seed, dtype)
        pcfg = cfg.ppo()
        adam = nn.AdamState.fresh(params, pcfg.lr)
        ewma = ppo.EwmaState.from_com(params, cfg.com) if cfg.mode == ppo.EWMA else None
        levels = initial_levels(cfg)
        return cls(cfg, spec, params, adam, ewma, make_venv(cfg, levels, cfg.seed))

    # -- checkpointing --------------------------------------------------
    def to_checkpoint(self) -> checkpoint.Checkpoint:
        arrays = {f"params/{k}": v for k, v in self.params.items()}
        arrays.update({f"adam_m/{k}": v for k, v in self.adam.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in self.adam.v.items()})
        if self.ewma is not None:
            arrays.update({f"prox/{k}": v for k, v in self.ewma.prox.items()})
        arrays.update({f"venv/{k}": v for k, v in self.venv.state_dict().items()})
        meta = {
            "update": self.update,
            "env_steps": self.env_steps,
            "adam": {"t": self.adam.t, "lr": self.adam.lr, "beta1": self.adam.beta1,
                     "beta2": self.adam.beta2, "eps": self.adam.eps},
            "ewma_beta": None if self.ewma is None else self.ewma.beta,
            "buffer": None if self.buffer is None else self.buffer.to_json(),
            "last_solve_rate": self.last_solve_rate,
            "last_return": self.last_return,
            "rows": self.rows,
        }
        return checkpoint.Checkpoint(self.cfg.to_text(), meta, arrays)

    @classmethod
    def from_checkpoint(cls, ckpt: checkpoint.Checkpoint) -> "TrainState":
        cfg = parse_config_text(ckpt.config_text).validate()
        spec = build_spec(cfg)
        m = ckpt.meta
        params = ckpt.group("params")
        a = m["adam"]
        adam = nn.AdamState(ckpt.group("adam_m"), ckpt.group("adam_v"), a["lr"], a["t"], a["beta1"], a["beta2"], a["eps"])
        ewma = ppo.EwmaState(ckpt.group("prox"), m["ewma_beta"]) if m["ewma_beta"] is not None else None
        venv = make_venv(cfg, initial_levels(cfg), cfg.seed)
        venv.load_state_dict(ckpt.group("venv"))
        buf = curriculum.LevelBuffer.from_json(m["buffer"]) if m["buffer"] else None
        return cls(cfg, spec, params, adam, ewma, venv, m["update"], m["env_steps"], buf,
                   m["last_solve_rate"], m["last_return"], list(m["rows"]))


def initial_levels(cfg: TrainConfig) -> np.ndarray:
    if cfg.env != "pointnav":
        return np.zeros(cfg.n_envs, dtype=np.int64)
    return curriculum.sample_training_levels(None, cfg.n_envs, 0.0, rng.derive_seed(cfg.seed, rng.LEVEL, 0))


def effective_lr(cfg: TrainConfig, update: int) -> float:
    """Base lr, or linear decay reaching exactly 0 at the final update."""
    lr = cfg.ppo().lr
    total = cfg.total_updates
    if not cfg.lr_anneal or total <= 1:
        return lr
    return lr * (1.0 - update / (total - 1))


def run_update(st: TrainState, events=None) -> metrics.MetricsRecord:
    """One outer iteration: collect, advantages, inner loop, diagnostics."""
    cfg = st.cfg
    pcfg = cfg.ppo()
    u = st.update
    lr = effective_lr(cfg, u)

    if cfg.env == "pointnav":
        if cfg.sfl and u % cfg.sfl_update_period == 0:
            st.buffer = curriculum.refresh_buffer(
                st.buffer, metrics.make_policy_fn(st.params, st.spec), cfg.sfl_config(), cfg.seed, u,
                cfg.pointnav_cap, log=events)
        ratio = cfg.sfl_sample_ratio if cfg.sfl else 0.0
        st.venv.set_levels(curriculum.sample_training_levels(
            st.buffer, cfg.n_envs, ratio, rng.derive_seed(cfg.seed, rng.LEVEL, u + 1)))

    batch = collect(st.params, st.spec, st.venv, cfg.n_steps, rng.derive_seed(cfg.seed, rng.POLICY, u))
    batch = advantage.compute_gae(batch, pcfg.gamma, pcfg.gae_lambda)
    st.adam.lr = lr
    st.params, st.adam, st.ewma, stats = ppo.update(
        batch, st.params, st.adam, st.ewma, pcfg, st.spec, rng.derive_seed(cfg.seed, rng.SHUFFLE, u))
    if not nn.params_allfinite(st.params):
        raise nn.NonFiniteError(f"non-finite parameters after update {u}")

    st.update += 1
    st.env_steps += batch.n_transitions
    if st.update % cfg.eval_interval == 0 or st.update == cfg.total_updates:
        res = evaluate_params(cfg, st.params)
        st.last_solve_rate, st.last_return = res.solve_rate, res.mean_return

    rec = metrics.MetricsRecord(
        update_index=st.update, env_steps=st.env_steps, mean_kl_behavior=stats.kl_behavior,
        ddr=metrics.ddr(batch.n_transitions, stats.kl_behavior),
        pre_clip_grad_norm=stats.pre_clip_grad_norm, post_clip_grad_norm=stats.post_clip_grad_norm,
        param_update_l2=stats.param_update_l2, mean_return=st.last_return, solve_rate=st.last_solve_rate,
        entropy=stats.entropy, lr_effective=lr)
    st.rows.append(rec.csv_row())
    return rec


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    run_dir: Path
    state: TrainState
    records: list[metrics.MetricsRecord]
    final_eval: metrics.EvalResult

    @property
    def max_solve_rate(self) -> float:
        return max((r.solve_rate for r in self.records), default=self.final_eval.solve_rate)


class _RunWriter:
    def __init__(self, run_dir: Path, cfg: TrainConfig, prior_rows: list[str]):
        self.dir = Path(run_dir)
        (self.dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (self.dir / "config.txt").write_text(cfg.to_text())
        self.csv = open(self.dir / "metrics.csv", "w")
        self.csv.write(metrics.CSV_HEADER + "\n")
        for row in prior_rows:
            self.csv.write(row + "\n")
        self.csv.flush()
        self.events = open(self.dir / "log.jsonl", "w")

    def event(self, obj: dict) -> None:
        self.events.write(json.dumps(obj, sort_keys=True) + "\n")
        self.events.flush()

    def row(self, row: str) -> None:
        self.csv.write(row + "\n")
        self.csv.flush()

    def checkpoint(self, st: TrainState) -> Path:
        path = checkpoint.save(st.to_checkpoint(), self.dir / "checkpoints" / f"ckpt_{st.update:06d}.plab")
        self.event({"event": "checkpoint", "update": st.update, "path": path.name})
        return path

    def close(self):
        self.csv.close()
        self.events.close()


def _loop(st: TrainState, run_dir: Path, prior_rows: list[str]) -> RunResult:
    cfg = st.cfg
    w = _RunWriter(run_dir, cfg, prior_rows)
    records = [metrics.MetricsRecord.from_csv_row(dict(zip(metrics.CSV_HEADER.split(","), r.split(","))))
               for r in prior_rows]
    try:
        while st.update < cfg.total_updates:
            try:
                rec = run_update(st, w.event)
            except nn.NonFiniteError as exc:
                w.event({"event": "abort", "update": st.update, "reason": str(exc)})
                raise TrainingAborted(f"update {st.update}: {exc}") from exc
            records.append(rec)
            w.row(st.rows[-1])
            if cfg.checkpoint_interval and st.update % cfg.checkpoint_interval == 0:
                w.checkpoint(st)
        w.checkpoint(st)
        final = evaluate_params(cfg, st.params)
        (w.dir / "eval.json").write_text(json.dumps(
            {"update": st.update, "env_steps": st.env_steps, "solve_rate": final.solve_rate,
             "mean_return": final.mean_return}, sort_keys=True) + "\n")
    finally:
        w.close()
    return RunResult(w.dir, st, records, final)


def train(cfg: TrainConfig, run_dir: str | Path) -> RunResult:
    """Train from scratch until ``total_env_steps`` are used up."""
    st = TrainState.fresh(cfg)
    log.info("training %s into %s (%d updates)", cfg.env, run_dir, cfg.total_updates)
    return _loop(st, Path(run_dir), [])


def resume(ckpt_path: str | Path, run_dir: str | Path, overrides: dict | None = None,
           config: TrainConfig | None = None) -> RunResult:
    """Continue a run from a checkpoint into a new run directory.

    Without overrides the continuation is bitwise identical to the
    uninterrupted run. ``overrides`` may set ``com`` (PPO-EWMA only; the
    proximal weights are kept and only the decay is recomputed), ``clip_eps``,
    ``lr`` and ``total_env_steps`` (to extend the budget). A ``config`` passed for a plain resume must hash-match the
    checkpoint.
    """
    ckpt = checkpoint.load(ckpt_path)
    overrides = dict(overrides or {})
    unknown = set(overrides) - RESUME_OVERRIDES
    if unknown:
        raise ConfigError(f"resume can only override {', '.join(sorted(RESUME_OVERRIDES))}; got {sorted(unknown)}")
    if config is not None and config.hash() != ckpt.config_hash:
        raise ConfigError("config does not match the checkpoint (hash mismatch)")
    st = TrainState.from_checkpoint(ckpt)
    if overrides:
        if "com" in overrides and st.cfg.mode != ppo.EWMA:
            raise ConfigError("com override needs mode = ppo_ewma")
        st.cfg = apply_overrides(st.cfg, overrides).validate()
        if st.cfg.total_updates < st.update:
            raise ConfigError("total_env_steps override is below the checkpoint's progress")
        if "com" in overrides:
            st.ewma = ppo.EwmaState(st.ewma.prox, ppo.com_to_beta(st.cfg.com))
    return _loop(st, Path(run_dir), list(st.rows))


RESUME_OVERRIDES = frozenset({"com", "clip_eps", "lr", "total_env_steps"})


def read_metrics(path: str | Path) -> list[metrics.MetricsRecord]:
    import csv

    path = Path(path)
    if path.is_dir():
        path = path / "metrics.csv"
    with open(path) as fh:
        return [metrics.MetricsRecord.from_csv_row(row) for row in csv.DictReader(fh)]
