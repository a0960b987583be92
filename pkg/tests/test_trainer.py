import json
import math

import numpy as np
import pytest

from plateau_lab import ppo, trainer
from plateau_lab.config import ConfigError, TrainConfig


def small(**kw):
    base = dict(env="pointnav", pointnav_cap=32, hidden=(16,), n_envs=8, n_steps=16, n_epochs=2, n_minibatches=4,
                total_env_steps=8 * 16 * 6, eval_levels=4, eval_episodes=1, checkpoint_interval=3,
                mode="ppo_ewma", com=4.0, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def files(run_dir):
    return {name: (run_dir / name).read_bytes() for name in ("metrics.csv", "eval.json", "config.txt")}


def test_identical_seeds_give_identical_run_dirs(tmp_path):
    a = trainer.train(small(), tmp_path / "a")
    b = trainer.train(small(), tmp_path / "b")
    assert files(a.run_dir) == files(b.run_dir)
    assert (a.run_dir / "log.jsonl").read_bytes() == (b.run_dir / "log.jsonl").read_bytes()
    c = trainer.train(small(seed=1), tmp_path / "c")
    assert files(c.run_dir)["metrics.csv"] != files(a.run_dir)["metrics.csv"]


def test_run_dir_layout(tmp_path):
    res = trainer.train(small(), tmp_path / "r")
    names = sorted(p.name for p in (res.run_dir / "checkpoints").iterdir())
    assert names == ["ckpt_000003.plab", "ckpt_000006.plab"]
    rows = (res.run_dir / "metrics.csv").read_text().splitlines()
    assert len(rows) == 7 and rows[1].startswith("1,128,")
    ev = json.loads((res.run_dir / "eval.json").read_text())
    assert ev["update"] == 6 and ev["env_steps"] == 768
    assert [r.update_index for r in trainer.read_metrics(res.run_dir)] == list(range(1, 7))


@pytest.mark.parametrize("extra", [{}, {"mode": "standard_ppo", "com": 0.0}, {"env": "chain", "chain_cap": 12},
                                   {"sfl": True, "sfl_rollout_length": 32, "sfl_filter_batch": 8,
                                    "sfl_buffer_size": 4, "sfl_update_period": 2, "sfl_episodes_per_level": 2}])
def test_resume_is_bitwise_continuation(tmp_path, extra):
    full = trainer.train(small(**extra), tmp_path / "full")
    ck = tmp_path / "full" / "checkpoints" / "ckpt_000003.plab"
    cont = trainer.resume(ck, tmp_path / "cont")
    assert files(full.run_dir) == files(cont.run_dir)
    for k, v in full.state.params.items():
        assert cont.state.params[k].tobytes() == v.tobytes()


def test_resume_config_must_match(tmp_path):
    trainer.train(small(), tmp_path / "r")
    ck = tmp_path / "r" / "checkpoints" / "ckpt_000003.plab"
    trainer.resume(ck, tmp_path / "ok", config=small())
    with pytest.raises(ConfigError, match="hash"):
        trainer.resume(ck, tmp_path / "bad", config=small(lr=2e-3))
    with pytest.raises(ConfigError):
        trainer.resume(ck, tmp_path / "bad", overrides={"n_envs": 4})


def test_com_override_recomputes_beta_and_keeps_prox(tmp_path):
    trainer.train(small(com=1.0), tmp_path / "r")
    ck = tmp_path / "r" / "checkpoints" / "ckpt_000003.plab"
    st = trainer.TrainState.from_checkpoint(trainer.checkpoint.load(ck))
    res = trainer.resume(ck, tmp_path / "s", overrides={"com": "32", "total_env_steps": 8 * 16 * 3})
    assert res.state.ewma.beta == pytest.approx(32 / 33)
    assert res.state.cfg.com == 32.0 and res.state.update == 3
    for k, v in st.ewma.prox.items():
        assert res.state.ewma.prox[k].tobytes() == v.tobytes()
    assert "com = 32.0" in (tmp_path / "s" / "config.txt").read_text()


def test_budget_extension_and_shrink(tmp_path):
    trainer.train(small(), tmp_path / "r")
    ck = tmp_path / "r" / "checkpoints" / "ckpt_000006.plab"
    res = trainer.resume(ck, tmp_path / "more", overrides={"total_env_steps": 8 * 16 * 9})
    assert res.state.update == 9 and len(res.records) == 9
    with pytest.raises(ConfigError):
        trainer.resume(ck, tmp_path / "less", overrides={"total_env_steps": 8 * 16 * 2})


def test_com_override_rejected_in_standard_mode(tmp_path):
    trainer.train(small(mode="standard_ppo", com=0.0), tmp_path / "r")
    ck = tmp_path / "r" / "checkpoints" / "ckpt_000003.plab"
    with pytest.raises(ConfigError, match="ppo_ewma"):
        trainer.resume(ck, tmp_path / "s", overrides={"com": 8})


def test_zero_budget_only_evaluates(tmp_path):
    res = trainer.train(small(total_env_steps=0), tmp_path / "z")
    assert res.records == [] and res.state.update == 0
    assert (res.run_dir / "metrics.csv").read_text().splitlines() == [trainer.metrics.CSV_HEADER]
    assert 0.0 <= res.final_eval.solve_rate <= 1.0
    assert res.max_solve_rate == res.final_eval.solve_rate


def test_lr_anneal_reaches_zero_on_last_update(tmp_path):
    res = trainer.train(small(lr_anneal=True), tmp_path / "a")
    lrs = [r.lr_effective for r in res.records]
    assert lrs[0] == 1e-3 and lrs[-1] == 0.0
    assert np.all(np.diff(lrs) < 0)
    assert [r.lr_effective for r in trainer.train(small(), tmp_path / "b").records] == [1e-3] * 6


def test_metrics_columns_are_consistent(tmp_path):
    res = trainer.train(small(), tmp_path / "m")
    for r in res.records:
        assert r.ddr == pytest.approx(128 / r.mean_kl_behavior) if r.mean_kl_behavior > 0 else math.isinf(r.ddr)
        assert r.post_clip_grad_norm <= 0.5 + 1e-6
        assert r.pre_clip_grad_norm >= r.post_clip_grad_norm - 1e-9
        assert 0.0 <= r.solve_rate <= 1.0


def test_eval_set_is_fixed_and_held_out():
    cfg = small(eval_levels=16)
    a, b = trainer.eval_level_set(cfg), trainer.eval_level_set(small(eval_levels=16, seed=5))
    assert a == b and len(set(a)) == 16
    train_levels = trainer.initial_levels(cfg)
    assert not set(a) & set(train_levels.tolist())


def test_ewma_state_only_in_ewma_mode():
    assert trainer.TrainState.fresh(small(mode="standard_ppo", com=0.0)).ewma is None
    st = trainer.TrainState.fresh(small(com=8.0))
    assert st.ewma.beta == ppo.com_to_beta(8.0)
