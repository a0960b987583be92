import math

import numpy as np
import pytest

from plateau_lab import sgd_analog as sa


def test_noiseless_run_is_geometric():
    tr = sa.run_quad(sa.QuadConfig(noise_std=0.0, lr=0.25, total_steps=30))
    np.testing.assert_allclose(np.sqrt(tr.sq_norm), 5.0 * 0.5 ** np.arange(31), rtol=1e-12)
    tr = sa.run_quad(sa.QuadConfig(noise_std=0.0, lr=0.1, total_steps=50))
    np.testing.assert_allclose(np.sqrt(tr.sq_norm), 5.0 * 0.8 ** np.arange(51), rtol=1e-12)


def test_half_step_lands_on_optimum():
    tr = sa.run_quad(sa.QuadConfig(noise_std=0.0, lr=0.5, total_steps=3))
    assert tr.sq_norm[1] == 0.0
    assert tr.neg_distance[0] == pytest.approx(-5.0)


def test_stationary_oracle_examples():
    sigma = sa.DEFAULT_NOISE_STD
    assert sa.stationary_second_moment(0.5, sigma, 1) == pytest.approx(sigma ** 2 / 4)
    assert sa.stationary_second_moment(0.3, 0.0, 50) == 0.0
    eta = 1e-6
    assert sa.stationary_second_moment(eta, sigma, 1) == pytest.approx(eta * sigma ** 2 / 4, rel=1e-5)
    with pytest.raises(ValueError):
        sa.stationary_second_moment(1.0, sigma, 1)


def test_stationary_oracle_matches_ar1_recursion():
    # iterate the exact variance recursion v <- (1-2 eta)^2 v + eta^2 sigma^2 to its fixed point
    for eta in (0.05, 0.1, 0.2, 0.7):
        v = 0.0
        for _ in range(20_000):
            v = (1 - 2 * eta) ** 2 * v + eta ** 2 * 0.18
        assert sa.stationary_second_moment(eta, math.sqrt(0.18), 7) == pytest.approx(7 * v, rel=1e-10)


@pytest.mark.parametrize("eta", [0.05, 0.1, 0.2])
def test_plateau_matches_oracle(eta):
    tr = sa.run_quad(sa.QuadConfig(lr=eta, total_steps=10_000, seed=1))
    oracle = sa.stationary_second_moment(eta, sa.DEFAULT_NOISE_STD, 50)
    assert tr.trailing_mean(5000) == pytest.approx(oracle, rel=0.10)


def test_constant_schedule_equals_scalar_lr():
    a = sa.run_quad(sa.QuadConfig(lr=0.1, total_steps=200, seed=3))
    b = sa.run_quad(sa.QuadConfig(lr=[(0, 0.1)], total_steps=200, seed=3))
    np.testing.assert_array_equal(a.sq_norm, b.sq_norm)


def test_schedule_validation_and_lookup():
    with pytest.raises(ValueError):
        sa.QuadConfig(lr=[(5, 0.1)]).schedule()
    with pytest.raises(ValueError):
        sa.QuadConfig(lr=[(0, 0.1), (0, 0.2)]).schedule()
    sched = [(0, 0.2), (100, 0.02)]
    assert sa.lr_at(sched, 99) == 0.2 and sa.lr_at(sched, 100) == 0.02


def test_out_of_range_lr_warns_and_diverges():
    with pytest.warns(UserWarning):
        sa.QuadConfig(lr=1.5).validate()
    with pytest.warns(UserWarning), pytest.raises(sa.DivergenceError):
        sa.run_quad(sa.QuadConfig(lr=1.5, total_steps=1000))


def test_trace_csv(tmp_path):
    cfg = sa.QuadConfig(lr=[(0, 0.2), (3, 0.1)], total_steps=5)
    tr = sa.run_quad(cfg)
    path = tmp_path / "trace.csv"
    sa.write_trace_csv(tr, path, cfg.schedule())
    lines = path.read_text().splitlines()
    assert lines[0] == "step,lr,neg_distance,sq_norm"
    assert len(lines) == 7
    assert lines[4].split(",")[1] == "0.1"
