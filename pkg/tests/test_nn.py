import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plateau_lab import nn


def small_spec(head="categorical", act="tanh"):
    return nn.MlpSpec(4, (8,), act, head, 3 if head == "categorical" else 2)


def random_params(spec, seed, scale=0.5):
    gen = np.random.default_rng(seed)
    return {k: gen.normal(0, scale, v.shape) for k, v in nn.init_params(spec, 0).items()}


def fd_grad(f, params, key, idx, h=1e-5):
    plus, minus = nn.copy_params(params), nn.copy_params(params)
    plus[key][idx] += h
    minus[key][idx] -= h
    return (f(plus) - f(minus)) / (2 * h)


# -- spec / init ---------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ValueError):
        nn.MlpSpec(4, (0,), "tanh", "categorical", 2)
    with pytest.raises(ValueError):
        nn.MlpSpec(4, (8,), "tanh", "categorical", 1)
    with pytest.raises(ValueError):
        nn.MlpSpec(4, (8,), "sigmoid", "categorical", 2)


def test_init_deterministic_and_zero_bias():
    spec = nn.MlpSpec(3, (4,), "tanh", "categorical", 2)
    a, b = nn.init_params(spec, 7), nn.init_params(spec, 7)
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k], b[k])
        if k.endswith(".b"):
            assert not a[k].any()


def test_init_orthogonal_gain():
    spec = nn.MlpSpec(16, (16, 16), "tanh", "gaussian", 2)
    p = nn.init_params(spec, 3)
    w = p["actor.1.w"]
    np.testing.assert_allclose(w.T @ w, 2.0 * np.eye(16), atol=1e-6)
    assert not p["log_std"].any()
    # output gains
    w_pi = p["actor.2.w"]
    np.testing.assert_allclose(w_pi.T @ w_pi, 1e-4 * np.eye(2), atol=1e-12)
    w_v = p["critic.2.w"]
    np.testing.assert_allclose(w_v.T @ w_v, np.eye(1), atol=1e-12)


# -- forward ---------------------------------------------------------------------

def test_zero_params_give_uniform_logits():
    spec = small_spec()
    p = nn.zeros_like(nn.init_params(spec, 0))
    dist, v = nn.forward(p, spec, np.ones((5, 4)))
    assert not dist.logits.any() and not v.any()


def test_batching_consistency():
    spec = small_spec("gaussian")
    p = random_params(spec, 1)
    x = np.random.default_rng(0).normal(size=4)
    d1, v1 = nn.forward(p, spec, x)
    d2, v2 = nn.forward(p, spec, np.stack([x, x, x]))
    # BLAS may pick a different kernel per batch size; rows agree to rounding
    for row in range(3):
        np.testing.assert_allclose(d2.mean[row], d1.mean[0], rtol=1e-13, atol=1e-15)
        assert v2[row] == pytest.approx(v1[0], rel=1e-13)


def test_forward_dimension_mismatch():
    spec = small_spec()
    with pytest.raises(ValueError):
        nn.forward(nn.init_params(spec, 0), spec, np.ones((2, 5)))


@given(st.permutations(range(6)))
@settings(max_examples=20, deadline=None)
def test_forward_permutation_equivariant(perm):
    spec = small_spec()
    p = random_params(spec, 2)
    x = np.random.default_rng(1).normal(size=(6, 4))
    d, v = nn.forward(p, spec, x)
    dp, vp = nn.forward(p, spec, x[list(perm)])
    np.testing.assert_allclose(dp.logits, d.logits[list(perm)], rtol=0, atol=1e-14)
    np.testing.assert_allclose(vp, v[list(perm)], rtol=0, atol=1e-14)


def test_forward_jacobian_matches_finite_difference():
    spec = small_spec("gaussian")
    p = random_params(spec, 3)
    x = np.random.default_rng(2).normal(size=(1, 4))
    u = np.random.default_rng(4).normal(size=2)

    def loss_fn(dist, values):
        return float(dist.mean[0] @ u + values[0]), nn.DistParams("gaussian", mean=u[None], log_std=np.zeros((1, 2))), np.ones(1)

    g = nn.grad(loss_fn, p, spec, x)

    def f(q):
        d, v = nn.forward(q, spec, x)
        return float(d.mean[0] @ u + v[0])

    for key in ("actor.0.w", "critic.1.w", "actor.1.b"):
        idx = tuple(0 for _ in p[key].shape)
        assert fd_grad(f, p, key, idx) == pytest.approx(g[key][idx], rel=1e-6, abs=1e-9)


# -- distributions -------------------------------------------------------------

def cat(logits):
    return nn.DistParams("categorical", logits=np.atleast_2d(np.asarray(logits, dtype=np.float64)))


def gauss(mean, log_std):
    mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
    return nn.DistParams("gaussian", mean=mean, log_std=np.broadcast_to(np.asarray(log_std, np.float64), mean.shape))


def test_log_prob_uniform_categorical():
    d = cat(np.zeros((4, 4)))
    np.testing.assert_allclose(nn.log_prob(d, np.arange(4)), math.log(0.25))


def test_log_prob_gaussian_at_mode():
    d = gauss([[0.3, -1.2, 4.0]], 0.0)
    assert nn.log_prob(d, d.mean)[0] == pytest.approx(-1.5 * math.log(2 * math.pi), abs=1e-14)


def test_log_prob_out_of_range():
    with pytest.raises(IndexError):
        nn.log_prob(cat([0.0, 0.0]), np.array([2]))
    with pytest.raises(IndexError):
        nn.log_prob(cat([0.0, 0.0]), np.array([-1]))


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=7))
def test_categorical_probs_sum_to_one(logits):
    n = len(logits)
    d = cat(np.tile(logits, (n, 1)))
    total = np.exp(nn.log_prob(d, np.arange(n))).sum()
    assert abs(total - 1.0) <= 1e-10


def test_entropy_examples():
    assert nn.entropy(cat(np.zeros(4)))[0] == pytest.approx(math.log(4), abs=1e-14)
    assert nn.entropy(cat([50.0, -50.0, -50.0]))[0] == pytest.approx(0.0, abs=1e-20)
    assert nn.entropy(gauss([[0.0, 0.0]], 0.0))[0] == pytest.approx(1 + math.log(2 * math.pi), abs=1e-14)


def test_kl_examples():
    p, q = cat(np.log([0.5, 0.5])), cat(np.log([0.9, 0.1]))
    expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert nn.kl(p, q)[0] == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.5108, abs=1e-4)
    delta = 0.7
    assert nn.kl(gauss([[0.0, 1.0]], 0.0), gauss([[delta, 1.0 + delta]], 0.0))[0] == pytest.approx(delta ** 2, abs=1e-12)
    with pytest.raises(ValueError):
        nn.kl(p, gauss([[0.0]], 0.0))


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_kl_nonnegative_and_zero_on_self(a, b):
    p, q = cat(a), cat(b)
    assert nn.kl(p, q)[0] >= 0
    assert nn.kl(p, p)[0] == 0
    g1, g2 = gauss([a[:2]], a[2] / 5), gauss([b[:2]], b[2] / 5)
    assert nn.kl(g1, g2)[0] >= 0
    assert nn.kl(g1, g1)[0] == 0


def test_kl_gaussian_against_numeric_integration():
    p, q = gauss([[0.2]], -0.3), gauss([[-0.4]], 0.25)
    x = np.linspace(-12, 12, 200001)
    lp = nn.log_prob(nn.DistParams("gaussian", mean=np.full((x.size, 1), 0.2), log_std=np.full((x.size, 1), -0.3)), x[:, None])
    lq = nn.log_prob(nn.DistParams("gaussian", mean=np.full((x.size, 1), -0.4), log_std=np.full((x.size, 1), 0.25)), x[:, None])
    integral = np.trapezoid(np.exp(lp) * (lp - lq), x)
    assert nn.kl(p, q)[0] == pytest.approx(integral, rel=1e-8)


def test_sample_categorical_inverse_cdf():
    d = cat(np.tile(np.log([0.2, 0.3, 0.5]), (4, 1)))
    out = nn.sample(d, np.array([0.1, 0.25, 0.6, 0.999]))
    assert out.tolist() == [0, 1, 2, 2]


def test_log_std_clamped():
    spec = small_spec("gaussian")
    p = nn.init_params(spec, 0)
    p["log_std"] = np.array([5.0, -20.0])
    d = nn.policy(p, spec, np.zeros((1, 4)))
    assert d.log_std[0].tolist() == [nn.LOG_STD_MAX, nn.LOG_STD_MIN]


# -- gradients -------------------------------------------------------------------

def test_grad_of_value_square_at_zero():
    spec = small_spec()
    p = nn.zeros_like(nn.init_params(spec, 0))

    def loss_fn(dist, v):
        return float(np.mean(v ** 2)), None, 2 * v / len(v)

    g = nn.grad(loss_fn, p, spec, np.ones((3, 4)))
    assert all(not v.any() for v in g.values())


def test_grad_blocks_zero_when_loss_ignores_them():
    spec = small_spec()
    p = random_params(spec, 5)

    def loss_fn(dist, v):
        return float(np.sum(v)), None, np.ones_like(v)

    g = nn.grad(loss_fn, p, spec, np.ones((3, 4)))
    assert all(not g[k].any() for k in g if k.startswith("actor"))
    assert any(g[k].any() for k in g if k.startswith("critic"))


def test_non_finite_loss_raises():
    spec = small_spec()
    with pytest.raises(nn.NonFiniteError):
        nn.grad(lambda d, v: (float("nan"), None, None), nn.init_params(spec, 0), spec, np.ones((1, 4)))


@pytest.mark.parametrize("head", ["categorical", "gaussian"])
@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_log_prob_entropy_gradient_finite_differences(head, act):
    spec = small_spec(head, act)
    p = random_params(spec, 11)
    if head == "gaussian":
        p["log_std"] = np.array([-0.4, 0.3])
    gen = np.random.default_rng(12)
    x = gen.normal(size=(5, 4))
    a = gen.integers(0, 3, 5) if head == "categorical" else gen.normal(size=(5, 2))
    w = gen.normal(size=5)

    def loss_fn(dist, v):
        val = float(np.sum(w * nn.log_prob(dist, a)) + 0.3 * np.sum(nn.entropy(dist)) + np.sum(v ** 3))
        d_lp = nn.log_prob_vjp(dist, a, w)
        d_h = nn.entropy_vjp(dist, np.full(5, 0.3))
        if head == "categorical":
            dd = nn.DistParams("categorical", logits=d_lp.logits + d_h.logits)
        else:
            dd = nn.DistParams("gaussian", mean=d_lp.mean + d_h.mean, log_std=d_lp.log_std + d_h.log_std)
        return val, dd, 3 * v ** 2

    _, g = nn.value_and_grad(loss_fn, p, spec, x)

    def f(q):
        d, v = nn.forward(q, spec, x)
        return float(np.sum(w * nn.log_prob(d, a)) + 0.3 * np.sum(nn.entropy(d)) + np.sum(v ** 3))

    for key, arr in p.items():
        for idx in list(np.ndindex(arr.shape))[:6]:
            fd = fd_grad(f, p, key, idx)
            assert g[key][idx] == pytest.approx(fd, rel=1e-5, abs=1e-8), (key, idx)


# -- clipping and Adam -----------------------------------------------------------

def tree(*arrays):
    return {f"k{i}": np.asarray(a, dtype=np.float64) for i, a in enumerate(arrays)}


def test_global_norm_clip_examples():
    g = tree([0.3, 0.0], [0.0])
    assert nn.global_norm_clip(g, 0.5)["k0"].tolist() == [0.3, 0.0]
    g = tree([0.6, 0.0], [0.8])
    c = nn.global_norm_clip(g, 0.5)
    np.testing.assert_allclose(c["k0"], [0.3, 0.0])
    np.testing.assert_allclose(c["k1"], [0.4])
    with pytest.raises(ValueError):
        nn.global_norm_clip(g, 0.0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=10), st.floats(1e-3, 10))
def test_global_norm_clip_properties(vals, max_norm):
    g = tree(vals)
    c = nn.global_norm_clip(g, max_norm)
    assert abs(nn.global_norm(c) - min(nn.global_norm(g), max_norm)) <= 1e-12 * max(1.0, max_norm)
    cc = nn.global_norm_clip(c, max_norm)
    np.testing.assert_allclose(cc["k0"], c["k0"], rtol=1e-12)


def test_adam_zero_gradient_fresh_state():
    p = tree([1.0, -2.0])
    s = nn.AdamState.fresh(p, 1e-3)
    p2, s2 = nn.adam_step(s, p, nn.zeros_like(p))
    np.testing.assert_array_equal(p2["k0"], p["k0"])
    assert not s2.m["k0"].any() and not s2.v["k0"].any() and s2.t == 1


def test_adam_first_step_is_signed_lr():
    p = tree([1.0, -2.0, 0.5])
    g = tree([3.0, -0.01, 1e-3])
    p2, _ = nn.adam_step(nn.AdamState.fresh(p, 1e-2), p, g)
    np.testing.assert_allclose(p2["k0"] - p["k0"], -1e-2 * np.sign(g["k0"]), rtol=1e-4)


def test_adam_deterministic_and_rejects_nan():
    p = tree([1.0])
    s = nn.AdamState.fresh(p, 1e-2)
    g = tree([0.5])
    a = nn.adam_step(nn.AdamState(dict(s.m), dict(s.v), s.lr), p, g)
    b = nn.adam_step(nn.AdamState(dict(s.m), dict(s.v), s.lr), p, g)
    assert a[0]["k0"][0] == b[0]["k0"][0]
    with pytest.raises(nn.NonFiniteError):
        nn.adam_step(s, p, tree([np.nan]))


def test_adam_matches_reference_over_steps():
    gen = np.random.default_rng(0)
    p = tree(gen.normal(size=3))
    s = nn.AdamState.fresh(p, 0.05)
    x, m, v = p["k0"].copy(), np.zeros(3), np.zeros(3)
    for t in range(1, 6):
        g = gen.normal(size=3)
        p, s = nn.adam_step(s, p, tree(g))
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["k0"], x, rtol=1e-13)
