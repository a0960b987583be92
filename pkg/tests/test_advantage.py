import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plateau_lab.advantage import gae, normalize


def brute_force_gae(r, v, d, boot, gamma, lam):
    """Explicit double sum over TD residuals, truncated at episode ends."""
    K, N = r.shape
    v_next = np.concatenate([v[1:], boot[None]], axis=0)
    delta = r + gamma * (1 - d) * v_next - v
    out = np.zeros_like(r)
    for n in range(N):
        for t in range(K):
            total, w = 0.0, 1.0
            for l in range(K - t):
                total += w * delta[t + l, n]
                if d[t + l, n]:
                    break
                w *= gamma * lam
            out[t, n] = total
    return out


def test_lambda_zero_is_td_residual():
    r = np.array([[1.0], [2.0], [0.5]])
    v = np.array([[0.1], [0.2], [0.3]])
    d = np.zeros((3, 1))
    boot = np.array([0.7])
    adv = gae(r, v, d, boot, 0.9, 0.0)
    expected = r[:, 0] + 0.9 * np.array([0.2, 0.3, 0.7]) - v[:, 0]
    np.testing.assert_array_equal(adv[:, 0], expected)


def test_undiscounted_unroll():
    r = np.array([[1.0], [2.0], [3.0]])
    v = np.array([[0.5], [9.0], [-4.0]])
    adv = gae(r, v, np.zeros((3, 1)), np.array([10.0]), 1.0, 1.0)
    assert adv[0, 0] == pytest.approx(1 + 2 + 3 + 10 - 0.5, abs=1e-12)


def test_done_masks_future():
    r = np.array([[1.0], [100.0], [100.0]])
    v = np.array([[0.25], [5.0], [5.0]])
    d = np.array([[1.0], [0.0], [0.0]])
    adv = gae(r, v, d, np.array([50.0]), 0.99, 0.95)
    assert adv[0, 0] == 1.0 - 0.25


def test_zero_everything():
    z = np.zeros((4, 3))
    assert not gae(z, z, z, np.zeros(3), 0.99, 0.9).any()


def test_range_validation():
    z = np.zeros((1, 1))
    with pytest.raises(ValueError):
        gae(z, z, z, np.zeros(1), 1.1, 0.9)
    with pytest.raises(ValueError):
        gae(z, z, z, np.zeros(1), 0.9, -0.1)


@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1), st.integers(1, 7), st.integers(1, 3))
@settings(max_examples=60, deadline=None)
def test_matches_double_sum(seed, gamma, lam, K, N):
    gen = np.random.default_rng(seed)
    r = gen.normal(size=(K, N))
    v = gen.normal(size=(K, N))
    d = (gen.uniform(size=(K, N)) < 0.3).astype(float)
    boot = gen.normal(size=N)
    np.testing.assert_allclose(gae(r, v, d, boot, gamma, lam), brute_force_gae(r, v, d, boot, gamma, lam),
                               rtol=0, atol=1e-10)


def test_normalize():
    a = np.random.default_rng(0).normal(3, 5, 1000)
    n = normalize(a)
    assert abs(n.mean()) < 1e-12 and abs(n.std() - 1) < 1e-6
