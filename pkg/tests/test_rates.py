import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from irsgnn.channel import ChannelSet
from irsgnn.rates import (Solution, effective_channel, gamma_vectors, user_rate, user_rate_real, user_rates,
                          user_rates_real, utility, utility_torch)


def cplx(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def unit(rng, n):
    return np.exp(1j * rng.uniform(-np.pi, np.pi, n))


def parts(*arrays):
    out = []
    for a in arrays:
        out += [a.real, a.imag]
    return out


def test_effective_channel_examples():
    rng = np.random.default_rng(0)
    h_d, G, h_r = cplx(rng, 4), cplx(rng, 4, 6), cplx(rng, 6)
    assert np.allclose(effective_channel(h_d, np.zeros((4, 6)), unit(rng, 6)), h_d)
    assert np.allclose(effective_channel(h_d, G * h_r, np.ones(6)), h_d + G @ h_r)
    v = unit(rng, 6)
    brute = np.array([h_d[m] + sum(G[m, n] * h_r[n] * v[n] for n in range(6)) for m in range(4)])
    assert np.max(np.abs(effective_channel(h_d, G * h_r, v) - brute)) < 1e-12


def test_effective_channel_batched_v():
    rng = np.random.default_rng(1)
    h_d, A, v = cplx(rng, 5, 2, 3), cplx(rng, 5, 2, 3, 4), unit(rng, 20).reshape(5, 4)
    g = effective_channel(h_d, A, v)
    for b in range(5):
        assert np.allclose(g[b], effective_channel(h_d[b], A[b], v[b]))


def test_rate_unit_example():
    ch = ChannelSet.from_combined(np.ones((1, 1, 1), dtype=complex))
    sol = Solution(W=np.ones((1, 1), dtype=complex), v=np.zeros(0, dtype=complex))
    assert user_rate(ch, sol, 1.0, 0) == pytest.approx(1.0)
    z = np.zeros
    assert user_rate_real(1.0 * np.ones((1, 1)), z((1, 1)), z((1, 1, 0)), z((1, 1, 0)), z(0), z(0),
                          np.ones((1, 1)), z((1, 1)), 1.0, 0) == pytest.approx(1.0)


def test_rate_zero_when_orthogonal():
    h_d = np.array([[1.0, 0.0]], dtype=complex)
    W = np.array([[0.0], [1.0]], dtype=complex)
    assert user_rates(h_d, np.zeros((1, 2, 0)), np.zeros(0), W, 1.0)[0] == 0.0


def test_real_rate_zero_channel():
    z = np.zeros
    r = user_rates_real(z((2, 3)), z((2, 3)), np.ones((2, 3, 4)), z((2, 3, 4)), z(4), z(4),
                        np.ones((3, 2)), z((3, 2)), 1.0)
    assert torch.all(r == 0)


def test_real_and_complex_rates_agree():
    rng = np.random.default_rng(2)
    B, K, M, N = 200, 3, 4, 5
    h_d, A, v, W = cplx(rng, B, K, M), cplx(rng, B, K, M, N), unit(rng, B * N).reshape(B, N), cplx(rng, B, M, K)
    ref = user_rates(h_d, A, v, W, 0.7)
    got = user_rates_real(*parts(h_d, A, v, W), 0.7).numpy()
    assert np.max(np.abs(got - ref) / np.abs(ref)) < 1e-10


def test_gamma_modulus_identity():
    rng = np.random.default_rng(3)
    h_d, A, v, w = cplx(rng, 4), cplx(rng, 4, 6), unit(rng, 6), cplx(rng, 4)
    gam = gamma_vectors(*parts(h_d, A, v, w))
    assert abs(np.linalg.norm(gam) - abs(effective_channel(h_d, A, v) @ w)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-np.pi, np.pi))
def test_common_phase_rotation(seed, phi):
    rng = np.random.default_rng(seed)
    h_d, A, v, W = cplx(rng, 3, 4), cplx(rng, 3, 4, 5), unit(rng, 5), cplx(rng, 4, 3)
    r0 = user_rates(h_d, A, v, W, 1.0)
    r1 = user_rates(h_d, A, v, W * np.exp(1j * phi), 1.0)
    assert np.max(np.abs(r0 - r1)) < 1e-10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.01, 1.0))
def test_power_scaling_without_interference(seed, c):
    rng = np.random.default_rng(seed)
    h_d, v = cplx(rng, 1, 3), np.zeros(0)
    W = cplx(rng, 3, 1)
    A = np.zeros((1, 3, 0))
    assert user_rates(h_d, A, v, c * W, 0.5).sum() <= user_rates(h_d, A, v, W, 0.5).sum() + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_utilities_permutation_invariant(rates, rnd):
    perm = list(rates)
    rnd.shuffle(perm)
    for kind in ("sum", "min"):
        assert utility(np.array(perm), kind) == pytest.approx(utility(np.array(rates), kind))


def test_utility_examples():
    r = np.array([1.0, 2.0, 3.0])
    assert utility(r, "sum") == 6.0
    assert utility(r, "min") == 1.0
    assert utility(np.array([0.7]), "sum") == utility(np.array([0.7]), "min") == 0.7
    assert float(utility_torch(torch.tensor(r), "min")) == 1.0
    with pytest.raises(ValueError):
        utility(np.array([]), "sum")
    with pytest.raises(ValueError):
        utility(r, "mean")


def test_solution_feasibility():
    sol = Solution(W=np.ones((2, 2)) / 2, v=np.exp(1j * np.arange(3)))
    assert sol.power() == pytest.approx(1.0)
    assert sol.is_feasible(1.0) and not sol.is_feasible(0.5)
