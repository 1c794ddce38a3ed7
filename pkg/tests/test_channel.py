import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irsgnn.channel import (ChannelSet, Placement, angles_between, array_response_bs, array_response_irs,
                            cascaded_steering, db_to_amplitude, direction_from_angles, irs_element_indices,
                            link_geometry, pathloss_direct_db, pathloss_irs_db, rician_weights,
                            sample_channel_batch, sample_channels, sample_placement, steering_bs, steering_irs)
from irsgnn.config import desk_system, paper_system

angles = st.floats(-np.pi / 2, np.pi / 2, allow_nan=False)


@pytest.mark.parametrize("d, expected", [(1, 32.6), (10, 69.3), (100, 106.0)])
def test_pathloss_direct(d, expected):
    assert pathloss_direct_db(d) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("d, expected", [(1, 30.0), (10, 52.0)])
def test_pathloss_irs(d, expected):
    assert pathloss_irs_db(d) == pytest.approx(expected, abs=1e-9)


def test_pathloss_bs_irs_distance():
    # 30 + 22 * 2.150510 (log10 of 141.42 by hand)
    assert pathloss_irs_db(141.42) == pytest.approx(77.3112, abs=1e-3)
    assert pathloss_irs_db(np.hypot(100, 100)) == pytest.approx(77.3112, abs=1e-3)


@pytest.mark.parametrize("fn", [pathloss_direct_db, pathloss_irs_db])
@pytest.mark.parametrize("d", [0.0, -1.0])
def test_pathloss_domain(fn, d):
    with pytest.raises(ValueError):
        fn(d)


def test_amplitude_squares_to_power_gain():
    assert db_to_amplitude(20.0) ** 2 == pytest.approx(1e-2)


def test_angles_reference_geometry():
    az, el = angles_between((100, -100, 0), (0, 0, 0))
    assert az == pytest.approx(2.356, abs=5e-4)
    assert el == pytest.approx(0.0, abs=1e-12)
    az, el = angles_between((0, 0, 0), (30, 20, -20))
    assert az == pytest.approx(0.588, abs=5e-4)
    assert el == pytest.approx(-0.506, abs=5e-4)
    az, el = angles_between((0, 0, 0), (5, 0, -20))
    assert az == pytest.approx(0.0, abs=1e-12)
    # asin(-20/sqrt(425)); the stated -0.980 is not reproduced by this geometry
    assert el == pytest.approx(-1.3258, abs=5e-4)


def test_angles_coincident_points():
    with pytest.raises(ValueError):
        angles_between((1, 2, 3), (1, 2, 3))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3).filter(lambda p: np.linalg.norm(p) > 1e-3))
def test_angles_round_trip(p):
    az, el = angles_between((0, 0, 0), p)
    u = direction_from_angles(az, el)
    assert np.allclose(u, np.asarray(p) / np.linalg.norm(p), atol=1e-10)


def test_steering_irs_examples():
    assert np.allclose(steering_irs(0.0, 0.0, 10, 10), np.ones(100))
    assert np.allclose(steering_irs(np.pi / 2, 0.0, 1, 2), [1, -1])


def test_irs_indexing_row_major():
    i1, i2 = irs_element_indices(10, 10)
    assert (i1[:12] == [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1]).all()
    assert (i2[:12] == [0] * 10 + [1, 1]).all()


def test_steering_bs_examples():
    assert np.allclose(steering_bs(np.pi / 2, 0.0, 4), np.ones(4))
    assert np.allclose(steering_bs(0.0, 0.0, 2), [1, -1])


@settings(max_examples=100, deadline=None)
@given(angles, angles)
def test_steering_unit_modulus(az, el):
    assert np.allclose(np.abs(steering_irs(az, el, 4, 5)), 1.0, atol=1e-12)
    assert np.allclose(np.abs(steering_bs(az, el, 8)), 1.0, atol=1e-12)


def test_array_response_irs_matched():
    a = cascaded_steering(0.3, -0.2, 0.588, -0.506, 10, 10)
    assert array_response_irs(np.conj(a), 0.3, -0.2, 0.588, -0.506, 10, 10) == pytest.approx(100.0)
    assert array_response_irs(np.ones(100), 0.3, -0.2, 0.3, -0.2, 10, 10) == pytest.approx(100.0)


def test_array_response_irs_brute_force_and_phase_invariance():
    rng = np.random.default_rng(0)
    v = np.exp(1j * rng.uniform(-np.pi, np.pi, 20))
    az2, el2, az3, el3 = rng.uniform(-1.5, 1.5, 4)
    a2, a3 = steering_irs(az2, el2, 4, 5), steering_irs(az3, el3, 4, 5)
    brute = abs(sum(np.conj(a2[n]) * v[n] * a3[n] for n in range(20)))
    got = array_response_irs(v, az2, el2, az3, el3, 4, 5)
    assert got == pytest.approx(brute, abs=1e-10)
    rotated = array_response_irs(v * np.exp(0.7j), az2, el2, az3, el3, 4, 5)
    assert abs(rotated - got) < 1e-10


def test_array_response_irs_rejects_non_unit_modulus():
    with pytest.raises(ValueError):
        array_response_irs(2 * np.ones(4), 0, 0, 0, 0, 2, 2)


def test_array_response_bs():
    a = steering_bs(2.356, 0.0, 8)
    assert array_response_bs(np.conj(a), 2.356, 0.0) == pytest.approx(8.0)
    # a vector orthogonal to conj(a) under the transpose inner product
    w = np.conj(steering_bs(0.0, 0.0, 8))
    w_perp = w - (a @ w) / 8 * np.conj(a)
    assert array_response_bs(w_perp, 2.356, 0.0) == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(1)
    w = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    phase = np.pi * np.arange(8) * np.cos(0.4) * np.cos(0.1)
    brute = abs(sum(np.exp(1j * phase[m]) * w[m] for m in range(8)))
    assert array_response_bs(w, 0.4, 0.1) == pytest.approx(brute, abs=1e-10)


def test_rician_weights():
    assert rician_weights(10.0) == pytest.approx((np.sqrt(10 / 11), np.sqrt(1 / 11)))
    assert rician_weights(np.inf) == (1.0, 0.0)
    assert rician_weights(0.0) == (0.0, 1.0)


def test_placement_inside_region():
    cfg = paper_system()
    loc = sample_placement(cfg, np.random.default_rng(0), 1000)
    assert loc.shape == (1000, 3, 3)
    assert cfg.user_region.contains(loc)


def test_channel_structure():
    cfg = desk_system()
    rng = np.random.default_rng(2)
    ch = sample_channels(cfg, Placement(sample_placement(cfg, rng)), rng)
    for k in range(cfg.K):
        assert np.array_equal(ch.A[k], ch.G * ch.h_r[k][None, :])
        assert np.allclose(ch.A[k], ch.G @ np.diag(ch.h_r[k]), rtol=1e-14, atol=0)
        assert np.array_equal(ch.F[k][:, 0], ch.h_d[k])
        assert np.array_equal(ch.F[k][:, 1:], ch.A[k])


def test_channel_los_limit():
    cfg = desk_system(rician_factor=np.inf)
    rng = np.random.default_rng(3)
    loc = sample_placement(cfg, rng, 4)
    ch = sample_channel_batch(cfg, loc, rng)
    geo = link_geometry(cfg, loc)
    assert np.allclose(ch.h_r / geo.beta_irs_user[..., None], geo.a_irs_user, atol=1e-12)
    assert np.allclose(ch.G / geo.beta_bs_irs, geo.g_los, atol=1e-12)


def test_channel_nlos_unit_variance():
    cfg = desk_system(rician_factor=0.0)
    rng = np.random.default_rng(4)
    loc = np.broadcast_to(np.array([[20.0, 0.0, -20.0], [10.0, 5.0, -20.0]]), (6250, 2, 3))
    ch = sample_channel_batch(cfg, loc, rng)
    geo = link_geometry(cfg, loc[0])
    hr = ch.h_r / geo.beta_irs_user[:, None]       # 6250*2*16 = 2e5 entries
    hd = ch.h_d / geo.beta_direct[:, None]
    assert np.mean(np.abs(hr) ** 2) == pytest.approx(1.0, rel=0.02)
    assert np.mean(np.abs(hd) ** 2) == pytest.approx(1.0, rel=0.02)


def test_channel_determinism():
    cfg = desk_system()
    a = sample_channel_batch(cfg, sample_placement(cfg, np.random.default_rng(5), 3), np.random.default_rng(6))
    b = sample_channel_batch(cfg, sample_placement(cfg, np.random.default_rng(5), 3), np.random.default_rng(6))
    assert np.array_equal(a.F, b.F)


def test_channelset_indexing_and_user_selection():
    cfg = desk_system()
    rng = np.random.default_rng(7)
    ch = sample_channel_batch(cfg, sample_placement(cfg, rng, 5), rng)
    assert len(ch) == 5 and ch.batched
    one = ch[2]
    assert not one.batched and np.array_equal(one.F, ch.F[2])
    swapped = one.select_users([1, 0])
    assert np.array_equal(swapped.h_d, one.h_d[::-1])
    est = ChannelSet.from_combined(one.F)
    assert est.G is None and np.array_equal(est.A, one.A)
