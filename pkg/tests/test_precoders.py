import numpy as np
import pytest

from beamkit.core import ChannelSet, SystemConfig, total_power
from beamkit.errors import DegenerateInputError, InvalidInputError, RankError
from beamkit.precoders import (batch_mmse_directions, batch_zf_mrt_directions, combine_hzm, hzm_direction,
                               mmse_directions, mrt_directions, recover_beams, zf_directions)

from conftest import random_channels, row_agreement


def explicit_mmse(h, noise):
    # V = G^H (G G^H + diag(sigma^2))^{-1} with G = [h_1^H; ...; h_K^H], columns v_k
    g = np.conj(h)
    v = g.conj().T @ np.linalg.inv(g @ g.conj().T + np.diag(noise))
    return (v / np.linalg.norm(v, axis=0)).T


def explicit_zf(h):
    g = np.conj(h)
    u = g.conj().T @ np.linalg.inv(g @ g.conj().T)
    return (u / np.linalg.norm(u, axis=0)).T


def test_unit_rows_all_schemes(rng):
    for _ in range(20):
        k = int(rng.integers(1, 5))
        ch = random_channels(rng, k, 6)
        cfg = SystemConfig.uniform(k, rng.uniform(0.1, 2.0), 0.0)
        for d in (mmse_directions(ch, cfg).dirs, zf_directions(ch).dirs, mrt_directions(ch).dirs,
                  hzm_direction(ch, rng.uniform(0, 1, k)).dirs):
            np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-10)


def test_mmse_matches_explicit_formula(rng):
    ch = random_channels(rng, 3, 5)
    noise = np.array([0.2, 0.5, 1.3])
    cfg = SystemConfig(1.0, 0.5, noise, np.zeros(3))
    assert row_agreement(mmse_directions(ch, cfg).dirs, explicit_mmse(ch.h, noise)).min() > 1 - 1e-12


def test_mmse_single_user_is_mrt(rng):
    ch = random_channels(rng, 1, 6)
    d = mmse_directions(ch, SystemConfig.uniform(1, 0.7, 0.0)).dirs
    np.testing.assert_allclose(d, ch.h / np.linalg.norm(ch.h), atol=1e-14)


def test_mmse_limits(rng):
    ch = random_channels(rng, 4, 4)
    while np.linalg.cond(ch.h) > 10:
        ch = random_channels(rng, 4, 4)
    low = mmse_directions(ch, SystemConfig.uniform(4, 1e-10, 0.0)).dirs
    high = mmse_directions(ch, SystemConfig.uniform(4, 1e6, 0.0)).dirs
    angle = lambda a, b: np.arccos(np.clip(row_agreement(a, b), 0, 1)).max()
    assert angle(low, zf_directions(ch).dirs) < 1e-3
    assert angle(high, mrt_directions(ch).dirs) < 1e-3


def test_zf_nulling_and_formula(rng):
    ch = random_channels(rng, 3, 8)
    d = zf_directions(ch).dirs
    cross = np.abs(np.conj(ch.h) @ d.T)
    off = cross[~np.eye(3, dtype=bool)]
    assert off.max() < 1e-8
    assert row_agreement(d, explicit_zf(ch.h)).min() > 1 - 1e-12


def test_zf_orthogonal_channels_equal_mrt():
    h = np.diag([2.0, 1j, 0.5]).astype(complex)
    ch = ChannelSet(h)
    np.testing.assert_allclose(row_agreement(zf_directions(ch).dirs, mrt_directions(ch).dirs), 1.0, atol=1e-14)


def test_zf_rank_errors(rng):
    with pytest.raises(RankError):
        zf_directions(random_channels(rng, 5, 4))
    h = random_channels(rng, 2, 4).h
    with pytest.raises(RankError):
        zf_directions(ChannelSet(np.vstack([h[0], h[0]])))


def test_mrt_cases(rng):
    np.testing.assert_allclose(mrt_directions(ChannelSet(np.array([[2.0, 0.0]]))).dirs, [[1.0, 0.0]])
    ch = random_channels(rng, 2, 3)
    phase = np.exp(1j * 0.7)
    np.testing.assert_allclose(mrt_directions(ChannelSet(ch.h * phase)).dirs, mrt_directions(ch).dirs * phase,
                               atol=1e-15)
    with pytest.raises(DegenerateInputError):
        mrt_directions(ChannelSet(np.array([[1.0, 0.0], [0.0, 0.0]])))


def test_hzm_endpoints_and_formula(rng):
    ch = random_channels(rng, 3, 6)
    zf, mrt = zf_directions(ch).dirs, mrt_directions(ch).dirs
    np.testing.assert_allclose(hzm_direction(ch, np.ones(3)).dirs, zf, atol=1e-14)
    np.testing.assert_allclose(hzm_direction(ch, np.zeros(3)).dirs, mrt, atol=1e-14)
    u = explicit_zf(ch.h)
    g = ch.h / np.linalg.norm(ch.h, axis=1, keepdims=True)
    mix = 0.5 * u + 0.5 * g
    oracle = mix / np.linalg.norm(mix, axis=1, keepdims=True)
    assert row_agreement(hzm_direction(ch, np.full(3, 0.5)).dirs, oracle).min() > 1 - 1e-12


def test_hzm_input_checks(rng):
    ch = random_channels(rng, 2, 4)
    with pytest.raises(InvalidInputError):
        hzm_direction(ch, np.array([0.5, 1.2]))
    with pytest.raises(InvalidInputError):
        hzm_direction(ch, np.array([0.5]))
    zf = np.array([[1.0, 0.0]])
    with pytest.raises(DegenerateInputError):
        combine_hzm(zf, -zf, np.array([0.5]))


def test_hzm_continuity(rng):
    ch = random_channels(rng, 3, 6)
    a = rng.uniform(0.1, 0.9, 3)
    d0 = hzm_direction(ch, a).dirs
    d1 = hzm_direction(ch, a + rng.uniform(-1e-6, 1e-6, 3)).dirs
    assert np.abs(d1 - d0).max() <= 1e-4


def test_recover_beams(rng):
    ch = random_channels(rng, 3, 4)
    dirs = mrt_directions(ch)
    assert np.all(recover_beams(dirs, np.zeros(3)).w == 0)
    sol = recover_beams(dirs, np.ones(3))
    np.testing.assert_allclose(np.linalg.norm(sol.w, axis=1), 1.0, atol=1e-12)
    p = rng.uniform(0, 0.4, 3)
    cfg = SystemConfig.uniform(3, 0.5, 0.0)
    sol = recover_beams(mmse_directions(ch, cfg), p)
    np.testing.assert_allclose(np.sum(np.abs(sol.w) ** 2, axis=1), p, atol=1e-12)
    assert total_power(sol, cfg) == pytest.approx(p.sum() + 0.5, abs=1e-12)
    assert sol.scheme == "MMSE"
    with pytest.raises(InvalidInputError):
        recover_beams(dirs, np.array([0.1, -0.1, 0.2]))


def test_permutation_equivariance(rng):
    ch = random_channels(rng, 4, 6)
    cfg = SystemConfig(1.0, 0.5, rng.uniform(0.2, 1.0, 4), np.zeros(4))
    perm = rng.permutation(4)
    chp = ChannelSet(ch.h[perm])
    a = rng.uniform(0, 1, 4)
    pairs = [
        (mmse_directions(ch, cfg).dirs, mmse_directions(chp, cfg.permuted(perm)).dirs),
        (zf_directions(ch).dirs, zf_directions(chp).dirs),
        (mrt_directions(ch).dirs, mrt_directions(chp).dirs),
        (hzm_direction(ch, a).dirs, hzm_direction(chp, a[perm]).dirs),
    ]
    for base, permuted in pairs:
        assert row_agreement(base[perm], permuted).min() > 1 - 1e-12


def test_batched_helpers_match(rng):
    hs = np.stack([random_channels(rng, 3, 5).h for _ in range(4)])
    noise = rng.uniform(0.1, 1.0, (4, 3))
    mm = batch_mmse_directions(hs, noise)
    zf, mrt = batch_zf_mrt_directions(hs)
    for b in range(4):
        ch = ChannelSet(hs[b])
        cfg = SystemConfig(1.0, 0.5, noise[b], np.zeros(3))
        np.testing.assert_allclose(mm[b], mmse_directions(ch, cfg).dirs, atol=1e-12)
        np.testing.assert_allclose(zf[b], zf_directions(ch).dirs, atol=1e-12)
        np.testing.assert_allclose(mrt[b], mrt_directions(ch).dirs, atol=1e-12)
