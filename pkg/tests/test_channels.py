import json
import struct
from collections import Counter

import numpy as np
import pytest

from beamkit.channels import (DatasetSpec, FormatError, attach_labels, crc64, decode, encode, generate, load,
                              mean_pathloss_gain, save)
from beamkit.errors import CapacityError, InvalidInputError


def spec(**kw):
    base = dict(n_antennas=4, k_users_list=(3,), gamma=0.5, xi=0.5, count=20, seed=11)
    base.update(kw)
    return DatasetSpec(**base)


def same(a, b):
    return a.spec == b.spec and all(np.array_equal(x.h, y.h) for x, y in zip(a.samples, b.samples))


def test_generation_is_deterministic():
    assert same(generate(spec()), generate(spec()))
    assert not same(generate(spec()), generate(spec(seed=12)))


def test_sample_depends_only_on_index():
    small = generate(spec(count=5))
    big = generate(spec(count=20))
    assert all(np.array_equal(small.samples[i].h, big.samples[i].h) for i in range(5))


def test_gamma_normalization_statistic():
    n_t, gamma = 8, 0.5
    ds = generate(spec(n_antennas=n_t, k_users_list=(4,), gamma=gamma, count=1000, seed=5))
    norms2 = np.concatenate([np.sum(np.abs(s.h) ** 2, axis=1) for s in ds.samples])
    # unit average gain per antenna
    assert np.mean(norms2) / n_t == pytest.approx(1.0, rel=0.02)
    assert gamma * n_t / np.mean(norms2) == pytest.approx(gamma, rel=0.1)
    # ||h||^2 ~ Gamma(N_T, 1), so E[N_T / ||h||^2] = N_T / (N_T - 1), not 1
    ratio = np.mean(gamma * n_t / norms2)
    assert ratio == pytest.approx(gamma * n_t / (n_t - 1), rel=0.1)


def test_pathloss_mode_keeps_unit_mean_gain():
    ds = generate(spec(n_antennas=8, k_users_list=(4,), count=4000, seed=9, fading="pathloss"))
    norms2 = np.concatenate([np.sum(np.abs(s.h) ** 2, axis=1) for s in ds.samples])
    assert np.mean(norms2) / 8 == pytest.approx(1.0, rel=0.15)
    # closed-form population mean against a Monte-Carlo estimate
    d = np.random.default_rng(0).uniform(0.05, 0.3, 400_000)
    mc = np.mean(10.0 ** (-(140.7 + 36.7 * np.log10(d)) / 10.0))
    assert mean_pathloss_gain() == pytest.approx(mc, rel=0.02)


def test_various_k_coverage():
    ds = generate(spec(k_users_list=(3, 4, 5), count=300, seed=21))
    counts = Counter(s.k_users for s in ds.samples)
    assert set(counts) == {3, 4, 5} and min(counts.values()) >= 50


def test_circular_symmetry_and_independence():
    ds = generate(spec(n_antennas=4, k_users_list=(2,), count=2000, seed=3))
    h = np.stack([s.h for s in ds.samples])
    rotated = h * np.exp(1j * 1.234)
    np.testing.assert_allclose(np.mean(np.abs(rotated) ** 2, axis=(0, 2)), np.mean(np.abs(h) ** 2, axis=(0, 2)))
    # pseudo-covariance E[h^2] vanishes for circular fading
    assert abs(np.mean(h ** 2)) < 0.05
    x = h[:-1, 0, 0]
    y = h[1:, 0, 0]
    corr = abs(np.mean(np.conj(x) * y)) / np.sqrt(np.mean(abs(x) ** 2) * np.mean(abs(y) ** 2))
    assert corr < 0.05


def test_spec_validation_and_capacity():
    for bad in (dict(gamma=0.0), dict(count=0), dict(k_users_list=()), dict(kind="VAL"), dict(fading="x")):
        with pytest.raises(InvalidInputError):
            spec(**bad)
    with pytest.raises(CapacityError):
        generate(spec(n_antennas=1 << 14, k_users_list=(1 << 8,), count=1 << 8))


def test_round_trip(tmp_path):
    ds = attach_labels(generate(spec(k_users_list=(2, 3), count=30)), np.linspace(1, 2, 30))
    path = tmp_path / "d.bfds"
    manifest = save(ds, path)
    back = load(path)
    assert same(ds, back)
    assert np.array_equal(back.labels, ds.labels)
    assert manifest["checksum"]["value"] == crc64(path.read_bytes())
    assert DatasetSpec.from_dict(json.loads((tmp_path / "d.bfds.json").read_text())["spec"]) == ds.spec
    buf = path.read_bytes()
    assert struct.unpack("<I", buf[20:24])[0] == 3  # labels and various-K bits


def test_byte_layout():
    ds = generate(spec(count=2, k_users_list=(1,), n_antennas=2))
    buf = encode(ds)
    assert buf[:4] == b"BFDS"
    assert struct.unpack("<IIQI", buf[4:24]) == (1, 2, 2, 0)
    assert struct.unpack("<I", buf[24:28]) == (1,)
    re, im = struct.unpack("<dd", buf[28:44])
    assert complex(re, im) == ds.samples[0].h[0, 0]
    assert len(buf) == 24 + 2 * (4 + 2 * 16)


def test_truncation_and_corruption(tmp_path):
    ds = generate(spec())
    path = tmp_path / "d.bfds"
    save(ds, path)
    good = path.read_bytes()
    path.write_bytes(good[:-1])
    with pytest.raises(FormatError) as info:
        load(path)
    assert "byte offset" in str(info.value) and info.value.offset is not None
    with pytest.raises(FormatError):
        decode(b"XXXX" + good[4:])
    with pytest.raises(FormatError):
        decode(good[:4] + struct.pack("<I", 2) + good[8:])
    with pytest.raises(FormatError):
        decode(good + b"\0")
    flipped = bytearray(good)
    flipped[100] ^= 1
    path.write_bytes(bytes(flipped))
    with pytest.raises(FormatError):
        load(path)


def test_attach_labels_policy(tmp_path):
    ds = generate(spec(kind="TRAIN"))
    with pytest.raises(InvalidInputError):
        attach_labels(ds, np.ones(3))
    labeled = attach_labels(ds, np.arange(20.0))
    assert labeled.manifest()["labels_on_train_set"] is True
    save(labeled, tmp_path / "t.bfds")
    back = load(tmp_path / "t.bfds")
    assert back.meta["labels_on_train_set"] and np.array_equal(back.labels, np.arange(20.0))
    assert "labels_on_train_set" not in attach_labels(generate(spec(kind="TEST")), np.ones(20)).manifest()
