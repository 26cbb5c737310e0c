import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamkit import autodiff as ad
from beamkit.autodiff import Tensor
from beamkit.core import ChannelSet, SystemConfig, check_feasibility
from beamkit.errors import CheckpointError, ConfigError, ShapeError
from beamkit.gnn import (ArchSpec, Batch, GnnModel, GnnParams, SchemeOutcome, alpha_activation, cfcl_forward,
                         cgal_forward, full_forward, head_decode, load_params, loss, mlp_forward, power_activation,
                         save_params, select_scheme)
from beamkit.precoders import hzm_direction, mmse_directions

from conftest import naive_cgal, random_channels


def sample_batch(rng, b, k, n, noise=0.5, xi=0.5):
    chans = [random_channels(rng, k, n) for _ in range(b)]
    return Batch.from_samples(chans, [SystemConfig.uniform(k, noise, xi)] * b), chans


# architecture ---------------------------------------------------------------------

def test_arch_validation():
    ArchSpec.desk(8)
    full = ArchSpec.full(64)
    assert full.cgal == [(64, 64, 20), (1280, 512, 20)] and full.cfcl == [10240, 512, 128]
    with pytest.raises(ConfigError):
        ArchSpec(8, [(8, 16, 4), (60, 32, 4)], [128, 64])
    with pytest.raises(ConfigError):
        ArchSpec(8, [(8, 16, 4)], [32, 10])
    with pytest.raises(ConfigError):
        ArchSpec(8, [(8, 16, 4)], [64], schemes=("ZF",))
    with pytest.raises(ConfigError):
        ArchSpec(8, [(8, 16, 4)], [64], sigmoid_sign="other")
    with pytest.raises(ConfigError):
        ArchSpec(8, [], [30, 8], kind="mlp", k_users=4)  # input must be K * N_T = 32
    spec = ArchSpec.toy(4, residual=True)
    assert ArchSpec.from_dict(spec.to_dict()) == spec


def test_param_shapes_follow_arch():
    arch = ArchSpec.desk(8)
    params = GnnParams.init(arch, 0)
    assert params["cgal0.ws"].shape == (4, 16, 8)
    assert params["cgal1.a"].shape == (4, 32)
    assert params["mmse.cfcl0.w"].shape == (64, 128) and not params["mmse.cfcl0.w"].is_complex
    assert params["mmse.out.w"].shape == (1, 32) and params["hzm.out.w"].shape == (2, 32)
    assert params["hzm.cfcl1.w"].shape == (32, 64)
    assert all(np.all(np.isfinite(p.data)) for p in params.parameters())


def test_complex_glorot_variance():
    arch = ArchSpec(40, [(40, 60, 1)], [60, 4], schemes=("MMSE",))
    w = GnnParams.init(arch, 1)["cgal0.ws"].data
    assert np.var(w.real) == pytest.approx(1.0 / 100, rel=0.1)
    assert np.mean(np.abs(w) ** 2) == pytest.approx(2.0 / 100, rel=0.1)


# attention layer --------------------------------------------------------------------

def toy_params(seed, **kw):
    return GnnParams.init(ArchSpec.toy(4, **kw), seed)


def test_cgal_identical_nodes_uniform_attention(rng):
    params = toy_params(0)
    h = np.tile(random_channels(rng, 1, 4).h, (3, 1))[None]
    _, attn = cgal_forward(0, Tensor(h), params, return_attention=True)
    np.testing.assert_allclose(attn.data, 1.0 / 3, atol=1e-15)


def test_cgal_single_node(rng):
    params = toy_params(1, cgal_crelu=False)
    h = random_channels(rng, 1, 4).h[None]
    out, attn = cgal_forward(0, Tensor(h), params, return_attention=True)
    assert np.all(attn.data == 1.0)
    wm = params["cgal0.wm"].data
    np.testing.assert_allclose(out.data[0, 0], np.concatenate([wm[d] @ h[0, 0] for d in range(2)]), atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_cgal_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    params = toy_params(seed)
    x = random_channels(rng, 3, 4).h
    out, attn = cgal_forward(0, Tensor(x[None]), params, return_attention=True)
    p = {n: params[f"cgal0.{n}"].data for n in ("ws", "wn", "wm", "a")}
    ref, gammas = naive_cgal(x, p["ws"], p["wn"], p["wm"], p["a"])
    np.testing.assert_allclose(out.data[0], ref, atol=1e-12)
    np.testing.assert_allclose(attn.data[0], gammas, atol=1e-12)


def test_cgal_rejects_wrong_width(rng):
    with pytest.raises(ShapeError):
        cgal_forward(1, Tensor(random_channels(rng, 3, 4).h[None]), toy_params(0))


def test_cgal_residual_path(rng):
    params = toy_params(2, residual=True, cgal_crelu=False)
    x = random_channels(rng, 3, 4).h
    out = cgal_forward(0, Tensor(x[None]), params).data[0]
    p = {n: params[f"cgal0.{n}"].data for n in ("ws", "wn", "wm", "a")}
    ref, _ = naive_cgal(x, p["ws"], p["wn"], p["wm"], p["a"], crelu=False)
    np.testing.assert_allclose(out, ref + x @ params["cgal0.res"].data.T, atol=1e-12)


# complex FC layer, heads, activations -----------------------------------------------------

def test_cfcl_identities(rng):
    x = rng.standard_normal((2, 3, 4))
    y = cfcl_forward(None, Tensor(x), None, weight=np.eye(4)).data
    np.testing.assert_allclose(y, np.maximum(x, 0) * (1 + 1j))
    assert np.all(cfcl_forward(None, Tensor(x + 0j), None, weight=np.zeros((5, 4))).data == 0)
    z = rng.standard_normal((2, 3, 4)) + 1j * rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((5, 4))
    split = w @ (z.real - z.imag)[..., None] + 1j * (w @ (z.imag + z.real)[..., None])
    split = split[..., 0]
    ref = np.maximum(split.real, 0) + 1j * np.maximum(split.imag, 0)
    np.testing.assert_allclose(cfcl_forward(None, Tensor(z), None, weight=w).data, ref, atol=1e-12)
    with pytest.raises(ShapeError):
        cfcl_forward(None, Tensor(z), None, weight=np.ones((5, 3)))


def test_head_decode_abs_real(rng):
    feats = rng.standard_normal((1, 2, 3)) + 1j * rng.standard_normal((1, 2, 3))
    w = rng.standard_normal((2, 3))
    out = head_decode(Tensor(feats), w).data
    np.testing.assert_allclose(out, np.abs(((1 + 1j) * feats @ w.T).real))
    w1 = np.array([[1.0]])
    assert head_decode(Tensor(np.array([[[-0.2 + 0.3j]]])), w1).data[0, 0, 0] == pytest.approx(0.5)
    assert head_decode(Tensor(np.array([[[0.0 + 0.0j]]])), w1).data[0, 0, 0] == 0.0


def test_power_activation_cases():
    np.testing.assert_allclose(power_activation(np.array([[0.2, 0.3]]), 1.0).data, [[0.2, 0.3]])
    np.testing.assert_allclose(power_activation(np.array([[0.6, 0.6]]), 1.0).data, [[0.5, 0.5]])
    np.testing.assert_array_equal(power_activation(np.zeros((1, 3)), 1.0).data, np.zeros((1, 3)))
    per_sample = power_activation(np.array([[0.6, 0.6], [0.6, 0.6]]), np.array([1.0, 2.0])).data
    np.testing.assert_allclose(per_sample, [[0.5, 0.5], [0.6, 0.6]])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=1, max_size=8), st.floats(1e-3, 100))
def test_power_budget_property(raw, p_max):
    p = power_activation(np.array([raw]), p_max).data
    assert p.sum() <= p_max + 1e-9
    assert np.all(p >= 0)


def test_alpha_activation_decreasing_and_standard():
    a = alpha_activation(np.array([0.0, 1.0, 40.0, -40.0])).data
    np.testing.assert_allclose(a[:2], [0.5, 1.0 / (1.0 + math.e)], rtol=1e-14)
    assert a[2] < 1e-15 and a[3] > 1 - 1e-15
    assert alpha_activation(np.array([1.0]), "standard").data[0] == pytest.approx(1.0 / (1.0 + math.exp(-1.0)))


# scheme selection ---------------------------------------------------------------------

def test_select_scheme_rules():
    m = lambda ee, ok: SchemeOutcome("MMSE", ee, ok)
    h = lambda ee, ok: SchemeOutcome("HZM", ee, ok)
    assert select_scheme(m(1.0, True), h(5.0, False)) == ("MMSE", True)
    assert select_scheme(m(2.0, True), h(2.1, True)) == ("HZM", True)
    assert select_scheme(m(2.0, True), h(2.0 + 1e-13, True)) == ("MMSE", True)
    assert select_scheme(m(2.0, False), h(1.0, False)) == ("MMSE", False)
    assert select_scheme(m(1.0, False), h(2.0, False)) == ("HZM", False)
    assert select_scheme(None, h(1.0, False)) == ("HZM", False)
    with pytest.raises(ConfigError):
        select_scheme(None, None)


# full forward -----------------------------------------------------------------------------

def test_forward_output_contract(rng):
    params = GnnParams.init(ArchSpec.desk(8), 3)
    ch = random_channels(rng, 4, 8)
    cfg = SystemConfig.uniform(4, 0.5, 0.5)
    out = full_forward(ch, cfg, params)
    assert out.selected in ("MMSE", "HZM")
    assert out.powers["MMSE"].sum() <= 1 + 1e-9 and out.powers["HZM"].sum() <= 1 + 1e-9
    assert np.all((out.alphas > 0) & (out.alphas <= 0.5))  # decreasing sigmoid of a nonnegative input
    mm = mmse_directions(ch, cfg).dirs
    np.testing.assert_allclose(out.solutions["MMSE"].w, np.sqrt(out.powers["MMSE"])[:, None] * mm, atol=1e-12)
    hz = hzm_direction(ch, out.alphas).dirs
    np.testing.assert_allclose(out.solutions["HZM"].w, np.sqrt(out.powers["HZM"])[:, None] * hz, atol=1e-12)
    for name in ("MMSE", "HZM"):
        ref = check_feasibility(ch, out.solutions[name], cfg)
        assert out.reports[name].ee == pytest.approx(ref.ee, rel=1e-12)
    assert full_forward(ch, cfg, params, "mmse").selected == "MMSE"
    assert full_forward(ch, cfg, params, "hzm").selected == "HZM"


def test_branch_metrics_match_core(rng):
    params = GnnParams.init(ArchSpec.toy(4), 5)
    batch, chans = sample_batch(rng, 6, 3, 4)
    branches = GnnModel(params).branches(batch, ("MMSE", "HZM"))
    for name, br in branches.items():
        for b, ch in enumerate(chans):
            w = np.sqrt(br.powers.data[b])[:, None] * br.dirs[b]
            rep = check_feasibility(ch, w, SystemConfig.uniform(3, 0.5, 0.5))
            np.testing.assert_allclose(br.rates.data[b], rep.rates, rtol=1e-12)
            assert br.ee.data[b] == pytest.approx(rep.ee, rel=1e-12)


def test_single_user_and_other_k(rng):
    params = GnnParams.init(ArchSpec.desk(8), 4)
    out = full_forward(random_channels(rng, 1, 8), SystemConfig.uniform(1, 0.5, 0.5), params)
    assert out.powers[out.selected][0] <= 1.0
    for k in (3, 5, 6):
        out = full_forward(random_channels(rng, k, 8), SystemConfig.uniform(k, 0.5, 0.5), params)
        assert out.powers["MMSE"].shape == (k,)
    with pytest.raises(ShapeError):
        full_forward(random_channels(rng, 3, 6), SystemConfig.uniform(3, 0.5, 0.5), params)


def test_permutation_equivariance(rng):
    params = GnnParams.init(ArchSpec.desk(8), 6)
    ch = random_channels(rng, 4, 8)
    cfg = SystemConfig.uniform(4, 0.5, 0.5)
    perm = rng.permutation(4)
    a = full_forward(ch, cfg, params)
    b = full_forward(ChannelSet(ch.h[perm]), cfg.permuted(perm), params)
    for name in ("MMSE", "HZM"):
        np.testing.assert_allclose(b.powers[name], a.powers[name][perm], atol=1e-12)
        assert b.reports[name].ee == pytest.approx(a.reports[name].ee, abs=1e-9)
    np.testing.assert_allclose(b.alphas, a.alphas[perm], atol=1e-12)
    assert a.selected == b.selected


def test_forward_is_deterministic(rng):
    params = GnnParams.init(ArchSpec.toy(4), 9)
    ch = random_channels(rng, 3, 4)
    cfg = SystemConfig.uniform(3, 0.5, 0.5)
    a, b = full_forward(ch, cfg, params), full_forward(ch, cfg, params)
    assert np.array_equal(a.solutions["HZM"].w, b.solutions["HZM"].w)


# MLP variant --------------------------------------------------------------------------------

def test_mlp_variant(rng):
    params = GnnParams.init(ArchSpec.mlp(3, 4, (16, 8)), 0)
    cfg = SystemConfig.uniform(3, 0.5, 0.5)
    out = mlp_forward(random_channels(rng, 3, 4), cfg, params)
    assert out.powers["MMSE"].shape == (3,)
    with pytest.raises(ShapeError):
        mlp_forward(random_channels(rng, 4, 4), SystemConfig.uniform(4, 0.5, 0.5), params)
    with pytest.raises(ConfigError):
        full_forward(random_channels(rng, 3, 4), cfg, params)
    for p in params.parameters():
        if p.name.endswith(".w"):
            p.data = np.zeros_like(p.data)
    out = mlp_forward(random_channels(rng, 3, 4), cfg, params)
    assert np.all(out.powers["MMSE"] == 0) and out.reports["MMSE"].ee == 0.0


# training path ------------------------------------------------------------------------------

@pytest.mark.parametrize("scheme", ["MMSE", "HZM"])
def test_loss_gradcheck_single_scheme(scheme):
    rng = np.random.default_rng(11)
    params = GnnParams.init(ArchSpec.toy(4, schemes=(scheme,)), 11)
    batch, _ = sample_batch(rng, 4, 3, 4)
    errs = ad.gradcheck(lambda: loss(batch, params, 10.0, scheme), params.parameters())
    assert max(errs.values()) < 1e-4


def test_batch_norm_statistics(rng):
    params = GnnParams.init(ArchSpec.toy(4, schemes=("MMSE",)), 0)
    batch, _ = sample_batch(rng, 8, 3, 4)
    model = GnnModel(params)
    before = params.running["mmse.cfcl0.re_mean"].copy()
    with ad.Tape():
        model.loss(batch, 10.0, ("MMSE",), training=True)
    assert not np.array_equal(before, params.running["mmse.cfcl0.re_mean"])
    snapshot = {k: v.copy() for k, v in params.running.items()}
    model.loss(batch, 10.0, ("MMSE",), training=False)
    assert all(np.array_equal(snapshot[k], params.running[k]) for k in snapshot)


def test_mixed_k_batch_rejected(rng):
    chans = [random_channels(rng, 3, 4), random_channels(rng, 2, 4)]
    with pytest.raises(ShapeError):
        Batch.from_samples(chans, [SystemConfig.uniform(3, 0.5, 0.5), SystemConfig.uniform(2, 0.5, 0.5)])


# checkpoints ---------------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    params = GnnParams.init(ArchSpec.toy(4, residual=True), 3)
    params.running["mmse.cfcl0.re_mean"] += 0.25
    path = tmp_path / "m.npz"
    save_params(params, path, {"epochs": 3})
    back, meta = load_params(path)
    assert meta == {"epochs": 3} and back.arch == params.arch
    for name, p in params.tensors.items():
        assert np.array_equal(p.data, back[name].data)
    for name, v in params.running.items():
        assert np.array_equal(v, back.running[name])
    ch = random_channels(rng, 3, 4)
    cfg = SystemConfig.uniform(3, 0.5, 0.5)
    a, b = full_forward(ch, cfg, params), full_forward(ch, cfg, back)
    assert np.array_equal(a.solutions["HZM"].w, b.solutions["HZM"].w)


def test_checkpoint_rejections(tmp_path):
    params = GnnParams.init(ArchSpec.toy(4), 0)
    path = tmp_path / "m.npz"
    save_params(params, path)
    with pytest.raises(CheckpointError):
        load_params(path, ArchSpec.toy(4, residual=True))
    data = path.read_bytes()
    (tmp_path / "cut.npz").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "cut.npz")
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "missing.npz")
