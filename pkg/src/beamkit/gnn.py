"""Model-based GNN: complex graph attention layers, complex FC layers, scheme heads.

Node ``k`` carries the channel ``h_k``.  The attention stack is shared by
both schemes; each scheme then has its own stack of complex fully connected
layers whose last layer decodes powers (MMSE) or powers and hybrid
coefficients (HZM).
Beams are rebuilt from the closed-form directions, so the network only ever
outputs ``K`` or ``2K`` reals.

Every forward function works on stacked samples of shape ``(B, K, ...)``
sharing one user count.  Layers are written against :mod:`beamkit.autodiff`
so the same code runs for inference (no tape) and training (tape active).
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .channels import atomic_write
from .core import BeamSolution, ChannelSet, PerfReport, SystemConfig, check_feasibility, RATE_TOL
from .errors import CheckpointError, ConfigError, ShapeError
from .precoders import batch_mmse_directions, batch_zf_mrt_directions

CHECKPOINT_VERSION = 1
HEAD_DIMS = {"MMSE": 1, "HZM": 2}
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
TIE_TOL = 1e-12


@dataclass
class ArchSpec:
    """Layer dimensions and switches.

    ``cgal`` lists ``(in_dim, out_dim_per_head, heads)``; ``cfcl`` lists the
    per-scheme CFCL widths starting at the CGAL output width (or ``K * N_T``
    for the MLP variant).  Each scheme ends with one more CFCL of width
    ``M_n`` and no activation.
    """

    n_antennas: int
    cgal: List[Tuple[int, int, int]] = field(default_factory=list)
    cfcl: List[int] = field(default_factory=list)
    schemes: Tuple[str, ...] = ("MMSE", "HZM")
    cgal_crelu: bool = True
    cfcl_bn: bool = True
    residual: bool = False
    leaky_slope: float = 0.01
    sigmoid_sign: str = "decreasing"
    kind: str = "gnn"
    k_users: Optional[int] = None

    def __post_init__(self):
        self.cgal = [tuple(int(v) for v in layer) for layer in self.cgal]
        self.cfcl = [int(v) for v in self.cfcl]
        self.schemes = tuple(self.schemes)
        self.validate()

    def validate(self):
        if self.kind not in ("gnn", "mlp"):
            raise ConfigError(f"unknown architecture kind {self.kind!r}")
        if not self.schemes or any(s not in HEAD_DIMS for s in self.schemes):
            raise ConfigError(f"schemes must be a subset of {tuple(HEAD_DIMS)}")
        if self.sigmoid_sign not in ("decreasing", "standard"):
            raise ConfigError("sigmoid_sign must be 'decreasing' or 'standard'")
        if not self.cfcl:
            raise ConfigError("the CFCL stack needs at least its input width")
        if self.kind == "gnn":
            if not self.cgal:
                raise ConfigError("a GNN needs at least one attention layer")
            prev = self.n_antennas
            for i, (din, dout, heads) in enumerate(self.cgal):
                if din != prev:
                    raise ConfigError(f"attention layer {i} expects width {din}, previous gives {prev}")
                if dout < 1 or heads < 1:
                    raise ConfigError("attention widths and head counts must be positive")
                prev = dout * heads
            if self.cfcl[0] != prev:
                raise ConfigError(f"CFCL input {self.cfcl[0]} != attention output {prev}")
        else:
            if self.cgal:
                raise ConfigError("the MLP variant has no attention layers")
            if not self.k_users:
                raise ConfigError("the MLP variant needs a fixed user count")
            if self.cfcl[0] != self.k_users * self.n_antennas:
                raise ConfigError(f"MLP input must be K*N_T = {self.k_users * self.n_antennas}")

    @property
    def feature_dim(self) -> int:
        return self.cfcl[-1]

    def head_dim(self, scheme: str) -> int:
        per_user = HEAD_DIMS[scheme]
        return per_user * self.k_users if self.kind == "mlp" else per_user

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cgal"] = [list(layer) for layer in self.cgal]
        d["schemes"] = list(self.schemes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        d["schemes"] = tuple(d["schemes"])
        return cls(**d)

    @classmethod
    def desk(cls, n_antennas: int, **kw) -> "ArchSpec":
        return cls(n_antennas, [(n_antennas, 16, 4), (64, 32, 4)], [128, 64, 32], **kw)

    @classmethod
    def full(cls, n_antennas: int = 64, **kw) -> "ArchSpec":
        return cls(n_antennas, [(n_antennas, 64, 20), (1280, 512, 20)], [10240, 512, 128], **kw)

    @classmethod
    def toy(cls, n_antennas: int, **kw) -> "ArchSpec":
        return cls(n_antennas, [(n_antennas, 3, 2), (6, 2, 2)], [4, 5, 3], **kw)

    @classmethod
    def mlp(cls, k_users: int, n_antennas: int, hidden=(128, 64, 32), **kw) -> "ArchSpec":
        return cls(n_antennas, [], [k_users * n_antennas, *hidden], kind="mlp", k_users=k_users, **kw)

    @classmethod
    def named(cls, name: str, n_antennas: int, k_users: Optional[int] = None, **kw) -> "ArchSpec":
        if name == "desk":
            return cls.desk(n_antennas, **kw)
        if name == "full":
            return cls.full(n_antennas, **kw)
        if name == "toy":
            return cls.toy(n_antennas, **kw)
        if name == "mlp":
            if k_users is None:
                raise ConfigError("the MLP architecture needs the training user count")
            return cls.mlp(k_users, n_antennas, **kw)
        raise ConfigError(f"unknown architecture {name!r}")


# initialization --------------------------------------------------------------

def _complex_glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(3.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape) + 1j * rng.uniform(-limit, limit, shape)


def _real_glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


class GnnParams:
    """Learnable tensors, batch-norm running statistics and the architecture."""

    def __init__(self, arch: ArchSpec, tensors: Dict[str, Tensor], running: Dict[str, np.ndarray]):
        self.arch = arch
        self.tensors = tensors
        self.running = running

    @classmethod
    def init(cls, arch: ArchSpec, seed: int = 0) -> "GnnParams":
        rng = np.random.default_rng(seed)
        t: Dict[str, np.ndarray] = {}
        for l, (din, dout, heads) in enumerate(arch.cgal):
            t[f"cgal{l}.a"] = _complex_glorot(rng, (heads, dout), dout, 1)
            for part in ("ws", "wn", "wm"):
                t[f"cgal{l}.{part}"] = _complex_glorot(rng, (heads, dout, din), din, dout)
            if arch.residual and din != dout * heads:
                t[f"cgal{l}.res"] = _complex_glorot(rng, (dout * heads, din), din, dout * heads)
        running = {}
        for scheme in arch.schemes:
            for i in range(len(arch.cfcl) - 1):
                din, dout = arch.cfcl[i], arch.cfcl[i + 1]
                pre = cfcl_name(scheme, i)
                t[f"{pre}.w"] = _real_glorot(rng, (dout, din), din, dout)
                if arch.cfcl_bn:
                    for part in ("re", "im"):
                        t[f"{pre}.bn_{part}_scale"] = np.ones(dout)
                        t[f"{pre}.bn_{part}_shift"] = np.zeros(dout)
                        running[f"{pre}.{part}_mean"] = np.zeros(dout)
                        running[f"{pre}.{part}_var"] = np.ones(dout)
            dout = arch.head_dim(scheme)
            t[f"{scheme.lower()}.out.w"] = _real_glorot(rng, (dout, arch.feature_dim), arch.feature_dim, dout)
        tensors = {name: Tensor(value, requires_grad=True, name=name) for name, value in t.items()}
        return cls(arch, tensors, running)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> List[Tensor]:
        return list(self.tensors.values())

    def copy(self) -> "GnnParams":
        tensors = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()}
        return GnnParams(self.arch, tensors, {k: v.copy() for k, v in self.running.items()})

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}


# layers --------------------------------------------------------------------

def cgal_forward(layer: int, x, params: GnnParams, return_attention: bool = False):
    """One complex graph attention layer on node features ``x`` of shape (B, K, I).

    Attention between nodes ``i`` and ``j`` for head ``d`` is the softmax over
    ``j`` (self included) of ``|a_d^T CLeakyReLU(W_S h_i + W_N h_j)|``; the
    messages ``W_M h_j`` are averaged with those weights and the heads are
    concatenated.
    """
    arch = params.arch
    din, dout, heads = arch.cgal[layer]
    x = ad.as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != din:
        raise ShapeError(f"attention layer {layer} expects (B, K, {din}) features, got {x.shape}")
    b, k, _ = x.shape
    p = lambda name: params[f"cgal{layer}.{name}"]
    xs = ad.reshape(x, (b, 1, k, din))
    src = ad.matmul(xs, ad.swapaxes(p("ws"), -1, -2))  # (B, D, K, O)
    nbr = ad.matmul(xs, ad.swapaxes(p("wn"), -1, -2))
    msg = ad.matmul(xs, ad.swapaxes(p("wm"), -1, -2))
    pair = ad.add(ad.reshape(src, (b, heads, k, 1, dout)), ad.reshape(nbr, (b, heads, 1, k, dout)))
    act = ad.c_leaky_relu(pair, arch.leaky_slope)
    score = ad.reduce_sum(ad.mul(act, ad.reshape(p("a"), (1, heads, 1, 1, dout))), axis=-1)
    attn = ad.softmax(ad.modulus(score), axis=-1)  # (B, D, K, K), rows sum to one
    agg = ad.matmul(attn, msg)  # (B, D, K, O)
    out = ad.reshape(ad.swapaxes(agg, 1, 2), (b, k, heads * dout))
    if arch.residual:
        if din == heads * dout:
            out = ad.add(out, x)
        else:
            out = ad.add(out, ad.matmul(x, ad.swapaxes(p("res"), -1, -2)))
    if arch.cgal_crelu:
        out = ad.c_relu(out)
    return (out, attn) if return_attention else out


def _batch_norm(y: Tensor, params: GnnParams, prefix: str, part: str, training: bool) -> Tensor:
    scale = params[f"{prefix}.bn_{part}_scale"]
    shift = params[f"{prefix}.bn_{part}_shift"]
    axes = tuple(range(y.ndim - 1))
    if training:
        normed, mean, var = ad.batch_norm(y, axes, BN_EPS)
        n = int(np.prod([y.shape[a] for a in axes]))
        rm, rv = f"{prefix}.{part}_mean", f"{prefix}.{part}_var"
        unbiased = var.reshape(-1) * (n / max(n - 1, 1))
        params.running[rm] = (1 - BN_MOMENTUM) * params.running[rm] + BN_MOMENTUM * mean.reshape(-1)
        params.running[rv] = (1 - BN_MOMENTUM) * params.running[rv] + BN_MOMENTUM * unbiased
    else:
        mean = params.running[f"{prefix}.{part}_mean"]
        var = params.running[f"{prefix}.{part}_var"]
        normed = ad.div(ad.sub(y, mean), np.sqrt(var + BN_EPS))
    return ad.add(ad.mul(normed, scale), shift)


def cfcl_name(scheme: str, layer: int) -> str:
    return f"{scheme.lower()}.cfcl{layer}"


def cfcl_forward(prefix: Optional[str], x, params: Optional[GnnParams], training: bool = False,
                 activation: bool = True, weight=None) -> Tensor:
    """Complex FC layer ``W(Re x - Im x) + j W(Im x + Re x)`` = ``W((1+j) x)``, real ``W``."""
    x = ad.as_tensor(x)
    w = ad.as_tensor(weight) if weight is not None else params[f"{prefix}.w"]
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"complex FC layer expects width {w.shape[1]}, got {x.shape}")
    y = ad.matmul(ad.mul(x, 1.0 + 1.0j), ad.swapaxes(w, -1, -2))
    if weight is None and params.arch.cfcl_bn:
        yr = _batch_norm(ad.real(y), params, prefix, "re", training)
        yi = _batch_norm(ad.imag(y), params, prefix, "im", training)
        y = ad.add(yr, ad.mul(yi, 1.0j))
    if activation:
        y = ad.c_relu(y)
    return y


def head_decode(features, weight) -> Tensor:
    """Final scheme layer followed by ``|Re(.)|``."""
    out = cfcl_forward(None, features, None, activation=False, weight=weight)
    return ad.modulus(ad.real(out))


def power_activation(p_raw, p_max) -> Tensor:
    """Keep raw powers under the budget; otherwise rescale them to sum to ``p_max``."""
    p_raw = ad.as_tensor(p_raw)
    total = ad.reduce_sum(p_raw, axis=-1, keepdims=True)
    p_max = np.asarray(p_max, dtype=np.float64)
    if p_max.ndim:
        p_max = p_max.reshape(p_max.shape + (1,) * (total.ndim - p_max.ndim))
    denom = _maximum_array(total, p_max)
    return ad.mul(p_raw, ad.div(Tensor(p_max), denom))


def _maximum_array(a: Tensor, c: np.ndarray) -> Tensor:
    if np.ndim(c) == 0:
        return ad.maximum(a, float(c))
    mask = a.data > c
    ad.tensor._note_kink(mask)
    return ad.tensor._make("maximum", np.where(mask, a.data, c), (a,), lambda g: (g * mask,))


def alpha_activation(alpha_raw, sign: str = "decreasing") -> Tensor:
    """``1 / (1 + exp(alpha_raw))`` (decreasing in the raw output), or the standard sigmoid with ``sign='standard'``."""
    alpha_raw = ad.as_tensor(alpha_raw)
    return ad.sigmoid(ad.neg(alpha_raw) if sign == "decreasing" else alpha_raw)


# rates on stacked samples --------------------------------------------------------

@dataclass
class Batch:
    """Stacked channels plus the per-sample system constants."""

    h: np.ndarray
    noise: np.ndarray
    floors: np.ndarray
    p_max: np.ndarray
    p_circuit: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_samples(cls, channels: Sequence[ChannelSet], cfgs: Sequence[SystemConfig]) -> "Batch":
        ks = {c.k_users for c in channels}
        if len(ks) != 1:
            raise ShapeError(f"a batch must share one user count, got {sorted(ks)}")
        return cls(np.stack([c.h for c in channels]),
                   np.stack([c.noise_powers for c in cfgs]),
                   np.stack([c.rate_floors for c in cfgs]),
                   np.array([c.p_max for c in cfgs], dtype=np.float64),
                   np.array([c.p_circuit for c in cfgs], dtype=np.float64))

    def __len__(self):
        return self.h.shape[0]

    @property
    def k_users(self) -> int:
        return self.h.shape[1]

    def mmse_dirs(self) -> np.ndarray:
        if "mmse" not in self._cache:
            self._cache["mmse"] = batch_mmse_directions(self.h, self.noise)
        return self._cache["mmse"]

    def mmse_gains(self) -> np.ndarray:
        if "mmse_gains" not in self._cache:
            d = self.mmse_dirs()
            self._cache["mmse_gains"] = np.abs(np.conj(self.h) @ np.swapaxes(d, -1, -2)) ** 2
        return self._cache["mmse_gains"]

    def zf_mrt(self):
        if "zf_mrt" not in self._cache:
            self._cache["zf_mrt"] = batch_zf_mrt_directions(self.h)
        return self._cache["zf_mrt"]


def rates_from_gains(gains, powers, noise) -> Tensor:
    """Per-user rates for gains ``G[b, k, i] = |h_k^H d_i|^2`` and powers (B, K)."""
    gains, powers = ad.as_tensor(gains), ad.as_tensor(powers)
    b, k = powers.shape
    received = ad.reshape(ad.matmul(gains, ad.reshape(powers, (b, k, 1))), (b, k))
    idx = np.arange(k)
    own = ad.mul(ad.getitem(gains, (slice(None), idx, idx)), powers)
    interference = ad.add(ad.sub(received, own), noise)
    return ad.log2(ad.add(ad.div(own, interference), 1.0))


def hzm_unit_directions(zf: np.ndarray, mrt: np.ndarray, alphas) -> Tensor:
    alphas = ad.as_tensor(alphas)
    b, k = alphas.shape
    mixed = ad.add(ad.mul(ad.reshape(alphas, (b, k, 1)), zf - mrt), mrt)
    norm = ad.sqrt(ad.reduce_sum(ad.abs2(mixed), axis=-1, keepdims=True))
    return ad.div(mixed, norm)


@dataclass
class Branch:
    """One scheme's output for a stack of samples."""

    scheme: str
    p_raw: Tensor
    powers: Tensor
    rates: Tensor
    ee: Tensor
    alpha_raw: Optional[Tensor] = None
    alphas: Optional[Tensor] = None
    dirs: Optional[np.ndarray] = None

    def feasible(self, floors: np.ndarray, rate_tol: float = RATE_TOL) -> np.ndarray:
        return np.all(self.rates.data >= floors - rate_tol, axis=-1)

    def penalty_loss(self, floors: np.ndarray, lam: float) -> Tensor:
        """Per-sample ``-EE + lam * sum_k relu(xi_k - R_k)``."""
        shortfall = ad.reduce_sum(ad.relu(ad.sub(floors, self.rates)), axis=-1)
        return ad.add(ad.neg(self.ee), ad.mul(shortfall, float(lam)))


class GnnModel:
    """Callable wrapper binding parameters to the forward pipeline."""

    def __init__(self, params: GnnParams):
        self.params = params

    @property
    def arch(self) -> ArchSpec:
        return self.params.arch

    @classmethod
    def create(cls, arch: ArchSpec, seed: int = 0) -> "GnnModel":
        return cls(GnnParams.init(arch, seed))

    def features(self, batch: Batch, training: bool = False) -> Tensor:
        arch = self.arch
        if batch.h.shape[-1] != arch.n_antennas:
            raise ShapeError(f"model expects N_T={arch.n_antennas}, got {batch.h.shape[-1]}")
        if arch.kind == "mlp":
            if batch.k_users != arch.k_users:
                raise ShapeError(f"MLP baseline trained for K={arch.k_users} cannot take K={batch.k_users}")
            x = Tensor(batch.h.reshape(len(batch), 1, -1))
        else:
            x = Tensor(batch.h)
            for l in range(len(arch.cgal)):
                x = cgal_forward(l, x, self.params)
        return x

    def scheme_features(self, feats: Tensor, scheme: str, training: bool = False) -> Tensor:
        for t in range(len(self.arch.cfcl) - 1):
            feats = cfcl_forward(cfcl_name(scheme, t), feats, self.params, training=training)
        return feats

    def _decode(self, feats: Tensor, scheme: str, k_users: int) -> List[Tensor]:
        """Per-user raw outputs ``[p_raw]`` or ``[p_raw, alpha_raw]``, each (B, K)."""
        mag = head_decode(feats, self.params[f"{scheme.lower()}.out.w"])
        if self.arch.kind == "mlp":
            # one node carrying K * M_n outputs, user-major
            mag = ad.reshape(mag, (mag.shape[0], k_users, HEAD_DIMS[scheme]))
        return [ad.getitem(mag, (..., j)) for j in range(HEAD_DIMS[scheme])]

    def branches(self, batch: Batch, schemes: Sequence[str], training: bool = False) -> Dict[str, Branch]:
        for s in schemes:
            if s not in self.arch.schemes:
                raise ConfigError(f"architecture has no {s} head")
        feats = self.features(batch, training)
        result = {}
        pc = batch.p_circuit
        for scheme in schemes:
            outs = self._decode(self.scheme_features(feats, scheme, training), scheme, batch.k_users)
            p = power_activation(outs[0], batch.p_max)
            if scheme == "MMSE":
                gains = batch.mmse_gains()
                dirs = batch.mmse_dirs()
                alpha_raw = alphas = None
            else:
                alpha_raw = outs[1]
                alphas = alpha_activation(alpha_raw, self.arch.sigmoid_sign)
                zf, mrt = batch.zf_mrt()
                dirs_t = hzm_unit_directions(zf, mrt, alphas)
                cross = ad.matmul(Tensor(np.conj(batch.h)), ad.swapaxes(dirs_t, -1, -2))
                gains = ad.abs2(cross)
                dirs = dirs_t.data
            r = rates_from_gains(gains, p, batch.noise)
            ee = ad.div(ad.reduce_sum(r, axis=-1), ad.add(ad.reduce_sum(p, axis=-1), pc))
            result[scheme] = Branch(scheme, outs[0], p, r, ee, alpha_raw, alphas, dirs)
        return result

    def loss(self, batch: Batch, lam: float, schemes: Sequence[str], training: bool = True) -> Tensor:
        """Mean penalty loss over the batch, summed over the requested schemes."""
        total = None
        for branch in self.branches(batch, schemes, training).values():
            term = ad.reduce_mean(branch.penalty_loss(batch.floors, lam))
            total = term if total is None else ad.add(total, term)
        return total


def loss(batch: Batch, params: GnnParams, lam: float, scheme: str = "MMSE", training: bool = True) -> Tensor:
    schemes = tuple(params.arch.schemes) if scheme == "both" else (scheme,)
    return GnnModel(params).loss(batch, lam, schemes, training)


# scheme selection --------------------------------------------------------------

@dataclass
class SchemeOutcome:
    scheme: str
    ee: float
    feasible: bool


def select_scheme(mmse: Optional[SchemeOutcome], hzm: Optional[SchemeOutcome]) -> Tuple[str, bool]:
    """Feasibility-gated argmax over the two schemes.

    Returns ``(scheme, feasible)``.  A feasible scheme always beats an
    infeasible one; between equals the larger EE wins and ties within 1e-12
    go to MMSE.  With both infeasible the larger raw EE is returned, flagged.
    """
    options = [o for o in (mmse, hzm) if o is not None]
    if not options:
        raise ConfigError("no scheme outcomes to select from")
    if len(options) == 1:
        return options[0].scheme, options[0].feasible
    feasible = [o for o in options if o.feasible]
    pool = feasible if feasible else options
    if len(pool) == 1:
        return pool[0].scheme, pool[0].feasible
    m, h = pool
    if h.ee > m.ee + TIE_TOL:
        return h.scheme, h.feasible
    return m.scheme, m.feasible


@dataclass
class ForwardOutput:
    p_raw: Dict[str, np.ndarray]
    alpha_raw: Optional[np.ndarray]
    powers: Dict[str, np.ndarray]
    alphas: Optional[np.ndarray]
    solutions: Dict[str, BeamSolution]
    reports: Dict[str, PerfReport]
    selected: str
    feasible: bool

    @property
    def beams(self) -> BeamSolution:
        return self.solutions[self.selected]

    @property
    def report(self) -> PerfReport:
        return self.reports[self.selected]


MODES = {"mmse": ("MMSE",), "hzm": ("HZM",), "select": ("MMSE", "HZM")}


def scheme_select(branches: Dict[str, Branch], channels: ChannelSet, cfg: SystemConfig) -> ForwardOutput:
    """Build the per-scheme solutions of a single-sample forward pass and pick one."""
    solutions, reports = {}, {}
    for name, br in branches.items():
        p = br.powers.data[0]
        alphas = None if br.alphas is None else br.alphas.data[0]
        w = np.sqrt(p)[:, None] * br.dirs[0]
        solutions[name] = BeamSolution(w, p.copy(), alphas, name)
        reports[name] = check_feasibility(channels, solutions[name], cfg)
    outcome = {n: SchemeOutcome(n, r.ee, r.feasible) for n, r in reports.items()}
    selected, feasible = select_scheme(outcome.get("MMSE"), outcome.get("HZM"))
    hzm = branches.get("HZM")
    return ForwardOutput(
        p_raw={n: b.p_raw.data[0].copy() for n, b in branches.items()},
        alpha_raw=None if hzm is None else hzm.alpha_raw.data[0].copy(),
        powers={n: b.powers.data[0].copy() for n, b in branches.items()},
        alphas=None if hzm is None else hzm.alphas.data[0].copy(),
        solutions=solutions, reports=reports, selected=selected, feasible=feasible)


def full_forward(channels: ChannelSet, cfg: SystemConfig, params: GnnParams, mode: str = "select") -> ForwardOutput:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {tuple(MODES)}")
    if params.arch.kind != "gnn":
        raise ConfigError("full_forward runs the GNN; use mlp_forward for the MLP baseline")
    batch = Batch.from_samples([channels], [cfg])
    return scheme_select(GnnModel(params).branches(batch, MODES[mode]), channels, cfg)


def mlp_forward(channels: ChannelSet, cfg: SystemConfig, params: GnnParams, mode: str = "select") -> ForwardOutput:
    if params.arch.kind != "mlp":
        raise ConfigError("mlp_forward needs an MLP architecture")
    batch = Batch.from_samples([channels], [cfg])
    return scheme_select(GnnModel(params).branches(batch, MODES[mode]), channels, cfg)


def forward(channels: ChannelSet, cfg: SystemConfig, params: GnnParams, mode: str = "select") -> ForwardOutput:
    fn = mlp_forward if params.arch.kind == "mlp" else full_forward
    return fn(channels, cfg, params, mode)


# checkpoints ----------------------------------------------------------------------

def save_params(params: GnnParams, path, metadata: Optional[dict] = None):
    header = {"version": CHECKPOINT_VERSION, "arch": params.arch.to_dict(), "metadata": metadata or {}}
    arrays = {f"param/{k}": v.data for k, v in params.tensors.items()}
    arrays.update({f"running/{k}": v for k, v in params.running.items()})
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    # np.savez stamps members with the wall clock; a fixed date keeps reruns byte-identical
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), member.getvalue())
    atomic_write(path, buf.getvalue())


def load_params(path, arch: Optional[ArchSpec] = None) -> Tuple[GnnParams, dict]:
    """Read a checkpoint; ``arch`` (when given) must match the stored one exactly."""
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError, zipfile.BadZipFile, EOFError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if "header" not in data:
        raise CheckpointError("checkpoint has no header")
    try:
        header = json.loads(data.pop("header").tobytes().decode())
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    stored = ArchSpec.from_dict(header["arch"])
    if arch is not None and arch.to_dict() != stored.to_dict():
        raise CheckpointError("checkpoint architecture does not match the requested one")
    expected = GnnParams.init(stored, 0)
    tensors, running = {}, {}
    for name, ref in expected.tensors.items():
        arr = data.get(f"param/{name}")
        if arr is None or arr.shape != ref.shape:
            raise CheckpointError(f"checkpoint tensor {name} missing or misshapen")
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    for name, ref in expected.running.items():
        arr = data.get(f"running/{name}")
        if arr is None or arr.shape != ref.shape:
            raise CheckpointError(f"checkpoint statistic {name} missing or misshapen")
        running[name] = arr
    return GnnParams(stored, tensors, running), header.get("metadata", {})
