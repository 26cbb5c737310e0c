"""Single-loop SCA baseline for the QoS-constrained EE problem, plus brute-force oracles.

The EE ratio is replaced by per-user shares ``varpi_k <= R_k / P_total`` and
exponential slacks

    exp(a_k) >= varpi_k          exp(b) >= sum ||w_i||^2 + P_C
    c_k >= exp(a_k + b)          exp(d_k) >= 2^c_k - 1
    exp(f_k) >= interference_k + sigma_k^2
    |h_k^H w_k|^2 >= exp(d_k + f_k)

so ``c_k`` is a rate target bounded by ``R_k`` and ``c_k >= varpi_k P_total``.
Each outer iteration replaces the concave-side terms by first-order Taylor
bounds around the current point and solves the resulting convex program with
a log-barrier Newton method.  Beams are lifted to reals per user as
``z_i = [Re w_i, Im w_i]``.
"""

from __future__ import annotations

import itertools
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .core import BeamSolution, ChannelSet, PerfReport, SystemConfig, check_feasibility, gain_matrix
from .errors import CapacityError, InfeasibleInstanceError, InvalidInputError, NumericError
from .precoders import combine_hzm, mmse_directions, mrt_directions, zf_directions

LN2 = math.log(2.0)


@dataclass
class ScaOptions:
    max_outer: int = 50
    rel_tol: float = 1e-5
    mu: float = 10.0
    t0: float = 1.0
    gap_tol: float = 1e-8
    newton_tol: float = 1e-8
    max_newton: int = 50
    interior_margin: float = 1e-3
    init: str = "mmse"

    def __post_init__(self):
        if self.max_outer < 1 or self.max_newton < 1:
            raise InvalidInputError("iteration limits must be positive")
        if not (self.rel_tol > 0 and self.t0 > 0 and self.gap_tol > 0 and self.newton_tol > 0):
            raise InvalidInputError("tolerances must be positive")
        if not self.mu > 1:
            raise InvalidInputError("barrier multiplier mu must exceed 1")


@dataclass
class ScaState:
    """Beams plus slacks set from their defining equalities."""

    w: np.ndarray
    varpi: np.ndarray
    a: np.ndarray
    b: float
    c: np.ndarray
    d: np.ndarray
    f: np.ndarray

    @property
    def objective(self) -> float:
        return float(np.sum(self.varpi))


def _signal_interference(h: np.ndarray, w: np.ndarray, noise: np.ndarray):
    g = gain_matrix(h, w)
    signal = np.diag(g).copy()
    return signal, g.sum(axis=1) - signal + noise


def consistent_state(channels: ChannelSet, cfg: SystemConfig, w: np.ndarray) -> ScaState:
    w = np.asarray(w, dtype=np.complex128)
    signal, interf = _signal_interference(channels.h, w, cfg.noise_powers)
    sinr = signal / interf
    r = np.log2(1.0 + sinr)
    p_total = float(np.sum(np.abs(w) ** 2) + cfg.p_circuit)
    if np.any(r <= 0) or not np.all(np.isfinite(r)):
        raise NumericError("slacks undefined: some user has zero rate")
    varpi = r / p_total
    with np.errstate(divide="ignore"):
        return ScaState(w=w.copy(), varpi=varpi, a=np.log(varpi), b=math.log(p_total),
                        c=r.copy(), d=np.log(sinr), f=np.log(interf))


def p2a_residuals(state: ScaState, channels: ChannelSet, cfg: SystemConfig) -> np.ndarray:
    """Left-minus-right of every exact constraint of the slack problem (<= 0 when satisfied)."""
    h, w = channels.h, state.w
    signal, interf = _signal_interference(h, w, cfg.noise_powers)
    gamma = 2.0 ** cfg.rate_floors - 1.0
    p_tx = float(np.sum(np.abs(w) ** 2))
    return np.concatenate([
        np.exp(state.d + state.f) - signal,
        2.0 ** state.c - 1.0 - np.exp(state.d),
        interf - np.exp(state.f),
        np.exp(state.a + state.b) - state.c,
        state.varpi - np.exp(state.a),
        [p_tx + cfg.p_circuit - math.exp(state.b)],
        gamma * interf - signal,
        [p_tx - cfg.p_max],
        -state.varpi,
    ])


# initialization ------------------------------------------------------------

def _min_power_for_qos(gains: np.ndarray, noise: np.ndarray, targets: np.ndarray) -> Optional[np.ndarray]:
    """Smallest powers giving every user SINR == target under fixed directions."""
    m = -targets[:, None] * gains
    np.fill_diagonal(m, np.diag(gains))
    try:
        p = np.linalg.solve(m, targets * noise)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        return None
    return p


def sca_init(channels: ChannelSet, cfg: SystemConfig, margin: float = 1e-3) -> ScaState:
    """Strictly feasible starting point under MMSE directions.

    Equal powers just below the budget are used when they meet every rate
    floor with margin.  Otherwise the minimum-power QoS allocation is found
    and scaled by a common factor, bisected for the largest factor that keeps
    a ``margin`` fraction of the budget unused.
    """
    dirs = mmse_directions(channels, cfg).dirs
    gains = gain_matrix(channels.h, dirs)
    noise = cfg.noise_powers
    targets = 2.0 ** cfg.rate_floors - 1.0
    k_users = channels.k_users

    def sinr_of(p):
        signal = np.diag(gains) * p
        return signal / (gains @ p - signal + noise)

    equal = np.full(k_users, (1.0 - margin) * cfg.p_max / k_users)
    if np.all(sinr_of(equal) > targets * (1.0 + margin) + 1e-300):
        return consistent_state(channels, cfg, np.sqrt(equal)[:, None] * dirs)

    base = _min_power_for_qos(gains, noise, targets * (1.0 + margin))
    if base is None or base.sum() >= (1.0 - margin) * cfg.p_max:
        raise InfeasibleInstanceError("rate floors unattainable under MMSE directions within the budget")
    lo, hi = 1.0, (1.0 - margin) * cfg.p_max / base.sum()
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if mid * base.sum() <= (1.0 - margin) * cfg.p_max:
            lo = mid
        else:
            hi = mid
    p = lo * base
    if np.any(p <= 0):
        p = np.maximum(p, 1e-12)
    return consistent_state(channels, cfg, np.sqrt(p)[:, None] * dirs)


# convexified subproblem ------------------------------------------------------

class Subproblem:
    """Convex restriction of the slack problem around an expansion point.

    Variables ``x = [z_0, ..., z_{K-1}, varpi, a, b, c, d, f]`` with
    ``z_i = [Re w_i, Im w_i]``.  Constraints are ``g(x) <= 0``; the objective
    is to maximize ``sum(varpi)``.
    """

    def __init__(self, state: ScaState, channels: ChannelSet, cfg: SystemConfig):
        h = channels.h
        self.k, self.n_ant = h.shape
        k, n = self.k, self.n_ant
        self.nw = 2 * k * n
        self.n = self.nw + 5 * k + 1
        self.m = 7 * k + 2
        self.noise = cfg.noise_powers
        self.gamma = 2.0 ** cfg.rate_floors - 1.0
        self.p_circuit = cfg.p_circuit
        self.p_max = cfg.p_max
        self.expansion = state
        self.q1 = np.concatenate([h.real, h.imag], axis=1)
        self.q2 = np.concatenate([-h.imag, h.real], axis=1)
        # Q_k = 2 (q1 q1^T + q2 q2^T)
        self.qmat = 2.0 * (self.q1[:, :, None] * self.q1[:, None, :]
                           + self.q2[:, :, None] * self.q2[:, None, :])
        a_tilde = np.einsum("kn,kn->k", np.conj(h), state.w)
        self.a_re, self.a_im = a_tilde.real, a_tilde.imag
        self.lin = 2.0 * (self.a_re[:, None] * self.q1 + self.a_im[:, None] * self.q2)
        self.lin_const = self.a_re ** 2 + self.a_im ** 2
        self.ed, self.ef, self.ea = np.exp(state.d), np.exp(state.f), np.exp(state.a)
        self.eb = math.exp(state.b)
        self.d0, self.f0, self.a0, self.b0 = state.d, state.f, state.a, state.b
        s = self.nw
        self.i_varpi = slice(s, s + k)
        self.i_a = slice(s + k, s + 2 * k)
        self.i_b = s + 2 * k
        self.i_c = slice(s + 2 * k + 1, s + 3 * k + 1)
        self.i_d = slice(s + 3 * k + 1, s + 4 * k + 1)
        self.i_f = slice(s + 4 * k + 1, s + 5 * k + 1)

    # packing ---------------------------------------------------------------
    def pack(self, st: ScaState) -> np.ndarray:
        z = np.concatenate([st.w.real, st.w.imag], axis=1).reshape(-1)
        return np.concatenate([z, st.varpi, st.a, [st.b], st.c, st.d, st.f])

    def beams(self, x: np.ndarray) -> np.ndarray:
        z = x[:self.nw].reshape(self.k, 2 * self.n_ant)
        return z[:, :self.n_ant] + 1j * z[:, self.n_ant:]

    def unpack(self, x: np.ndarray) -> ScaState:
        return ScaState(self.beams(x), x[self.i_varpi].copy(), x[self.i_a].copy(), float(x[self.i_b]),
                        x[self.i_c].copy(), x[self.i_d].copy(), x[self.i_f].copy())

    # evaluation ------------------------------------------------------------
    def _parts(self, x):
        z = x[:self.nw].reshape(self.k, 2 * self.n_ant)
        p1 = z @ self.q1.T  # p1[i, k] = q1_k . z_i
        p2 = z @ self.q2.T
        gains = p1 ** 2 + p2 ** 2
        own = np.diag(gains)
        interf = gains.sum(axis=0) - own + self.noise  # per receiving user k
        lin = np.einsum("kj,kj->k", self.lin, z) - self.lin_const
        p_tx = float(np.sum(z * z))
        return z, p1, p2, interf, lin, p_tx

    def constraints(self, x: np.ndarray) -> np.ndarray:
        _, _, _, interf, lin, p_tx = self._parts(x)
        varpi, a, b = x[self.i_varpi], x[self.i_a], x[self.i_b]
        c, d, f = x[self.i_c], x[self.i_d], x[self.i_f]
        return np.concatenate([
            np.exp(d + f) - lin,
            2.0 ** c - 1.0 - self.ed * (d - self.d0 + 1.0),
            interf - self.ef * (f - self.f0 + 1.0),
            varpi - self.ea * (a - self.a0 + 1.0),
            [p_tx + self.p_circuit - self.eb * (b - self.b0 + 1.0)],
            self.gamma * interf - lin,
            np.exp(a + b) - c,
            [p_tx - self.p_max],
            -varpi,
        ])

    def exact_constraints(self, x: np.ndarray) -> np.ndarray:
        """The unlinearized counterparts, in the same order as :meth:`constraints`."""
        _, p1, p2, interf, _, p_tx = self._parts(x)
        signal = np.diag(p1) ** 2 + np.diag(p2) ** 2
        varpi, a, b = x[self.i_varpi], x[self.i_a], x[self.i_b]
        c, d, f = x[self.i_c], x[self.i_d], x[self.i_f]
        return np.concatenate([
            np.exp(d + f) - signal,
            2.0 ** c - 1.0 - np.exp(d),
            interf - np.exp(f),
            varpi - np.exp(a),
            [p_tx + self.p_circuit - math.exp(b)],
            self.gamma * interf - signal,
            np.exp(a + b) - c,
            [p_tx - self.p_max],
            -varpi,
        ])

    def derivatives(self, x: np.ndarray):
        """Constraint values, Jacobian, and a callback adding weighted Hessians."""
        k, n2 = self.k, 2 * self.n_ant
        z, p1, p2, interf, lin, p_tx = self._parts(x)
        varpi, a, b = x[self.i_varpi], x[self.i_a], x[self.i_b]
        c, d, f = x[self.i_c], x[self.i_d], x[self.i_f]
        edf = np.exp(d + f)
        two_c = 2.0 ** c
        eab = np.exp(a + b)
        g = np.concatenate([
            edf - lin,
            two_c - 1.0 - self.ed * (d - self.d0 + 1.0),
            interf - self.ef * (f - self.f0 + 1.0),
            varpi - self.ea * (a - self.a0 + 1.0),
            [p_tx + self.p_circuit - self.eb * (b - self.b0 + 1.0)],
            self.gamma * interf - lin,
            eab - c,
            [p_tx - self.p_max],
            -varpi,
        ])

        jac = np.zeros((self.m, self.n))
        rows = np.arange(k)
        # gradient of interference_k w.r.t. z_i (i != k): 2 (p1[i,k] q1_k + p2[i,k] q2_k)
        dint = 2.0 * (p1.T[:, :, None] * self.q1[:, None, :] + p2.T[:, :, None] * self.q2[:, None, :])
        dint[rows, rows, :] = 0.0  # dint[k, i, :]
        dint_flat = dint.reshape(k, self.nw)
        lin_flat = np.zeros((k, self.nw))
        for kk in range(k):
            lin_flat[kk, kk * n2:(kk + 1) * n2] = self.lin[kk]
        ptx_grad = 2.0 * x[:self.nw]

        r = 0
        jac[r:r + k, :self.nw] = -lin_flat
        jac[r + rows, self.i_d.start + rows] = edf
        jac[r + rows, self.i_f.start + rows] = edf
        r += k
        jac[r + rows, self.i_c.start + rows] = LN2 * two_c
        jac[r + rows, self.i_d.start + rows] = -self.ed
        r += k
        jac[r:r + k, :self.nw] = dint_flat
        jac[r + rows, self.i_f.start + rows] = -self.ef
        r += k
        jac[r + rows, self.i_varpi.start + rows] = 1.0
        jac[r + rows, self.i_a.start + rows] = -self.ea
        r += k
        jac[r, :self.nw] = ptx_grad
        jac[r, self.i_b] = -self.eb
        r += 1
        jac[r:r + k, :self.nw] = self.gamma[:, None] * dint_flat - lin_flat
        r += k
        jac[r + rows, self.i_a.start + rows] = eab
        jac[r + rows, self.i_b] = eab
        jac[r + rows, self.i_c.start + rows] = -1.0
        r += k
        jac[r, :self.nw] = ptx_grad
        r += 1
        jac[r + rows, self.i_varpi.start + rows] = -1.0

        def add_hessians(hess: np.ndarray, weights: np.ndarray):
            """hess += sum_j weights[j] * hessian(g_j)."""
            w1, w2, w3 = weights[0:k], weights[k:2 * k], weights[2 * k:3 * k]
            w5 = weights[4 * k]
            w6 = weights[4 * k + 1:5 * k + 1]
            w7 = weights[5 * k + 1:6 * k + 1]
            w8 = weights[6 * k + 1]
            coef = w3 + self.gamma * w6  # weight on Q_k for each receiving user k
            total = np.einsum("k,kab->ab", coef, self.qmat)
            ident = 2.0 * (w5 + w8) * np.eye(n2)
            for i in range(k):
                blk = slice(i * n2, (i + 1) * n2)
                hess[blk, blk] += total - coef[i] * self.qmat[i] + ident
            di, fi = self.i_d.start + rows, self.i_f.start + rows
            ww = w1 * edf
            hess[di, di] += ww
            hess[fi, fi] += ww
            hess[di, fi] += ww
            hess[fi, di] += ww
            ci = self.i_c.start + rows
            hess[ci, ci] += w2 * LN2 ** 2 * two_c
            ai = self.i_a.start + rows
            ww = w7 * eab
            hess[ai, ai] += ww
            hess[self.i_b, self.i_b] += ww.sum()
            hess[ai, self.i_b] += ww
            hess[self.i_b, ai] += ww

        return g, jac, add_hessians

    def interior_start(self, margin: float) -> np.ndarray:
        """Strictly feasible point next to the expansion point (same beams)."""
        st = self.expansion
        eps = margin
        x = self.pack(st)
        _, _, _, interf, lin, _ = self._parts(x)
        sinr = lin / interf
        f = st.f + eps
        d = st.d - 2 * eps
        c = (1.0 - eps) * np.log2(1.0 + sinr * (1.0 - 2 * eps))
        b = st.b + eps
        a = np.log(c) - b - eps
        varpi = (1.0 - eps) * self.ea * (a - self.a0 + 1.0)
        return np.concatenate([x[:self.nw], varpi, a, [b], c, d, f])


# barrier method ----------------------------------------------------------------

@dataclass
class BarrierStats:
    newton_steps: int = 0
    centering_rounds: int = 0
    final_t: float = 0.0


def barrier_solve(sub: Subproblem, start: np.ndarray, opts: Optional[ScaOptions] = None):
    """Log-barrier path following with damped Newton centering.

    Minimizes ``-t * sum(varpi) - sum(log(-g(x)))`` for increasing ``t``
    until ``m / t < gap_tol``.  ``start`` must be strictly feasible.
    Returns ``(x, stats)``.
    """
    opts = opts or ScaOptions()
    x = np.array(start, dtype=np.float64)
    g0 = sub.constraints(x)
    if not np.all(g0 < 0):
        raise NumericError("barrier start is not strictly feasible")
    obj = np.zeros(sub.n)
    obj[sub.i_varpi] = -1.0  # minimize -sum(varpi)
    stats = BarrierStats()
    t = opts.t0

    def phi(xx, tt):
        gg = sub.constraints(xx)
        if not np.all(gg < 0) or not np.all(np.isfinite(gg)):
            return math.inf
        return tt * float(obj @ xx) - float(np.sum(np.log(-gg)))

    while True:
        stats.centering_rounds += 1
        for _ in range(opts.max_newton):
            g, jac, add_hess = sub.derivatives(x)
            inv = 1.0 / (-g)
            grad = t * obj + jac.T @ inv
            hess = (jac * (inv ** 2)[:, None]).T @ jac
            add_hess(hess, inv)
            try:
                step = np.linalg.solve(hess, -grad)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(hess, -grad, rcond=None)[0]
            dec2 = float(-grad @ step)
            if dec2 / 2.0 <= opts.newton_tol:
                break
            f0 = phi(x, t)
            s = 1.0
            while s > 1e-14:
                f1 = phi(x + s * step, t)
                if f1 <= f0 - 0.01 * s * dec2:
                    break
                s *= 0.5
            else:
                # no descent possible at machine precision: treat as centered
                break
            x = x + s * step
            stats.newton_steps += 1
        if sub.m / t < opts.gap_tol:
            break
        t *= opts.mu
    stats.final_t = t
    if not np.all(sub.constraints(x) < 0):
        raise NumericError("barrier iterate left the feasible region")
    return x, stats


# outer SCA loop ------------------------------------------------------------------

@dataclass
class ScaResult:
    beams: BeamSolution
    report: PerfReport
    history: List[dict]
    iterations: int
    converged: bool
    wall_time: float
    state: ScaState = field(repr=False, default=None)


def linearize(state: ScaState, channels: ChannelSet, cfg: SystemConfig) -> Subproblem:
    return Subproblem(state, channels, cfg)


def sca_solve(channels: ChannelSet, cfg: SystemConfig, opts: Optional[ScaOptions] = None,
              init: Optional[ScaState] = None) -> ScaResult:
    opts = opts or ScaOptions()
    start = time.perf_counter()
    state = init if init is not None else sca_init(channels, cfg, opts.interior_margin)
    objective = state.objective
    history = [{"iteration": 0, "objective": objective, "newton_steps": 0}]
    converged = False
    for it in range(1, opts.max_outer + 1):
        sub = linearize(state, channels, cfg)
        x, stats = barrier_solve(sub, sub.interior_start(opts.interior_margin), opts)
        candidate = consistent_state(channels, cfg, sub.beams(x))
        sub_value = float(np.sum(x[sub.i_varpi]))
        if candidate.objective < objective:
            # barrier gap can cost up to gap_tol; keep the previous point
            history.append({"iteration": it, "objective": objective, "subproblem": sub_value,
                            "newton_steps": stats.newton_steps, "accepted": False})
            converged = True
            break
        improvement = (candidate.objective - objective) / max(abs(objective), 1e-300)
        state, objective = candidate, candidate.objective
        history.append({"iteration": it, "objective": objective, "subproblem": sub_value,
                        "newton_steps": stats.newton_steps, "accepted": True})
        if improvement < opts.rel_tol:
            converged = True
            break
    powers = np.sum(np.abs(state.w) ** 2, axis=1)
    beams = BeamSolution(state.w.copy(), powers, None, "RAW")
    return ScaResult(beams, check_feasibility(channels, beams, cfg), history,
                     len(history) - 1, converged, time.perf_counter() - start, state)


# oracles -----------------------------------------------------------------------

def golden_section_max(fn, lo: float, hi: float, tol: float = 1e-9):
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fn(d)
    best = max((fn(a), a), (fn(b), b), (fn(0.5 * (a + b)), 0.5 * (a + b)))
    return best[1], best[0]


def scalar_oracle(channels: ChannelSet, cfg: SystemConfig, tol: float = 1e-9):
    """Single-user optimum: MRT direction, golden-section search over the power."""
    if channels.k_users != 1:
        raise InvalidInputError("scalar oracle is for a single user")
    snr = float(np.sum(np.abs(channels.h) ** 2) / cfg.noise_powers[0])
    p_min = (2.0 ** cfg.rate_floors[0] - 1.0) / snr
    if p_min > cfg.p_max:
        raise InfeasibleInstanceError("rate floor exceeds what the power budget allows")

    def ee(p):
        return math.log2(1.0 + p * snr) / (p + cfg.p_circuit)

    p, value = golden_section_max(ee, p_min, cfg.p_max, tol)
    return p, value


def power_grid(k_users: int, p_max: float, delta: float) -> np.ndarray:
    """All power vectors on the ``delta`` lattice with ``sum(p) <= p_max``."""
    steps = int(round(p_max / delta))
    if steps < 1 or abs(steps * delta - p_max) > 1e-9 * p_max:
        raise InvalidInputError("delta must divide p_max")
    idx = np.array(list(itertools.product(range(steps + 1), repeat=k_users)), dtype=np.int64)
    idx = idx[idx.sum(axis=1) <= steps]
    return p_max * idx / steps


def _alpha_levels(delta_alpha: float) -> np.ndarray:
    steps = int(round(1.0 / delta_alpha))
    return np.arange(steps + 1) / steps


MAX_GRID_USERS = 3


def _grid_best(gains: np.ndarray, powers: np.ndarray, cfg: SystemConfig, chunk_budget: int = 65_536):
    """Best feasible EE for a stack of gain matrices ``(C, K, K)`` over all power vectors.

    ``gains[c, k, i]`` is the gain of beam ``i`` at user ``k``.  Chunks stay
    small so the per-user temporaries remain cache resident.
    """
    n_c, k, _ = gains.shape
    # R_k >= xi_k - 1e-12 checked on the SINR to skip per-user logs
    sinr_floor = 2.0 ** (cfg.rate_floors - 1e-12) - 1.0
    p_total = powers.sum(axis=1) + cfg.p_circuit
    p_t = np.ascontiguousarray(powers.T)
    noise = cfg.noise_powers
    best_val, best_c, best_p = -math.inf, -1, -1
    step = max(1, chunk_budget // powers.shape[0])
    for s in range(0, n_c, step):
        gc = gains[s:s + step]
        ok, prod = None, None
        for kk in range(k):
            interf = np.full((gc.shape[0], p_t.shape[1]), noise[kk])
            for i in range(k):
                if i != kk:
                    interf += gc[:, kk, i, None] * p_t[i]
            sinr = gc[:, kk, kk, None] * p_t[kk] / interf
            met = sinr >= sinr_floor[kk]
            ok = met if ok is None else ok & met
            sinr += 1.0
            prod = sinr if prod is None else prod * sinr
        # sum_k log2(1 + sinr_k) as one log of the product
        ee = np.where(ok, np.log2(prod) / p_total, -math.inf)
        flat = int(np.argmax(ee))
        ci, pi = divmod(flat, powers.shape[0])
        if ee[ci, pi] > best_val:
            best_val, best_c, best_p = float(ee[ci, pi]), s + ci, pi
    return best_val, best_c, best_p


def grid_oracle(channels: ChannelSet, cfg: SystemConfig, scheme: str = "MMSE",
                delta: float = 0.02, delta_alpha: Optional[float] = None) -> BeamSolution:
    """Exhaustive search over lattice powers (and hybrid coefficients for HZM)."""
    k = channels.k_users
    if k > MAX_GRID_USERS:
        raise CapacityError(f"grid oracle limited to K <= {MAX_GRID_USERS}, got K={k}")
    powers = power_grid(k, cfg.p_max, delta)
    if scheme == "MMSE":
        dirs = mmse_directions(channels, cfg).dirs
        val, _, pi = _grid_best(gain_matrix(channels.h, dirs)[None], powers, cfg)
        alphas = None
    elif scheme == "HZM":
        levels = _alpha_levels(delta_alpha if delta_alpha is not None else delta)
        zf = zf_directions(channels).dirs
        mrt = mrt_directions(channels).dirs
        # table[l, i] = direction of user i at coefficient level l
        table = np.stack([combine_hzm(zf, mrt, np.full(k, lv)) for lv in levels])
        # gtab[l, k, i] = |h_k^H d_i(level l)|^2
        gtab = np.abs(np.einsum("kn,lin->lki", np.conj(channels.h), table)) ** 2
        combos = np.array(list(itertools.product(range(len(levels)), repeat=k)), dtype=np.int64)
        gains = gtab[combos, :, np.arange(k)[None, :]]  # (C, K_i, K_k)
        gains = np.swapaxes(gains, 1, 2)
        val, ci, pi = _grid_best(gains, powers, cfg)
        if ci >= 0:
            alphas = levels[combos[ci]]
            dirs = combine_hzm(zf, mrt, alphas)
    else:
        raise InvalidInputError(f"grid oracle supports MMSE or HZM, not {scheme!r}")
    if not math.isfinite(val):
        raise InfeasibleInstanceError(f"no lattice point meets the rate floors under {scheme}")
    p = powers[pi]
    return BeamSolution(np.sqrt(p)[:, None] * dirs, p.copy(), alphas, scheme)


# dataset labelling ---------------------------------------------------------------

GRID_SCHEMES = ("MMSE", "HZM", "best")


def worker_count(requested: Optional[int] = None) -> int:
    """Worker processes for per-sample fan-out, capped by ``BEAMKIT_THREADS``."""
    env = os.environ.get("BEAMKIT_THREADS")
    cap = int(env) if env and env.strip().isdigit() and int(env) > 0 else 1
    n = cap if requested is None else min(requested, cap)
    return max(1, n)


def label_one(method: str, channels: ChannelSet, cfg: SystemConfig, opts: Optional[ScaOptions] = None,
              grid_scheme: str = "best", delta: float = 0.02, delta_alpha: Optional[float] = None) -> dict:
    """Label one instance; infeasible or failed instances get ``ee = None`` and a status."""
    record = {"k_users": channels.k_users, "ee": None, "feasible": False}
    start = time.perf_counter()
    try:
        if method == "sca":
            res = sca_solve(channels, cfg, opts)
            record.update(ee=res.report.ee if res.report.feasible else None, feasible=res.report.feasible,
                          iterations=res.iterations, converged=res.converged, status="ok")
        elif method == "grid":
            schemes = ("MMSE", "HZM") if grid_scheme == "best" else (grid_scheme,)
            best = None
            for scheme in schemes:
                try:
                    sol = grid_oracle(channels, cfg, scheme, delta, delta_alpha)
                except InfeasibleInstanceError:
                    continue
                rep = check_feasibility(channels, sol, cfg)
                if best is None or rep.ee > best[1].ee:
                    best = (scheme, rep)
            if best is None:
                raise InfeasibleInstanceError("no lattice point is feasible")
            record.update(ee=best[1].ee, feasible=best[1].feasible, scheme=best[0], status="ok")
        else:
            raise InvalidInputError(f"unknown baseline {method!r}")
    except InfeasibleInstanceError as exc:
        record["status"] = f"infeasible: {exc}"
    except NumericError as exc:
        record["status"] = f"numeric: {exc}"
    record["wall_time"] = time.perf_counter() - start
    return record


def _label_task(args):
    return label_one(*args)


def label_instances(method: str, channels: Sequence[ChannelSet], cfgs: Sequence[SystemConfig],
                    opts: Optional[ScaOptions] = None, grid_scheme: str = "best", delta: float = 0.02,
                    delta_alpha: Optional[float] = None, workers: Optional[int] = None) -> List[dict]:
    """Label every instance, in order; fans out over processes when allowed."""
    if method == "grid" and any(c.k_users > MAX_GRID_USERS for c in channels):
        raise CapacityError(f"grid oracle limited to K <= {MAX_GRID_USERS}")
    tasks = [(method, c, g, opts, grid_scheme, delta, delta_alpha) for c, g in zip(channels, cfgs)]
    n = worker_count(workers)
    if n == 1 or len(tasks) < 2:
        records = [_label_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            records = list(pool.map(_label_task, tasks, chunksize=max(1, len(tasks) // (4 * n))))
    for i, r in enumerate(records):
        r["index"] = i
    return records
