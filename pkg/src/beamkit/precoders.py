"""Closed-form beam directions: MMSE, ZF, MRT and the hybrid ZF/MRT (HZM) family.

All directions come back in the channel layout: row ``k`` is the unit-norm
direction for user ``k``.  Solves go through the K x K Gram matrix, never an
N_T x N_T inverse.  The ``batch_*`` helpers accept stacked channels of shape
``(..., K, N_T)`` and skip the per-instance checks; the GNN uses them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .core import BeamSolution, ChannelSet, SystemConfig
from .errors import DegenerateInputError, InvalidInputError, NumericError, RankError

MMSE_COND_LIMIT = 1e14
ZF_COND_LIMIT = 1e12
DEGENERATE_NORM = 1e-12


@dataclass
class DirectionSet:
    dirs: np.ndarray
    scheme: str
    alphas: Optional[np.ndarray] = None


def _gram(h: np.ndarray) -> np.ndarray:
    # G G^H with G = conj(h): entry (k, i) = h_k^H h_i
    return np.conj(h) @ h.T


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _solve_hermitian(m: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``conj(m) X = rhs`` for Hermitian positive definite ``m``."""
    try:
        factor = scipy.linalg.cho_factor(np.conj(m), lower=True)
        return scipy.linalg.cho_solve(factor, rhs)
    except np.linalg.LinAlgError:
        return scipy.linalg.solve(np.conj(m), rhs)


def mmse_raw(h: np.ndarray, noise_powers) -> np.ndarray:
    """Unnormalized MMSE vectors ``v_k`` as rows."""
    k_users = h.shape[0]
    m = _gram(h) + np.diag(np.broadcast_to(np.asarray(noise_powers, dtype=np.float64), (k_users,)))
    if np.linalg.cond(m) > MMSE_COND_LIMIT:
        raise NumericError("regularized Gram matrix is numerically singular")
    return _solve_hermitian(m, h)


def zf_raw(h: np.ndarray) -> np.ndarray:
    """Unnormalized zero-forcing vectors ``u_k`` as rows (``h_i^H u_k = delta_ik``)."""
    k_users, n_antennas = h.shape
    if k_users > n_antennas:
        raise RankError(f"zero-forcing needs K <= N_T, got K={k_users}, N_T={n_antennas}")
    m = _gram(h)
    if np.linalg.cond(m) > ZF_COND_LIMIT:
        raise RankError("channel Gram matrix is rank deficient for zero-forcing")
    return _solve_hermitian(m, h)


def mmse_directions(channels: ChannelSet, cfg: SystemConfig) -> DirectionSet:
    if cfg.k_users != channels.k_users:
        raise InvalidInputError("config and channels disagree on the number of users")
    return DirectionSet(_normalize_rows(mmse_raw(channels.h, cfg.noise_powers)), "MMSE")


def zf_directions(channels: ChannelSet) -> DirectionSet:
    return DirectionSet(_normalize_rows(zf_raw(channels.h)), "ZF")


def mrt_directions(channels: ChannelSet) -> DirectionSet:
    norms = np.linalg.norm(channels.h, axis=1)
    if np.any(norms == 0):
        raise DegenerateInputError("MRT direction undefined for an all-zero channel")
    return DirectionSet(channels.h / norms[:, None], "MRT")


def combine_hzm(zf_unit: np.ndarray, mrt_unit: np.ndarray, alphas) -> np.ndarray:
    alphas = np.asarray(alphas, dtype=np.float64)[..., None]
    mixed = alphas * zf_unit + (1.0 - alphas) * mrt_unit
    norms = np.linalg.norm(mixed, axis=-1, keepdims=True)
    if np.any(norms < DEGENERATE_NORM):
        raise DegenerateInputError("hybrid ZF/MRT combination cancels to zero")
    return mixed / norms


def hzm_direction(channels: ChannelSet, alphas) -> DirectionSet:
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.shape != (channels.k_users,):
        raise InvalidInputError(f"need {channels.k_users} hybrid coefficients, got {alphas.shape}")
    if np.any(alphas < 0) or np.any(alphas > 1):
        raise InvalidInputError("hybrid coefficients must lie in [0, 1]")
    zf = zf_directions(channels).dirs
    mrt = mrt_directions(channels).dirs
    return DirectionSet(combine_hzm(zf, mrt, alphas), "HZM", alphas.copy())


def recover_beams(dirs: DirectionSet, powers) -> BeamSolution:
    powers = np.asarray(powers, dtype=np.float64)
    if powers.shape != (dirs.dirs.shape[0],):
        raise InvalidInputError(f"need {dirs.dirs.shape[0]} powers, got shape {powers.shape}")
    if np.any(powers < 0):
        raise InvalidInputError("powers must be non-negative")
    w = np.sqrt(powers)[:, None] * dirs.dirs
    scheme = dirs.scheme if dirs.scheme in ("MMSE", "HZM") else "RAW"
    return BeamSolution(w, powers.copy(), dirs.alphas, scheme)


# batched helpers -----------------------------------------------------------

def batch_mmse_directions(h: np.ndarray, noise_powers: np.ndarray) -> np.ndarray:
    """``h``: (B, K, N), ``noise_powers``: (B, K)."""
    m = np.conj(h) @ np.swapaxes(h, -1, -2)
    idx = np.arange(h.shape[-2])
    m[..., idx, idx] += noise_powers
    return _normalize_rows(np.linalg.solve(np.conj(m), h))


def batch_zf_mrt_directions(h: np.ndarray):
    k_users, n_antennas = h.shape[-2:]
    if k_users > n_antennas:
        raise RankError(f"zero-forcing needs K <= N_T, got K={k_users}, N_T={n_antennas}")
    m = np.conj(h) @ np.swapaxes(h, -1, -2)
    zf = _normalize_rows(np.linalg.solve(np.conj(m), h))
    return zf, _normalize_rows(h)
