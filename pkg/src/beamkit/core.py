"""System model: channels, beams, rates, power and energy efficiency.

Channel layout: ``h`` is a ``(K, N_T)`` complex array whose row ``k`` is the
channel vector ``h_k``.  The effective gain from beam ``w_i`` to user ``k`` is
``conj(h_k) . w_i``.  Beams ``w`` use the same ``(K, N_T)`` layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError, NumericError

TOL_POWER = 1e-9
RATE_TOL = 1e-6

SCHEMES = ("MMSE", "HZM", "RAW")


def _as_vector(values, k_users: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(k_users, float(arr))
    if arr.shape != (k_users,):
        raise InvalidInputError(f"{name} must have length {k_users}, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class SystemConfig:
    p_max: float
    p_circuit: float
    noise_powers: np.ndarray
    rate_floors: np.ndarray

    def __post_init__(self):
        noise = np.atleast_1d(np.asarray(self.noise_powers, dtype=np.float64))
        floors = np.atleast_1d(np.asarray(self.rate_floors, dtype=np.float64))
        if floors.shape != noise.shape:
            raise InvalidInputError(
                f"noise_powers {noise.shape} and rate_floors {floors.shape} differ in length")
        if not self.p_max > 0:
            raise InvalidInputError(f"p_max must be positive, got {self.p_max}")
        if not self.p_circuit >= 0:
            raise InvalidInputError(f"p_circuit must be non-negative, got {self.p_circuit}")
        if not np.all(noise > 0):
            raise InvalidInputError("every noise power must be positive")
        if not np.all(floors >= 0):
            raise InvalidInputError("rate floors must be non-negative")
        object.__setattr__(self, "noise_powers", noise)
        object.__setattr__(self, "rate_floors", floors)

    @classmethod
    def uniform(cls, k_users: int, noise: float, xi: float,
                p_max: float = 1.0, p_circuit: float = 0.5) -> "SystemConfig":
        """Common noise power and rate floor for all ``k_users`` users."""
        return cls(p_max, p_circuit, np.full(k_users, float(noise)), np.full(k_users, float(xi)))

    @property
    def k_users(self) -> int:
        return self.noise_powers.shape[0]

    def permuted(self, perm: Sequence[int]) -> "SystemConfig":
        perm = np.asarray(perm)
        return SystemConfig(self.p_max, self.p_circuit,
                            self.noise_powers[perm], self.rate_floors[perm])


@dataclass(frozen=True)
class ChannelSet:
    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.complex128)
        if h.ndim != 2 or h.shape[0] < 1 or h.shape[1] < 1:
            raise InvalidInputError(f"channel matrix must be K x N_T, got shape {h.shape}")
        if not np.all(np.isfinite(h)):
            raise InvalidInputError("channel matrix has non-finite entries")
        object.__setattr__(self, "h", h)

    @property
    def k_users(self) -> int:
        return self.h.shape[0]

    @property
    def n_antennas(self) -> int:
        return self.h.shape[1]


@dataclass
class BeamSolution:
    w: np.ndarray
    powers: np.ndarray
    alphas: Optional[np.ndarray] = None
    scheme: str = "RAW"

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.complex128)
        self.powers = np.asarray(self.powers, dtype=np.float64)
        if self.alphas is not None:
            self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if self.scheme not in SCHEMES:
            raise InvalidInputError(f"unknown scheme tag {self.scheme!r}")

    @classmethod
    def from_beams(cls, w) -> "BeamSolution":
        w = np.asarray(w, dtype=np.complex128)
        return cls(w, np.sum(np.abs(w) ** 2, axis=1), None, "RAW")


@dataclass
class PerfReport:
    rates: np.ndarray
    total_power: float
    ee: float
    qos_ok: np.ndarray
    feasible: bool
    power_ok: bool = True

    def to_dict(self) -> dict:
        return {
            "rates": self.rates.tolist(),
            "total_power": self.total_power,
            "ee": self.ee,
            "qos_ok": self.qos_ok.tolist(),
            "feasible": bool(self.feasible),
        }


def _beams(beams) -> np.ndarray:
    w = beams.w if isinstance(beams, BeamSolution) else np.asarray(beams, dtype=np.complex128)
    if not np.all(np.isfinite(w)):
        raise InvalidInputError("beamforming vectors have non-finite entries")
    return w


def gain_matrix(h: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``G[k, i] = |h_k^H w_i|^2``."""
    return np.abs(np.conj(h) @ w.T) ** 2


def sinr(channels: ChannelSet, beams, cfg: SystemConfig) -> np.ndarray:
    w = _beams(beams)
    if w.shape != channels.h.shape:
        raise InvalidInputError(f"beams {w.shape} do not match channels {channels.h.shape}")
    g = gain_matrix(channels.h, w)
    signal = np.diag(g)
    interference = g.sum(axis=1) - signal
    return signal / (interference + cfg.noise_powers)


def rates(channels: ChannelSet, beams, cfg: SystemConfig) -> np.ndarray:
    """Achievable rate of every user in bit/s/Hz."""
    return np.log2(1.0 + sinr(channels, beams, cfg))


def rate_k(channels: ChannelSet, beams, cfg: SystemConfig, k: int) -> float:
    if not 0 <= k < channels.k_users:
        raise InvalidInputError(f"user index {k} outside [0, {channels.k_users})")
    return float(rates(channels, beams, cfg)[k])


def total_power(beams, cfg: SystemConfig) -> float:
    w = _beams(beams)
    return float(np.sum(w.real ** 2 + w.imag ** 2) + cfg.p_circuit)


def energy_efficiency(channels: ChannelSet, beams, cfg: SystemConfig) -> float:
    p_total = total_power(beams, cfg)
    if p_total <= 0:
        raise NumericError("total power is zero; energy efficiency undefined")
    return float(np.sum(rates(channels, beams, cfg)) / p_total)


def check_feasibility(channels: ChannelSet, beams, cfg: SystemConfig,
                      rate_tol: float = RATE_TOL) -> PerfReport:
    if rate_tol < 0:
        raise InvalidInputError("rate_tol must be non-negative")
    r = rates(channels, beams, cfg)
    p_total = total_power(beams, cfg)
    qos_ok = r >= cfg.rate_floors - rate_tol
    power_ok = p_total - cfg.p_circuit <= cfg.p_max + TOL_POWER
    ee = float(np.sum(r) / p_total) if p_total > 0 else float("nan")
    return PerfReport(r, p_total, ee, qos_ok, bool(np.all(qos_ok) and power_ok), bool(power_ok))
