"""Evaluation of a beamformer / phase-shift design on a channel realization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelState
from .numerics import DimensionError, as_cmatrix

__all__ = [
    "PhaseShift",
    "LinkReport",
    "effective_channel",
    "sinr_per_user",
    "signal_interference",
    "rates",
    "project_power",
    "normalize_power",
    "project_unit_modulus",
    "evaluate",
]

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class PhaseShift:
    """RIS phases ``theta`` in ``[0, 2*pi)``."""

    theta: np.ndarray

    def __post_init__(self):
        theta = np.mod(np.asarray(self.theta, dtype=np.float64).ravel(), TWO_PI)
        # mod can return exactly 2*pi for tiny negative inputs
        theta[theta >= TWO_PI] = 0.0
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def phi(self) -> np.ndarray:
        return np.exp(1j * self.theta)

    def __len__(self) -> int:
        return self.theta.size


@dataclass(frozen=True)
class LinkReport:
    sinr: np.ndarray
    rate: np.ndarray
    sum_rate: float
    tx_power: float


def effective_channel(state: ChannelState, phase: PhaseShift) -> np.ndarray:
    """Cascaded channel ``H2 @ diag(phi) @ H1``, shape ``(K, M)``."""
    h1, h2 = state.h1, state.h2
    if h2.shape[1] != h1.shape[0] or len(phase) != h1.shape[0]:
        raise DimensionError(
            f"inconsistent shapes: h1 {h1.shape}, h2 {h2.shape}, theta {len(phase)}"
        )
    return (h2 * phase.phi) @ h1


def signal_interference(h_eff: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-user desired and interference powers."""
    h_eff = as_cmatrix(h_eff)
    w = as_cmatrix(w)
    if h_eff.shape[1] != w.shape[0] or h_eff.shape[0] != w.shape[1]:
        raise DimensionError(f"h_eff {h_eff.shape} incompatible with W {w.shape}")
    gains = np.abs(h_eff @ w) ** 2
    signal = np.diag(gains).copy()
    interference = gains.sum(axis=1) - signal
    return signal, np.maximum(interference, 0.0)


def sinr_per_user(h_eff: np.ndarray, w: np.ndarray, noise: float) -> np.ndarray:
    if not noise >= 0:
        raise ValueError("noise power must be non-negative")
    signal, interference = signal_interference(h_eff, w)
    return signal / (interference + noise)


def rates(sinr) -> tuple[np.ndarray, float]:
    sinr = np.asarray(sinr, dtype=np.float64)
    if np.any(sinr < 0) or not np.all(np.isfinite(sinr)):
        raise ValueError("SINR values must be finite and non-negative")
    r = np.log2(1.0 + sinr)
    return r, float(r.sum())


def tx_power(w: np.ndarray) -> float:
    return float(np.sum(np.abs(w) ** 2))


def project_power(w_raw, p_max: float) -> np.ndarray:
    """Scale ``W`` down onto ``trace(W^H W) <= p_max``; feasible input is returned as is."""
    w = as_cmatrix(w_raw)
    power = tx_power(w)
    if power <= p_max:
        return w
    w = w * np.sqrt(p_max / power)
    # guard the last ulp so the constraint can never read as violated
    while tx_power(w) > p_max:
        w = w * (1.0 - 1e-15)
    return w


def normalize_power(w_raw, p_max: float) -> np.ndarray:
    """Scale ``W`` so that ``trace(W^H W) == p_max``."""
    w = as_cmatrix(w_raw)
    power = tx_power(w)
    if power == 0:
        raise ValueError("cannot normalize an all-zero beamformer")
    return w * np.sqrt(p_max / power)


def project_unit_modulus(phi_raw) -> PhaseShift:
    """Keep only the phase of each reflection coefficient; zeros map to ``theta = 0``."""
    phi = np.asarray(phi_raw, dtype=np.complex128).ravel()
    return PhaseShift(np.where(phi == 0, 0.0, np.angle(phi)))


def evaluate(state: ChannelState, w: np.ndarray, phase: PhaseShift, noise: float) -> LinkReport:
    sinr = sinr_per_user(effective_channel(state, phase), w, noise)
    r, total = rates(sinr)
    return LinkReport(sinr=sinr, rate=r, sum_rate=total, tx_power=tx_power(w))
