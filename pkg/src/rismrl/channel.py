"""BS-RIS (Rician) and RIS-user (Rayleigh) channels with AR(1) time evolution.

Conventions
-----------
* ``h1`` is stored ``N x M`` (RIS rows, BS columns) so that the cascaded
  channel of user ``k`` is ``h2[k] @ diag(phi) @ h1``.
* Path losses are power losses in dB and are applied to both links as the
  amplitude factor ``10 ** (-PL / 20)``.
* Carrier frequency enters the 3GPP formulas in GHz, distances in meters.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .numerics import Rng, draw_cn

__all__ = [
    "SPEED_OF_LIGHT",
    "SystemConfig",
    "ChannelState",
    "ConfigError",
    "table1_config",
    "desk_config",
    "steering_bs",
    "steering_ris",
    "pathloss_bs_ris_db",
    "pathloss_ris_user_db",
    "los_component",
    "draw_h1",
    "draw_h2",
    "initial_state",
    "ar_step",
]

SPEED_OF_LIGHT = 299_792_458.0
PATHLOSS_MODES = ("tr36873", "log_fc")

# stream id reserved for drawing scenario angles
_ANGLE_STREAM = 0xA9
# split ids for the two links inside a draw
_H1_STREAM = 1
_H2_STREAM = 2


class ConfigError(ValueError):
    """Invalid or inconsistent system configuration."""


def _default_nx(n: int) -> int:
    """Smallest divisor of ``n`` that is >= sqrt(n) (near-square UPA)."""
    for d in range(max(1, math.isqrt(n)), n + 1):
        if n % d == 0 and d * d >= n:
            return d
    return n


def draw_angles(scenario_seed: int) -> tuple[float, float, float]:
    """Draw (phi_a, psi_a, phi_d) uniformly from their domains."""
    rng = Rng(scenario_seed).split(_ANGLE_STREAM)
    phi_a = float(rng.uniform(0.0, 2 * math.pi))
    psi_a = float(rng.uniform(-math.pi / 2, math.pi / 2))
    phi_d = float(rng.uniform(0.0, 2 * math.pi))
    return phi_a, psi_a, phi_d


@dataclass(frozen=True)
class SystemConfig:
    """Physical parameters and geometry of one RIS-assisted downlink.

    Defaults follow the reference scenario (M=8, N=32, K=4, P_max=10 W,
    rho=0.95, -174 dBm/Hz, 5 GHz, K_f=3 dB).  Fields left as ``None`` are
    resolved on construction: ``n_x`` to a near-square factor of ``n_ris``,
    ``d_a``/``d_c`` to half a wavelength, ``d_ris_user`` to 20 m per user and
    the angles to the scenario-seed-0 draw.
    """

    m_antennas: int = 8
    n_ris: int = 32
    n_x: int | None = None
    k_users: int = 4
    p_max: float = 10.0
    noise_density: float = -174.0
    bandwidth: float = 10e6
    fc: float = 5e9
    rician_k_db: float = 3.0
    rho: float = 0.95
    d_bs_ris: float = 50.0
    d_ris_user: tuple[float, ...] | None = None
    z_r: float = 10.0
    d_a: float | None = None
    d_c: float | None = None
    phi_a: float | None = None
    psi_a: float | None = None
    phi_d: float | None = None
    pathloss_mode: str = "tr36873"

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        if self.n_x is None and self.n_ris >= 1:
            set_("n_x", _default_nx(int(self.n_ris)))
        half_lambda = self.wavelength / 2 if self.fc > 0 else None
        if self.d_a is None:
            set_("d_a", half_lambda)
        if self.d_c is None:
            set_("d_c", half_lambda)
        if self.d_ris_user is None:
            set_("d_ris_user", (20.0,) * max(int(self.k_users), 0))
        else:
            set_("d_ris_user", tuple(float(d) for d in self.d_ris_user))
        if None in (self.phi_a, self.psi_a, self.phi_d):
            drawn = draw_angles(0)
            for name, value in zip(("phi_a", "psi_a", "phi_d"), drawn):
                if getattr(self, name) is None:
                    set_(name, value)
        self.validate()

    # -- derived quantities -------------------------------------------------
    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.fc

    @property
    def n_y(self) -> int:
        return self.n_ris // self.n_x

    @property
    def rician_k(self) -> float:
        return 10.0 ** (self.rician_k_db / 10.0)

    @property
    def noise_power(self) -> float:
        """Per-user noise power in watts."""
        dbm = self.noise_density + 10.0 * math.log10(self.bandwidth)
        return 10.0 ** ((dbm - 30.0) / 10.0)

    @property
    def obs_dim(self) -> int:
        return 2 * (self.n_ris * self.m_antennas + self.k_users * self.n_ris)

    @property
    def action_dim(self) -> int:
        return 2 * (self.m_antennas * self.k_users + self.n_ris)

    # -- validation and serialization --------------------------------------
    def validate(self) -> None:
        m, n, k = self.m_antennas, self.n_ris, self.k_users
        if min(m, n, k) < 1:
            raise ConfigError("m_antennas, n_ris and k_users must all be >= 1")
        if k > m:
            raise ConfigError(f"zero-forcing needs k_users <= m_antennas (got K={k}, M={m})")
        if self.n_x < 1 or n % self.n_x != 0:
            raise ConfigError(f"n_x={self.n_x} does not divide n_ris={n}")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError("rho must lie in (0, 1)")
        if not self.p_max > 0:
            raise ConfigError("p_max must be positive")
        if not (self.bandwidth > 0 and self.fc > 0):
            raise ConfigError("bandwidth and fc must be positive")
        if len(self.d_ris_user) != k:
            raise ConfigError(f"d_ris_user needs {k} entries, got {len(self.d_ris_user)}")
        dists = (self.d_bs_ris, self.z_r, self.d_a, self.d_c) + tuple(self.d_ris_user)
        if any(not d > 0 for d in dists):
            raise ConfigError("all distances and spacings must be positive")
        two_pi = 2 * math.pi
        if not (0 <= self.phi_a < two_pi and 0 <= self.phi_d < two_pi):
            raise ConfigError("phi_a and phi_d must lie in [0, 2*pi)")
        if not -math.pi / 2 <= self.psi_a < math.pi / 2:
            raise ConfigError("psi_a must lie in [-pi/2, pi/2)")
        if self.pathloss_mode not in PATHLOSS_MODES:
            raise ConfigError(f"pathloss_mode must be one of {PATHLOSS_MODES}")

    def replace(self, **changes) -> "SystemConfig":
        if "n_ris" in changes and "n_x" not in changes:
            changes["n_x"] = None
        if "k_users" in changes and "d_ris_user" not in changes:
            changes["d_ris_user"] = None
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["d_ris_user"] = list(self.d_ris_user)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SystemConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown SystemConfig field(s): {', '.join(unknown)}")
        data = dict(data)
        if data.get("d_ris_user") is not None:
            data["d_ris_user"] = tuple(data["d_ris_user"])
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SystemConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "SystemConfig":
        return cls.from_json(Path(path).read_text())


def table1_config(scenario_seed: int = 0, **overrides) -> SystemConfig:
    """Reference-scenario parameters with scenario angles drawn from ``scenario_seed``."""
    phi_a, psi_a, phi_d = draw_angles(scenario_seed)
    params = dict(phi_a=phi_a, psi_a=psi_a, phi_d=phi_d)
    params.update(overrides)
    return SystemConfig(**params)


def desk_config(scenario_seed: int = 0, **overrides) -> SystemConfig:
    """Small configuration used for learning experiments (M=4, N=8, K=2)."""
    params = dict(m_antennas=4, n_ris=8, k_users=2, rho=0.8)
    params.update(overrides)
    return table1_config(scenario_seed, **params)


@dataclass(frozen=True)
class ChannelState:
    """Channel realization at coherence interval ``t``."""

    h1: np.ndarray  # (N, M)
    h2: np.ndarray  # (K, N)
    t: int = 0

    def __post_init__(self):
        self.h1.setflags(write=False)
        self.h2.setflags(write=False)


# -- deterministic structure -------------------------------------------------

def steering_bs(config: SystemConfig) -> np.ndarray:
    """ULA response at the BS, shape ``(M, 1)``."""
    m = np.arange(config.m_antennas)
    phase = 2 * np.pi * m * config.d_a * math.sin(config.phi_d) / config.wavelength
    return np.exp(1j * phase).reshape(-1, 1)


def steering_ris(config: SystemConfig) -> np.ndarray:
    """UPA response at the RIS, shape ``(N, 1)``.

    Element ``n`` (0-based) sits at row ``n // n_x`` and column ``n % n_x``.
    """
    n = np.arange(config.n_ris)
    i1 = n // config.n_x
    i2 = n % config.n_x
    sa = math.sin(config.phi_a)
    path = i1 * sa * math.sin(config.psi_a) + i2 * sa * math.cos(config.psi_a)
    phase = 2 * np.pi * config.d_c * path / config.wavelength
    return np.exp(1j * phase).reshape(-1, 1)


def pathloss_bs_ris_db(d: float, fc: float, mode: str = "tr36873") -> float:
    if not d > 0:
        raise ValueError("distance must be positive")
    f_ghz = fc / 1e9
    if mode == "tr36873":
        return 22.0 * math.log10(d) + 28.0 + 20.0 * math.log10(f_ghz)
    if mode == "log_fc":
        return 22.0 * math.log10(d) + 28.0 + math.log10(f_ghz)
    raise ValueError(f"unknown path-loss mode {mode!r}")


def pathloss_ris_user_db(d: float, fc: float, z_r: float) -> float:
    if not d > 0:
        raise ValueError("distance must be positive")
    return 36.7 * math.log10(d) + 22.7 + 26.0 * math.log10(fc / 1e9) - 0.3 * (z_r - 1.5)


def los_component(config: SystemConfig) -> np.ndarray:
    """Rank-one LoS matrix ``a_ris @ a_bs^H``, shape ``(N, M)``."""
    return _los_cached(config).copy()


@lru_cache(maxsize=64)
def _los_cached(config: SystemConfig) -> np.ndarray:
    los = steering_ris(config) @ steering_bs(config).conj().T
    los.setflags(write=False)
    return los


def h1_amplitude(config: SystemConfig) -> float:
    return 10.0 ** (-pathloss_bs_ris_db(config.d_bs_ris, config.fc, config.pathloss_mode) / 20.0)


def h2_amplitudes(config: SystemConfig) -> np.ndarray:
    pl = [pathloss_ris_user_db(d, config.fc, config.z_r) for d in config.d_ris_user]
    return 10.0 ** (-np.asarray(pl) / 20.0)


def h1_mean(config: SystemConfig) -> np.ndarray:
    """Deterministic (LoS) part of ``h1``."""
    kf = config.rician_k
    return h1_amplitude(config) * math.sqrt(kf / (kf + 1.0)) * _los_cached(config)


# -- random draws ------------------------------------------------------------

def draw_h1(config: SystemConfig, rng: Rng) -> np.ndarray:
    """Rician BS-RIS channel, shape ``(N, M)``."""
    kf = config.rician_k
    g = draw_cn(rng, config.n_ris, config.m_antennas)
    return h1_mean(config) + h1_amplitude(config) * math.sqrt(1.0 / (kf + 1.0)) * g


def draw_h2(config: SystemConfig, rng: Rng) -> np.ndarray:
    """Rayleigh RIS-user channel, shape ``(K, N)``; row ``k`` uses ``d_ris_user[k]``."""
    g = draw_cn(rng, config.k_users, config.n_ris)
    return h2_amplitudes(config)[:, None] * g


def initial_state(config: SystemConfig, rng: Rng) -> ChannelState:
    return ChannelState(
        h1=draw_h1(config, rng.split(_H1_STREAM)),
        h2=draw_h2(config, rng.split(_H2_STREAM)),
        t=0,
    )


def ar_step(state: ChannelState, config: SystemConfig, rng: Rng) -> ChannelState:
    """Advance both links one coherence interval.

    ``H(t+1) = rho * H(t) + sqrt(1 - rho^2) * H_fresh`` applied to the
    fluctuation around the fixed LoS mean, so the deterministic part of
    ``h1`` does not accumulate and the marginal power stays stationary.
    ``h2`` is zero-mean and follows the recursion as written.
    """
    rho = config.rho
    inno = math.sqrt(1.0 - rho * rho)
    mean1 = h1_mean(config)
    fresh1 = draw_h1(config, rng)
    fresh2 = draw_h2(config, rng)
    h1 = mean1 + rho * (state.h1 - mean1) + inno * (fresh1 - mean1)
    h2 = rho * state.h2 + inno * fresh2
    return ChannelState(h1=h1, h2=h2, t=state.t + 1)
