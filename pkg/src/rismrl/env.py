"""The downlink design problem as an episodic MDP.

State: real/imag parts of ``vec(H1)`` and ``vec(H2)`` (column-major vec).
Action: real/imag parts of ``vec(W)`` followed by real/imag parts of the
RIS reflection vector.  Reward: sum rate of the decoded design on the
channel the agent observed; the channel then moves one AR(1) step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .channel import ChannelState, SystemConfig, ar_step, h1_amplitude, h2_amplitudes, initial_state
from .link import LinkReport, PhaseShift, evaluate, project_power, project_unit_modulus
from .numerics import Rng

__all__ = [
    "TRAIN_NAMESPACE",
    "EVAL_NAMESPACE",
    "EpisodeDone",
    "Task",
    "Transition",
    "RisEnv",
    "encode_state",
    "decode_state",
    "encode_action",
    "decode_action",
    "policy_to_action",
    "action_to_policy",
    "reward",
    "make_task_batch",
    "EpisodeLog",
]

# stream-id namespaces keep training and evaluation trajectories disjoint
TRAIN_NAMESPACE = 1
EVAL_NAMESPACE = 2

POWER_TOL = 1e-9
MODULUS_TOL = 1e-12


class EpisodeDone(RuntimeError):
    """``step`` was called on a finished episode."""


@dataclass(frozen=True)
class Task:
    """One CSI trajectory source: an initial realization plus its private AR stream."""

    id: int
    seed: int
    namespace: int
    initial: ChannelState
    rho: float

    def stream(self, episode: int) -> Rng:
        return Rng(self.seed, (self.namespace, self.id, 1, int(episode)))


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    task_id: int
    t: int
    done: bool = False
    y: int | None = None
    z: np.ndarray | None = None


def make_task_batch(master_seed: int, count: int, config: SystemConfig,
                    namespace: int = TRAIN_NAMESPACE) -> list[Task]:
    """``count`` tasks with ids ``0..count-1`` and independent streams."""
    tasks = []
    for i in range(count):
        rng = Rng(master_seed, (namespace, i, 0))
        tasks.append(Task(id=i, seed=master_seed, namespace=namespace,
                          initial=initial_state(config, rng), rho=config.rho))
    return tasks


def encode_state(state: ChannelState, config: SystemConfig | None = None,
                 normalize: bool = False) -> np.ndarray:
    """Flatten ``(H1, H2)`` to ``[Re vec H1, Im vec H1, Re vec H2, Im vec H2]``.

    With ``normalize=True`` (requires ``config``) each link is divided by its
    path-loss amplitude so entries are O(1).
    """
    h1, h2 = state.h1, state.h2
    if normalize:
        if config is None:
            raise ValueError("normalization needs the system config")
        h1 = h1 / h1_amplitude(config)
        h2 = h2 / h2_amplitudes(config)[:, None]
    v1 = h1.ravel(order="F")
    v2 = h2.ravel(order="F")
    return np.concatenate([v1.real, v1.imag, v2.real, v2.imag])


def decode_state(obs: np.ndarray, config: SystemConfig) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`encode_state` without normalization."""
    n, m, k = config.n_ris, config.m_antennas, config.k_users
    obs = np.asarray(obs, dtype=np.float64)
    if obs.size != config.obs_dim:
        raise ValueError(f"observation length {obs.size} != {config.obs_dim}")
    nm = n * m
    h1 = (obs[:nm] + 1j * obs[nm:2 * nm]).reshape((n, m), order="F")
    rest = obs[2 * nm:]
    kn = k * n
    h2 = (rest[:kn] + 1j * rest[kn:]).reshape((k, n), order="F")
    return h1, h2


def encode_action(w: np.ndarray, phi: np.ndarray) -> np.ndarray:
    vw = np.asarray(w, dtype=np.complex128).ravel(order="F")
    phi = np.asarray(phi, dtype=np.complex128).ravel()
    return np.concatenate([vw.real, vw.imag, phi.real, phi.imag])


def decode_action(a: np.ndarray, config: SystemConfig) -> tuple[np.ndarray, PhaseShift]:
    """Map an action vector to a feasible ``(W, PhaseShift)``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    if a.size != config.action_dim:
        raise ValueError(f"action length {a.size} != {config.action_dim}")
    m, k, n = config.m_antennas, config.k_users, config.n_ris
    mk = m * k
    w_raw = (a[:mk] + 1j * a[mk:2 * mk]).reshape((m, k), order="F")
    phi_raw = a[2 * mk:2 * mk + n] + 1j * a[2 * mk + n:]
    return project_power(w_raw, config.p_max), project_unit_modulus(phi_raw)


def policy_to_action(u: np.ndarray, config: SystemConfig) -> np.ndarray:
    """Affine map from a squashed policy output in (-1, 1) to the action vector.

    Beamformer components scale by ``sqrt(P_max / (2 M K))`` so the box
    corner sits exactly on the power budget; reflection components pass
    through (only their phase is used).
    """
    u = np.asarray(u, dtype=np.float64)
    out = u.copy()
    mk2 = 2 * config.m_antennas * config.k_users
    out[..., :mk2] *= math.sqrt(config.p_max / mk2)
    return out


def action_to_policy(a: np.ndarray, config: SystemConfig) -> np.ndarray:
    """Inverse of :func:`policy_to_action`."""
    out = np.array(a, dtype=np.float64)
    mk2 = 2 * config.m_antennas * config.k_users
    out[..., :mk2] /= math.sqrt(config.p_max / mk2)
    return out


def reward(state: ChannelState, w: np.ndarray, phase: PhaseShift, config: SystemConfig) -> float:
    return evaluate(state, w, phase, config.noise_power).sum_rate


class RisEnv:
    """Single-owner episodic environment over one :class:`Task`.

    Parameters
    ----------
    config : SystemConfig
    task : Task
    episode_len : int
        Steps per episode.
    normalize_obs : bool
        Divide observed channels by their path-loss amplitudes.
    """

    def __init__(self, config: SystemConfig, task: Task, episode_len: int = 100,
                 normalize_obs: bool = False):
        if episode_len < 1:
            raise ValueError("episode_len must be >= 1")
        self.config = config
        self.task = task
        self.episode_len = episode_len
        self.normalize_obs = normalize_obs
        self.obs_dim = config.obs_dim
        self.action_dim = config.action_dim
        assert self.obs_dim == 2 * (config.n_ris * config.m_antennas + config.k_users * config.n_ris)
        assert self.action_dim == 2 * (config.m_antennas * config.k_users + config.n_ris)
        self.state: ChannelState | None = None
        self.t = 0
        self.done = True
        self._rng: Rng | None = None

    def observe(self, state: ChannelState | None = None) -> np.ndarray:
        return encode_state(state if state is not None else self.state,
                            self.config, self.normalize_obs)

    def reset(self, episode: int = 0) -> np.ndarray:
        self.state = self.task.initial
        self._rng = self.task.stream(episode)
        self.t = 0
        self.done = False
        return self.observe()

    def step_design(self, w: np.ndarray, phase: PhaseShift):
        """Score an explicit design on the current channel, then advance it."""
        if self.done:
            raise EpisodeDone("episode finished; call reset()")
        report = evaluate(self.state, w, phase, self.config.noise_power)
        info = {
            "report": report,
            "state": self.state,
            "power_ok": report.tx_power <= self.config.p_max + POWER_TOL,
            "modulus_ok": bool(np.all(np.abs(np.abs(phase.phi) - 1.0) <= MODULUS_TOL)),
        }
        self.state = ar_step(self.state, self.config, self._rng.split(self.t))
        self.t += 1
        self.done = self.t >= self.episode_len
        return self.observe(), report.sum_rate, self.done, info

    def step(self, a: np.ndarray):
        w, phase = decode_action(a, self.config)
        return self.step_design(w, phase)


class EpisodeLog:
    """Streams per-step records to CSV: task_id, t, reward, tx_power, sinr_1..K."""

    def __init__(self, path, k_users: int):
        self.k_users = k_users
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(["task_id", "t", "reward", "tx_power"]
                              + [f"sinr_{i + 1}" for i in range(k_users)])

    def write(self, task_id: int, t: int, report: LinkReport) -> None:
        self._writer.writerow([task_id, t, repr(report.sum_rate), repr(report.tx_power)]
                              + [repr(float(s)) for s in report.sinr])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
