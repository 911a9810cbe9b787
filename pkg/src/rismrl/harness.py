"""Experiment specs, agent training, evaluation sweeps and CSV reports.

A sweep varies one system parameter (``n_ris`` or ``rho``) and evaluates
every requested method on the same held-out AR trajectories.  Per-timestep
sum rates are averaged over the episode, then over realizations.  Learning
agents are trained on task batches from the training seed namespace and act
zero-shot at evaluation.

Outputs in the run directory:

``results_<name>.csv``
    ``sweep_value, method, mean, std, n``; deterministic for a fixed spec.
``timing_<name>.csv``
    Wall-clock milliseconds per decision (machine dependent).
``metrics_<method>.csv``
    One row per training epoch and sweep value.
``checkpoints/<method>_<sweep>_<value>.npz``
    Trained agents.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .agents import (
    DdpgAgent,
    DdpgSettings,
    FarmAgent,
    FarmSettings,
    SacSettings,
    TaskMap,
    ddpg_train,
    farm_train,
)
from .agents.farm import farm_act
from .baselines import SfpSettings, ZeroForcingError, sfp_policy, zfr_policy
from .channel import SystemConfig, desk_config, table1_config
from .env import EVAL_NAMESPACE, TRAIN_NAMESPACE, RisEnv, Transition, make_task_batch, policy_to_action
from .neural import load_params, save_params
from .numerics import Rng

METHODS = ("ZFR", "SFP", "DDPG", "SAC", "FARM", "FARM_nomap")
LEARNED = ("DDPG", "SAC", "FARM", "FARM_nomap")
SWEEPS = ("n_ris", "rho")
REPORT_COLUMNS = ("sweep_value", "method", "mean", "std", "n")

_POLICY_STREAM = 2  # per-step randomness of classical methods, next to the task streams
_AGENT_SEED_STREAM = 3
_ZF_RETRIES = 8


class SpecError(ValueError):
    """Invalid experiment specification."""


class MissingCheckpointError(FileNotFoundError):
    """A learning method was requested without a trained checkpoint."""


class ConstraintViolation(RuntimeError):
    """An evaluated decision broke the power or unit-modulus constraint."""


@dataclass
class TrainSpec:
    """Training budget shared by the learning methods."""

    tasks: int = 10
    epochs: int = 30
    updates_per_epoch: int = 250
    hidden: tuple[int, ...] = (128, 128)
    gamma: float = 0.0
    reward_scale: float = 10.0
    episode_len: int = 100
    n_components: int = 8
    latent_dim: int = 8
    context_len: int = 32
    elbo_steps: int = 20
    normalize_obs: bool = True

    def farm_settings(self, latent: bool = True) -> FarmSettings:
        sac = SacSettings(hidden=tuple(self.hidden), gamma=self.gamma, reward_scale=self.reward_scale)
        return FarmSettings(n_components=self.n_components if latent else 1,
                            latent_dim=self.latent_dim if latent else 0,
                            context_len=self.context_len, elbo_steps=self.elbo_steps,
                            sac_steps=self.updates_per_epoch, sac=sac)

    def ddpg_settings(self) -> DdpgSettings:
        return DdpgSettings(hidden=tuple(self.hidden), gamma=self.gamma, reward_scale=self.reward_scale,
                            updates_per_epoch=self.updates_per_epoch)


@dataclass
class ExperimentSpec:
    name: str
    config: SystemConfig
    sweep: str
    values: tuple
    methods: tuple[str, ...]
    realizations: int = 20
    master_seed: int = 0
    episode_len: int = 100
    train: TrainSpec = field(default_factory=TrainSpec)
    sfp: SfpSettings = field(default_factory=SfpSettings)

    def __post_init__(self):
        self.values = tuple(self.values)
        self.methods = tuple(self.methods)
        self.validate()

    def validate(self) -> None:
        if not self.name or any(c in self.name for c in "/\\"):
            raise SpecError("name must be a non-empty file-name-safe string")
        if self.sweep not in SWEEPS:
            raise SpecError(f"sweep must be one of {SWEEPS}, got {self.sweep!r}")
        if not self.values:
            raise SpecError("sweep values must be non-empty")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise SpecError("sweep values must be strictly increasing")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise SpecError(f"unknown method(s) {bad}; choose from {METHODS}")
        if self.realizations < 1:
            raise SpecError("realizations must be >= 1")
        if self.episode_len < 1:
            raise SpecError("episode_len must be >= 1")
        if self.master_seed < 0:
            raise SpecError("master_seed must be non-negative")
        for v in self.values:
            self.config_at(v)  # raises ConfigError on infeasible points

    def config_at(self, value) -> SystemConfig:
        if self.sweep == "n_ris":
            if int(value) != value:
                raise SpecError("n_ris sweep values must be integers")
            return self.config.replace(n_ris=int(value))
        return self.config.replace(rho=float(value))

    def to_dict(self) -> dict:
        return {
            "name": self.name, "config": self.config.to_dict(), "sweep": self.sweep,
            "values": list(self.values), "methods": list(self.methods),
            "realizations": self.realizations, "master_seed": self.master_seed,
            "episode_len": self.episode_len, "train": dataclasses.asdict(self.train),
            "sfp": dataclasses.asdict(self.sfp),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict, base: SystemConfig | None = None) -> "ExperimentSpec":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise SpecError(f"unknown spec field(s): {', '.join(unknown)}")
        for key in ("name", "sweep", "values", "methods"):
            if key not in data:
                raise SpecError(f"spec is missing {key!r}")
        cfg = data.get("config")
        if isinstance(cfg, dict):
            data["config"] = SystemConfig.from_dict(cfg)
        elif cfg is None:
            data["config"] = base or desk_config()
        data["train"] = _dataclass_from(TrainSpec, data.get("train", {}))
        data["sfp"] = _dataclass_from(SfpSettings, data.get("sfp", {}))
        return cls(**data)

    @classmethod
    def from_json(cls, text: str, base: SystemConfig | None = None) -> "ExperimentSpec":
        return cls.from_dict(json.loads(text), base)

    @classmethod
    def load(cls, path, base: SystemConfig | None = None) -> "ExperimentSpec":
        return cls.from_json(Path(path).read_text(), base)


def _dataclass_from(kind, data: dict):
    known = {f.name for f in dataclasses.fields(kind)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise SpecError(f"unknown {kind.__name__} field(s): {', '.join(unknown)}")
    data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return kind(**data)


def preset_spec(preset: str, master_seed: int = 0) -> ExperimentSpec:
    """Default sweeps: ``desk`` over rho with all methods, ``table1`` over N (classical)."""
    if preset == "desk":
        return ExperimentSpec("desk_rho", desk_config(), "rho", (0.8, 0.9, 0.99),
                              METHODS, realizations=20, master_seed=master_seed)
    if preset == "table1":
        return ExperimentSpec("table1_nris", table1_config(), "n_ris", (16, 32, 64),
                              ("ZFR", "SFP"), realizations=100, master_seed=master_seed)
    raise SpecError(f"unknown preset {preset!r}")


@dataclass(frozen=True)
class ResultRow:
    method: str
    sweep_value: float
    mean: float
    std: float
    n: int
    ms_per_decision: float = float("nan")


# -- checkpoints -----------------------------------------------------------------

def _settings_dict(settings) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(settings)))


def _farm_settings_from(d: dict) -> FarmSettings:
    d = dict(d)
    d["sac"] = _dataclass_from(SacSettings, d["sac"])
    if d.get("map_threshold") is None:
        d["map_threshold"] = math.inf
    return _dataclass_from(FarmSettings, d)


def save_agent(path, agent, config: SystemConfig) -> None:
    """Write a FARM/SAC or DDPG agent (networks, task map, config) to one ``.npz``."""
    if isinstance(agent, FarmAgent):
        s = _settings_dict(agent.settings)
        if math.isinf(agent.settings.map_threshold):
            s["map_threshold"] = None
        meta = {"kind": "farm", "config": config.to_dict(), "settings": s,
                "map_labels": [int(x) for x in agent.task_map.labels]}
        extra = {"log_alpha": agent.sac.log_alpha.value,
                 "map": np.stack(agent.task_map.encodings) if len(agent.task_map)
                 else np.zeros((0, agent.latent_dim))}
        save_params(path, agent.networks(), meta, extra)
    elif isinstance(agent, DdpgAgent):
        meta = {"kind": "ddpg", "config": config.to_dict(), "settings": _settings_dict(agent.settings)}
        save_params(path, agent.networks(), meta)
    else:
        raise TypeError(f"cannot checkpoint {type(agent).__name__}")


def load_agent(path):
    """Inverse of :func:`save_agent`; returns ``(agent, config)``."""
    nets, meta, extra = load_params(path)
    config = SystemConfig.from_dict(meta["config"])
    if meta["kind"] == "farm":
        agent = FarmAgent(config, _farm_settings_from(meta["settings"]))
        for key, net in agent.networks().items():
            net.copy_from(nets[key])
        agent.sac.log_alpha.value[...] = extra["log_alpha"]
        agent.task_map = TaskMap()
        for label, z in zip(meta["map_labels"], extra["map"]):
            agent.task_map.store(label, z)
    elif meta["kind"] == "ddpg":
        agent = DdpgAgent(config.obs_dim, config.action_dim, _dataclass_from(DdpgSettings, meta["settings"]))
        for key, net in agent.networks().items():
            net.copy_from(nets[key])
    else:
        raise ValueError(f"unknown checkpoint kind {meta['kind']!r}")
    return agent, config


def _value_tag(value) -> str:
    return repr(float(value)) if not float(value).is_integer() else str(int(value))


def checkpoint_path(run_dir, method: str, sweep: str, value) -> Path:
    # FARM_nomap evaluates the FARM checkpoint with mapping disabled
    kind = "FARM" if method == "FARM_nomap" else method
    return Path(run_dir) / "checkpoints" / f"{kind}_{sweep}_{_value_tag(value)}.npz"


# -- training --------------------------------------------------------------------

def agent_seed(master_seed: int, method: str, value_index: int) -> int:
    ss = np.random.SeedSequence(entropy=master_seed,
                                spawn_key=(_AGENT_SEED_STREAM, METHODS.index(method), value_index))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def train_method(method: str, config: SystemConfig, train: TrainSpec, master_seed: int,
                 value_index: int = 0, on_epoch: Callable | None = None):
    """Train one learning method on a fresh training task batch; returns ``(agent, history)``."""
    tasks = make_task_batch(master_seed, train.tasks, config, TRAIN_NAMESPACE)
    seed = agent_seed(master_seed, method, value_index)
    common = dict(epochs=train.epochs, episode_len=train.episode_len,
                  normalize_obs=train.normalize_obs, seed=seed, on_epoch=on_epoch)
    if method == "DDPG":
        return ddpg_train(tasks, config, train.ddpg_settings(), **common)
    if method in ("FARM", "FARM_nomap"):
        return farm_train(tasks, config, train.farm_settings(latent=True), **common)
    if method == "SAC":
        return farm_train(tasks, config, train.farm_settings(latent=False), **common)
    raise SpecError(f"{method} is not a learning method")


def _metric_row(m) -> dict:
    return {k: (repr(float(v)) if isinstance(v, float) else v) for k, v in dataclasses.asdict(m).items()}


def train_agents(spec: ExperimentSpec, run_dir, log: Callable[[str], None] | None = None) -> list[Path]:
    """Train every learning method of ``spec`` at every sweep value.

    Writes checkpoints and one ``metrics_<method>.csv`` per method (one row
    per epoch and sweep value).
    """
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    kinds = []
    for m in spec.methods:
        kind = "FARM" if m == "FARM_nomap" else m
        if m in LEARNED and kind not in kinds:
            kinds.append(kind)
    written = []
    for method in kinds:
        rows = []
        for vi, value in enumerate(spec.values):
            cfg = spec.config_at(value)
            agent, history = train_method(method, cfg, spec.train, spec.master_seed, vi)
            for m in history:
                rows.append({"sweep_value": _value_tag(value), **_metric_row(m)})
            path = checkpoint_path(run_dir, method, spec.sweep, value)
            save_agent(path, agent, cfg)
            written.append(path)
            if log:
                log(f"trained {method} at {spec.sweep}={value}: final train return "
                    f"{history[-1].train_return:.4f}")
        with open(run_dir / f"metrics_{method}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    return written


# -- evaluation ------------------------------------------------------------------

@dataclass
class EpisodeResult:
    mean_rate: float
    seconds: float
    decisions: int
    violations: int


def _classical_step(method: str, env: RisEnv, rng: Rng, sfp: SfpSettings):
    if method == "SFP":
        res = sfp_policy(env.state, sfp, env.config, rng)
        return res.w, res.phase
    for attempt in range(_ZF_RETRIES):
        try:
            return zfr_policy(env.state, rng.split(attempt) if attempt else rng, env.config)
        except ZeroForcingError:
            continue
    raise ZeroForcingError(f"no invertible effective channel after {_ZF_RETRIES} phase draws")


def _learned_policy(method: str, agent, config: SystemConfig):
    """Return ``act(history, obs) -> physical action``."""
    if isinstance(agent, DdpgAgent):
        return lambda history, obs: policy_to_action(agent.act(obs), config)
    if method == "FARM_nomap":
        def act(history, obs):
            saved = agent.settings.use_task_map
            agent.settings.use_task_map = False
            try:
                return farm_act(agent, history, obs)
            finally:
                agent.settings.use_task_map = saved
        return act
    return lambda history, obs: farm_act(agent, history, obs)


def evaluate_episode(method: str, config: SystemConfig, task, episode_len: int, master_seed: int,
                     sfp: SfpSettings | None = None, agent=None, normalize_obs: bool = True) -> EpisodeResult:
    """Run one evaluation episode; classical methods re-solve every step."""
    sfp = sfp or SfpSettings()
    env = RisEnv(config, task, episode_len, normalize_obs)
    obs = env.reset(0)
    history: list[Transition] = []
    policy = _learned_policy(method, agent, config) if method in LEARNED else None
    stream = Rng(master_seed, (EVAL_NAMESPACE, task.id, _POLICY_STREAM))
    rates, seconds, violations = [], 0.0, 0
    while not env.done:
        t0 = time.perf_counter()
        if policy is None:
            w, phase = _classical_step(method, env, stream.split(env.t), sfp)
            seconds += time.perf_counter() - t0
            obs_next, r, _, info = env.step_design(w, phase)
        else:
            a = policy(history, obs)
            seconds += time.perf_counter() - t0
            obs_next, r, _, info = env.step(a)
            history.append(Transition(s=obs, a=a, r=r, s_next=obs_next, task_id=task.id, t=env.t - 1))
        violations += int(not info["power_ok"]) + int(not info["modulus_ok"])
        rates.append(r)
        obs = obs_next
    return EpisodeResult(float(np.mean(rates)), seconds, episode_len, violations)


def _load_for(method: str, spec: ExperimentSpec, value, run_dir, agents: dict | None):
    key = (method if method != "FARM_nomap" else "FARM", value)
    if agents is not None and key in agents:
        agent = agents[key]
    else:
        path = checkpoint_path(run_dir, method, spec.sweep, value) if run_dir is not None else None
        if path is None or not path.exists():
            raise MissingCheckpointError(f"no checkpoint for {method} at {spec.sweep}={value} "
                                         f"(expected {path}); run 'train' first")
        agent, _ = load_agent(path)
    cfg = spec.config_at(value)
    dims = (agent.obs_dim, agent.act_dim)
    if dims != (cfg.obs_dim, cfg.action_dim):
        raise SpecError(f"checkpoint for {method} does not match {spec.sweep}={value}")
    return agent


def run_sweep(spec: ExperimentSpec, run_dir=None, threads: int = 1, agents: dict | None = None,
              log: Callable[[str], None] | None = None) -> list[ResultRow]:
    """Evaluate every (method, sweep value) cell on held-out trajectories.

    Parameters
    ----------
    agents : dict, optional
        ``{(method, value): agent}`` for in-memory agents; otherwise learning
        methods load checkpoints from ``run_dir``.
    threads : int
        Realizations of a cell run on a thread pool; aggregation order is the
        realization index.

    Raises
    ------
    MissingCheckpointError, ConstraintViolation
    """
    rows = []
    for value in spec.values:
        cfg = spec.config_at(value)
        tasks = make_task_batch(spec.master_seed, spec.realizations, cfg, EVAL_NAMESPACE)
        for method in spec.methods:
            agent = _load_for(method, spec, value, run_dir, agents) if method in LEARNED else None
            normalize = spec.train.normalize_obs

            def one(task, method=method, agent=agent):
                return evaluate_episode(method, cfg, task, spec.episode_len, spec.master_seed,
                                        spec.sfp, agent, normalize)

            if threads > 1 and method not in LEARNED:
                with ThreadPoolExecutor(threads) as pool:
                    results = list(pool.map(one, tasks))
            else:
                # agents keep per-call scratch state; evaluate them serially
                results = [one(task) for task in tasks]
            bad = sum(r.violations for r in results)
            if bad:
                raise ConstraintViolation(f"{method} at {spec.sweep}={value}: {bad} constraint violations")
            means = np.array([r.mean_rate for r in results])
            ms = 1e3 * sum(r.seconds for r in results) / sum(r.decisions for r in results)
            rows.append(ResultRow(method, float(value), float(means.mean()),
                                  float(means.std(ddof=1)) if means.size > 1 else 0.0, int(means.size), ms))
            if log:
                log(f"{method:>10s} {spec.sweep}={value}: {means.mean():.4f} bits/s/Hz ({ms:.2f} ms/decision)")
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_report(rows, run_dir / f"results_{spec.name}.csv")
        write_timing(rows, run_dir / f"timing_{spec.name}.csv")
    return rows


# -- reports ---------------------------------------------------------------------

def _sorted(rows: Sequence[ResultRow]) -> list[ResultRow]:
    order = {m: i for i, m in enumerate(METHODS)}
    return sorted(rows, key=lambda r: (r.sweep_value, order.get(r.method, len(order)), r.method))


def report_csv(rows: Sequence[ResultRow]) -> str:
    """Plot-ready CSV text with a deterministic row order and round-trip floats."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in _sorted(rows):
        writer.writerow([repr(r.sweep_value), r.method, repr(r.mean), repr(r.std), r.n])
    return buf.getvalue()


def write_report(rows: Sequence[ResultRow], path) -> Path:
    path = Path(path)
    path.write_text(report_csv(rows))
    return path


def write_timing(rows: Sequence[ResultRow], path) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("sweep_value", "method", "ms_per_decision"))
    for r in _sorted(rows):
        writer.writerow([repr(r.sweep_value), r.method, f"{r.ms_per_decision:.4f}"])
    Path(path).write_text(buf.getvalue())
    return Path(path)


def read_report(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return [ResultRow(r["method"], float(r["sweep_value"]), float(r["mean"]), float(r["std"]), int(r["n"]))
                for r in reader]


def format_table(rows: Sequence[ResultRow]) -> str:
    """Human-readable table: one line per sweep value, one column per method."""
    rows = _sorted(rows)
    methods = [m for m in METHODS if any(r.method == m for r in rows)]
    values = sorted({r.sweep_value for r in rows})
    cell = {(r.sweep_value, r.method): r for r in rows}
    lines = ["value".rjust(8) + "".join(m.rjust(12) for m in methods)]
    for v in values:
        parts = [f"{v:8g}"]
        for m in methods:
            r = cell.get((v, m))
            parts.append(f"{r.mean:12.4f}" if r else " " * 11 + "-")
        lines.append("".join(parts))
    return "\n".join(lines)
