"""Task-inference meta-RL agent with a nearest-encoding task map.

An encoder turns a context (a set of recent transitions from one task)
into a categorical posterior over ``J`` mixture components and one
Gaussian per component over a latent ``z`` of width ``L``.  A decoder
reconstructs next state and reward from ``(s, a, z)``; encoder and decoder
are trained jointly on the ELBO.  The SAC actor and critics are
conditioned on ``[s, z]``.  After training, the mean evaluation-mode
encoding of every training task is stored; at test time the encoder
output is replaced by the closest stored encoding (Euclidean norm) and
no parameter is updated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..channel import SystemConfig
from ..env import RisEnv, Task, Transition, action_to_policy, policy_to_action
from ..neural import Mlp, Adam, params_checksum
from .buffer import ReplayBuffer
from .sac import SacAgent, SacSettings

__all__ = [
    "LOGVAR_MIN",
    "LOGVAR_MAX",
    "FarmSettings",
    "TaskEncoding",
    "EncoderNets",
    "DecoderNets",
    "ElboTerms",
    "TaskMap",
    "FarmAgent",
    "TrainingDiverged",
    "encoder_infer",
    "decoder_loss",
    "elbo_loss",
    "farm_train",
    "farm_act",
]

LOGVAR_MIN = -10.0
LOGVAR_MAX = 4.0


class TrainingDiverged(FloatingPointError):
    """A loss became non-finite during training."""


@dataclass
class FarmSettings:
    n_components: int = 8
    latent_dim: int = 8
    context_len: int = 32
    alpha_kl: float = 0.1
    beta_kl: float = 0.1
    lr: float = 3e-4
    encoder_hidden: tuple[int, ...] = (128,)
    embed_dim: int = 64
    decoder_hidden: tuple[int, ...] = (128, 128)
    activation: str = "relu"
    tasks_per_batch: int = 8
    decoder_batch: int = 16
    sac_batch: int = 256
    elbo_steps: int = 20
    sac_steps: int = 50
    buffer_capacity: int = 100_000
    relabel_window: int | None = None  # None -> whole buffer
    use_task_map: bool = True
    map_threshold: float = math.inf
    min_context: int = 1
    map_contexts: int = 20
    sac: SacSettings = field(default_factory=SacSettings)


@dataclass(frozen=True)
class TaskEncoding:
    """Component index ``y`` (0-based) and latent ``z``."""

    y: int
    z: np.ndarray
    probs: np.ndarray
    mu: np.ndarray
    logvar: np.ndarray


def transition_features(ctx: dict[str, np.ndarray], reward_scale: float = 1.0) -> np.ndarray:
    """Rows ``[s, a, r, s']`` for a context given as buffer-style arrays."""
    r = np.asarray(ctx["r"], dtype=np.float64)[..., None] * reward_scale
    return np.concatenate([ctx["s"], ctx["a"], r, ctx["s_next"]], axis=-1)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True))


class EncoderNets:
    """Shared per-transition trunk, mean pooling, then component and latent heads."""

    def __init__(self, feature_dim: int, n_components: int, latent_dim: int,
                 rng: np.random.Generator, hidden: Sequence[int] = (128,),
                 embed_dim: int = 64, activation: str = "relu"):
        self.feature_dim = feature_dim
        self.n_components = n_components
        self.latent_dim = latent_dim
        self.trunk = Mlp([feature_dim, *hidden, embed_dim], rng, activation, name="enc_trunk")
        self.y_head = Mlp([embed_dim, n_components], rng, name="enc_y")
        self.z_head = Mlp([embed_dim, 2 * n_components * latent_dim], rng, name="enc_z")
        self._ctx_len = None
        self._lv_mask = None

    def nets(self) -> dict[str, Mlp]:
        return {"enc_trunk": self.trunk, "enc_y": self.y_head, "enc_z": self.z_head}

    def params(self):
        return self.trunk.params() + self.y_head.params() + self.z_head.params()

    def _run(self, ctx: np.ndarray, record: bool):
        ctx = np.asarray(ctx, dtype=np.float64)
        if ctx.ndim == 2:
            ctx = ctx[None]
        n_tasks, c, f = ctx.shape
        if c == 0:
            raise ValueError("empty context")
        run = (lambda net, x: net.forward(x)) if record else (lambda net, x: net.predict(x))
        e = run(self.trunk, ctx.reshape(n_tasks * c, f))
        pooled = e.reshape(n_tasks, c, -1).mean(axis=1)
        logits = run(self.y_head, pooled)
        zp = run(self.z_head, pooled)
        j, l = self.n_components, self.latent_dim
        mu = zp[:, :j * l].reshape(n_tasks, j, l)
        lv_raw = zp[:, j * l:].reshape(n_tasks, j, l)
        if record:
            self._ctx_len = c
            self._lv_mask = (lv_raw >= LOGVAR_MIN) & (lv_raw <= LOGVAR_MAX)
        return logits, mu, np.clip(lv_raw, LOGVAR_MIN, LOGVAR_MAX)

    def forward(self, ctx):
        return self._run(ctx, True)

    def predict(self, ctx):
        return self._run(ctx, False)

    def backward(self, g_logits, g_mu, g_lv) -> None:
        n_tasks = g_logits.shape[0]
        g_zp = np.concatenate([g_mu.reshape(n_tasks, -1),
                               (g_lv * self._lv_mask).reshape(n_tasks, -1)], axis=1)
        g_pooled = self.y_head.backward(g_logits) + self.z_head.backward(g_zp)
        c = self._ctx_len
        g_e = np.repeat(g_pooled[:, None, :] / c, c, axis=1).reshape(n_tasks * c, -1)
        self.trunk.backward(g_e)


class DecoderNets:
    """Mean predictor of ``(s', r)`` from ``[s, a, z]``."""

    def __init__(self, obs_dim: int, act_dim: int, latent_dim: int,
                 rng: np.random.Generator, hidden: Sequence[int] = (128, 128),
                 activation: str = "relu"):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.latent_dim = latent_dim
        self.net = Mlp([obs_dim + act_dim + latent_dim, *hidden, obs_dim + 1], rng, activation, name="dec")

    def nets(self) -> dict[str, Mlp]:
        return {"dec": self.net}

    def params(self):
        return self.net.params()

    def predict(self, s, a, z):
        out = self.net.predict(np.concatenate([s, a, z], axis=-1))
        return out[:, :-1], out[:, -1]


def decoder_loss(dec: DecoderNets, s, a, s_next, r, z) -> float:
    """Batch mean of ``0.5 * ||s_hat - s'||^2 + 0.5 * (r_hat - r)^2``."""
    s_hat, r_hat = dec.predict(np.atleast_2d(s), np.atleast_2d(a), np.atleast_2d(z))
    err_s = s_hat - np.atleast_2d(s_next)
    err_r = r_hat - np.atleast_1d(r)
    return float(np.mean(0.5 * np.sum(err_s * err_s, axis=1) + 0.5 * err_r * err_r))


def kl_normal_std(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """``KL(N(mu, exp(logvar)) || N(0, I))`` summed over the last axis."""
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=-1)


def kl_categorical_uniform(log_q: np.ndarray) -> np.ndarray:
    q = np.exp(log_q)
    return np.sum(q * (log_q + math.log(log_q.shape[-1])), axis=-1)


@dataclass(frozen=True)
class ElboTerms:
    loss: float  # -ELBO, averaged over tasks
    elbo: float
    decoder: float  # posterior-weighted decoder loss
    kl_z: float
    kl_y: float


def elbo_loss(enc: EncoderNets, dec: DecoderNets, ctx: np.ndarray, batch: dict[str, np.ndarray],
              alpha_kl: float, beta_kl: float, eps: np.ndarray, backward: bool = True) -> ElboTerms:
    """Negative ELBO over a batch of tasks, optionally back-propagated.

    Parameters
    ----------
    ctx : array (T, C, F)
        One context per task.
    batch : dict
        ``s``, ``a``, ``s_next`` of shape ``(T, D, .)`` and ``r`` of shape
        ``(T, D)``: transitions of the same tasks to reconstruct.
    eps : array (T, J, L)
        Standard-normal noise for the reparameterized latents.
    backward : bool
        Accumulate ``d(-ELBO)/d(params)`` into encoder and decoder grads.
    """
    logits, mu, lv = enc.forward(ctx)
    n_tasks, j, l = mu.shape
    log_q = _log_softmax(logits)
    q = np.exp(log_q)
    std = np.exp(0.5 * lv)
    z = mu + std * eps

    s, a, s_next, r = batch["s"], batch["a"], batch["s_next"], batch["r"]
    d = s.shape[1]
    sa = np.concatenate([s, a], axis=-1)  # (T, D, .)
    x = np.concatenate([np.broadcast_to(sa[:, None], (n_tasks, j, d, sa.shape[-1])),
                        np.broadcast_to(z[:, :, None, :], (n_tasks, j, d, l))], axis=-1)
    out = dec.net.forward(x.reshape(n_tasks * j * d, -1)).reshape(n_tasks, j, d, -1)
    err_s = out[..., :-1] - s_next[:, None]
    err_r = out[..., -1] - r[:, None]
    l_dec = np.mean(0.5 * np.sum(err_s * err_s, axis=-1) + 0.5 * err_r * err_r, axis=-1)  # (T, J)
    kl_z = kl_normal_std(mu, lv)  # (T, J)
    kl_y = np.sum(q * (log_q + math.log(j)), axis=-1)  # (T,)
    per_comp = -l_dec - alpha_kl * kl_z
    elbo = np.sum(q * per_comp, axis=-1) - beta_kl * kl_y
    terms = ElboTerms(loss=float(-elbo.mean()), elbo=float(elbo.mean()),
                      decoder=float(np.mean(np.sum(q * l_dec, axis=-1))),
                      kl_z=float(np.mean(np.sum(q * kl_z, axis=-1))), kl_y=float(kl_y.mean()))
    if not backward:
        return terms

    inv_t = 1.0 / n_tasks
    g_q = inv_t * (-per_comp + beta_kl * (log_q + math.log(j) + 1.0))
    g_logits = q * (g_q - np.sum(q * g_q, axis=-1, keepdims=True))
    w = (q * inv_t / d)[:, :, None, None]
    g_out = np.concatenate([err_s * w, err_r[..., None] * w], axis=-1)
    g_x = dec.net.backward(g_out.reshape(n_tasks * j * d, -1)).reshape(n_tasks, j, d, -1)
    g_z = g_x[..., -l:].sum(axis=2) if l else np.zeros_like(mu)
    wk = (alpha_kl * q * inv_t)[..., None]
    g_mu = g_z + wk * mu
    g_lv = g_z * eps * 0.5 * std + wk * 0.5 * (np.exp(lv) - 1.0)
    enc.backward(g_logits, g_mu, g_lv)
    return terms


def encoder_infer(enc: EncoderNets, ctx: np.ndarray, rng: np.random.Generator | None = None,
                  evaluate: bool = True) -> TaskEncoding:
    """Encode one context ``(C, F)``.

    Evaluation mode takes the most probable component and its mean;
    training mode samples both (requires ``rng``).
    """
    ctx = np.asarray(ctx, dtype=np.float64)
    if ctx.ndim != 2 or ctx.shape[0] == 0:
        raise ValueError("context must be a non-empty (C, F) array")
    logits, mu, lv = enc.predict(ctx[None])
    probs = np.exp(_log_softmax(logits[0]))
    if evaluate:
        y = int(np.argmax(probs))
        z = mu[0, y].copy()
    else:
        y = int(rng.choice(probs.size, p=probs / probs.sum()))
        z = mu[0, y] + np.exp(0.5 * lv[0, y]) * rng.standard_normal(mu.shape[-1])
    return TaskEncoding(y=y, z=z, probs=probs, mu=mu[0], logvar=lv[0])


class TaskMap:
    """Stored ``(label, encoding)`` pairs with nearest-neighbour lookup."""

    def __init__(self):
        self.labels: list = []
        self.encodings: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.labels)

    def store(self, label, z_hat) -> None:
        z_hat = np.asarray(z_hat, dtype=np.float64).copy()
        if not np.all(np.isfinite(z_hat)):
            raise ValueError("task encodings must be finite")
        self.labels.append(label)
        self.encodings.append(z_hat)

    def nearest(self, z_query) -> tuple[int, float]:
        if not self.labels:
            raise LookupError("task map is empty")
        dist = np.linalg.norm(np.stack(self.encodings) - np.asarray(z_query, dtype=np.float64), axis=1)
        i = int(np.argmin(dist))  # first minimum = earliest insertion
        return i, float(dist[i])

    def lookup(self, z_query) -> np.ndarray:
        i, _ = self.nearest(z_query)
        return self.encodings[i].copy()

    def centroid(self) -> np.ndarray:
        if not self.labels:
            raise LookupError("task map is empty")
        return np.mean(np.stack(self.encodings), axis=0)


class FarmAgent:
    def __init__(self, config: SystemConfig, settings: FarmSettings | None = None, seed: int = 0):
        self.config = config
        self.settings = settings or FarmSettings()
        s = self.settings
        if s.n_components < 1 or s.latent_dim < 0 or s.context_len < 1:
            raise ValueError("invalid FARM settings")
        self.obs_dim = config.obs_dim
        self.act_dim = config.action_dim
        self.rng = np.random.default_rng(seed)
        self.feature_dim = 2 * self.obs_dim + self.act_dim + 1
        self.latent_dim = s.latent_dim
        self.encoder = EncoderNets(self.feature_dim, s.n_components, s.latent_dim, self.rng,
                                   s.encoder_hidden, s.embed_dim, s.activation)
        self.decoder = DecoderNets(self.obs_dim, self.act_dim, s.latent_dim, self.rng,
                                   s.decoder_hidden, s.activation)
        self.repr_opt = Adam(self.encoder.params() + self.decoder.params(), s.lr)
        self.sac = SacAgent(self.obs_dim, self.act_dim, s.latent_dim, s.sac,
                            seed=int(self.rng.integers(2**63)))
        self.task_map = TaskMap()
        self.encoder_version = 0

    @property
    def conditioned(self) -> bool:
        return self.latent_dim > 0

    def networks(self) -> dict[str, Mlp]:
        nets = {}
        nets.update(self.encoder.nets())
        nets.update(self.decoder.nets())
        nets.update(self.sac.networks())
        return nets

    def checksum(self) -> str:
        return params_checksum(self.networks().values()) + f"/{self.sac.log_alpha.value[0]!r}"

    def features(self, ctx: dict[str, np.ndarray]) -> np.ndarray:
        ctx = dict(ctx, a=action_to_policy(ctx["a"], self.config))
        return transition_features(ctx, self.settings.sac.reward_scale)

    def sac_batch(self, batch: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return dict(batch, a=action_to_policy(batch["a"], self.config))

    def infer(self, ctx: dict[str, np.ndarray], evaluate: bool = True) -> TaskEncoding:
        return encoder_infer(self.encoder, self.features(ctx), self.rng, evaluate)

    def latent_for(self, history: Sequence[Transition], evaluate: bool) -> np.ndarray:
        """Latent for acting from an episode's own recent transitions."""
        if not self.conditioned:
            return np.zeros(0)
        s = self.settings
        if len(history) < s.min_context:
            return self.task_map.centroid() if len(self.task_map) else np.zeros(self.latent_dim)
        enc = self.infer(_stack(history[-s.context_len:]), evaluate)
        return enc.z

    def select_latent(self, z_raw: np.ndarray) -> np.ndarray:
        s = self.settings
        if not (s.use_task_map and len(self.task_map)):
            return z_raw
        i, dist = self.task_map.nearest(z_raw)
        return self.task_map.encodings[i].copy() if dist <= s.map_threshold else z_raw


def _stack(history: Sequence[Transition]) -> dict[str, np.ndarray]:
    return {
        "s": np.stack([h.s for h in history]),
        "a": np.stack([h.a for h in history]),
        "r": np.array([h.r for h in history]),
        "s_next": np.stack([h.s_next for h in history]),
    }


def farm_act(agent: FarmAgent, history: Sequence[Transition], obs: np.ndarray) -> np.ndarray:
    """Zero-shot action (physical units) from the recent context and current state.

    No parameter is modified.  With fewer than ``min_context`` transitions
    the task map's centroid encoding is used.
    """
    s = agent.settings
    if agent.conditioned:
        if len(history) < s.min_context:
            z = agent.task_map.centroid() if len(agent.task_map) else np.zeros(agent.latent_dim)
        else:
            z = agent.select_latent(agent.infer(_stack(history[-s.context_len:]), evaluate=True).z)
    else:
        z = None
    u = agent.sac.act(np.asarray(obs, dtype=np.float64), z, deterministic=True)
    return policy_to_action(u, agent.config)


# -- training -------------------------------------------------------------------

@dataclass
class FarmEpochMetrics:
    epoch: int
    elbo: float
    decoder_loss: float
    kl_z: float
    kl_y: float
    critic_loss: float
    actor_loss: float
    alpha: float
    train_return: float


def _check(value: float, what: str, epoch: int) -> float:
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite {what} at epoch {epoch}")
    return value


def rollout_episode(agent: FarmAgent, env: RisEnv, episode: int, buffer: ReplayBuffer | None,
                    explore: bool = True) -> float:
    """Run one episode acting with the latent of the running context; returns mean reward."""
    obs = env.reset(episode)
    history: list[Transition] = []
    total = 0.0
    done = False
    while not done:
        z = agent.latent_for(history, evaluate=not explore)
        if not explore and agent.conditioned:
            z = agent.select_latent(z)
        u = agent.sac.act(obs, z if agent.conditioned else None, deterministic=not explore)
        a = policy_to_action(u, agent.config)
        obs_next, r, done, _ = env.step(a)
        tr = Transition(s=obs, a=a, r=r, s_next=obs_next, task_id=env.task.id, t=env.t - 1, done=done)
        history.append(tr)
        if buffer is not None:
            buffer.add(tr)
        total += r
        obs = obs_next
    return total / env.episode_len


def _representation_step(agent: FarmAgent, buffer: ReplayBuffer) -> object:
    s = agent.settings
    ids = buffer.task_ids()
    pick = agent.rng.choice(len(ids), min(s.tasks_per_batch, len(ids)), replace=False)
    ctxs, parts = [], {"s": [], "a": [], "s_next": [], "r": []}
    c = s.context_len
    for i in pick:
        tid = ids[i]
        pos = buffer.task_indices(tid)
        # a random window of the task's history as context
        start = int(agent.rng.integers(0, max(1, pos.size - c + 1)))
        win = pos[start:start + c]
        if win.size < c:
            win = np.resize(win, c)
        ctxs.append(agent.features(buffer.gather(win)))
        smp = agent.sac_batch(buffer.sample_task(tid, s.decoder_batch, agent.rng))
        for k in parts:
            parts[k].append(smp[k])
    batch = {k: np.stack(v) for k, v in parts.items()}
    batch["r"] = batch["r"] * s.sac.reward_scale
    eps = agent.rng.standard_normal((len(pick), s.n_components, s.latent_dim))
    agent.repr_opt.zero_grad()
    terms = elbo_loss(agent.encoder, agent.decoder, np.stack(ctxs), batch, s.alpha_kl, s.beta_kl, eps)
    agent.repr_opt.step()
    agent.encoder_version += 1
    return terms


def relabel(agent: FarmAgent, buffer: ReplayBuffer) -> None:
    """Annotate recent transitions with fresh ``(y, z)`` from the current encoder."""
    s = agent.settings
    window = buffer.recent_indices(s.relabel_window or buffer.capacity)
    tids = buffer.task_id[window]
    for tid in np.unique(tids):
        sel = window[tids == tid]
        logits, mu, lv = agent.encoder.predict(agent.features(buffer.context(int(tid), s.context_len))[None])
        probs = np.exp(_log_softmax(logits[0]))
        cum = np.cumsum(probs)
        y = np.minimum(np.searchsorted(cum, agent.rng.random(sel.size) * cum[-1], side="right"),
                       probs.size - 1)
        z = mu[0, y] + np.exp(0.5 * lv[0, y]) * agent.rng.standard_normal((sel.size, s.latent_dim))
        buffer.y[sel] = y
        buffer.z[sel] = z
        buffer.z_version[sel] = agent.encoder_version


def build_task_map(agent: FarmAgent, buffer: ReplayBuffer, tasks: Sequence[Task]) -> None:
    """Store each training task's mean evaluation-mode encoding."""
    s = agent.settings
    agent.task_map = TaskMap()
    if not agent.conditioned:
        return
    for task in tasks:
        pos = buffer.task_indices(task.id)
        c = min(s.context_len, pos.size)
        starts = np.linspace(0, pos.size - c, num=min(s.map_contexts, pos.size - c + 1)).astype(int)
        zs = [agent.infer(buffer.gather(pos[st:st + c]), evaluate=True).z for st in starts]
        agent.task_map.store(task.id, np.mean(zs, axis=0))


def farm_train(tasks: Sequence[Task], config: SystemConfig, settings: FarmSettings | None = None,
               epochs: int = 10, episode_len: int = 100, normalize_obs: bool = True, seed: int = 0,
               on_epoch: Callable[[FarmEpochMetrics], None] | None = None,
               agent: FarmAgent | None = None) -> tuple[FarmAgent, list[FarmEpochMetrics]]:
    """Train a FARM agent on a batch of tasks.

    Each epoch: one exploratory episode per task into the replay buffer,
    ``elbo_steps`` encoder/decoder updates, relabeling of buffered
    transitions with the current encoder, then ``sac_steps`` SAC updates.
    The task map is rebuilt at the end.

    Raises
    ------
    TrainingDiverged
        If any loss becomes non-finite.
    """
    agent = agent or FarmAgent(config, settings, seed)
    s = agent.settings
    buffer = ReplayBuffer(s.buffer_capacity, agent.obs_dim, agent.act_dim, s.latent_dim)
    envs = [RisEnv(config, task, episode_len, normalize_obs) for task in tasks]
    history: list[FarmEpochMetrics] = []
    for epoch in range(epochs):
        returns = [rollout_episode(agent, env, epoch, buffer, explore=True) for env in envs]
        terms = None
        if agent.conditioned:
            for _ in range(s.elbo_steps):
                terms = _representation_step(agent, buffer)
                _check(terms.loss, "ELBO", epoch)
            relabel(agent, buffer)
        losses = None
        for _ in range(s.sac_steps):
            batch = buffer.sample(s.sac_batch, agent.rng)
            losses = agent.sac.update(agent.sac_batch(batch))
            _check(losses.critic, "critic loss", epoch)
            _check(losses.actor, "actor loss", epoch)
        m = FarmEpochMetrics(
            epoch=epoch,
            elbo=terms.elbo if terms else 0.0,
            decoder_loss=terms.decoder if terms else 0.0,
            kl_z=terms.kl_z if terms else 0.0,
            kl_y=terms.kl_y if terms else 0.0,
            critic_loss=losses.critic if losses else float("nan"),
            actor_loss=losses.actor if losses else float("nan"),
            alpha=agent.sac.alpha,
            train_return=float(np.mean(returns)),
        )
        history.append(m)
        if on_epoch is not None:
            on_epoch(m)
    build_task_map(agent, buffer, tasks)
    agent.buffer = buffer
    return agent, history
