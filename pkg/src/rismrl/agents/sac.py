"""Soft actor-critic with twin critics, target networks and a learned temperature.

The actor and critics see ``[s, z]``; with ``latent_dim == 0`` the
conditioning vector is empty and this is plain SAC.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..neural import Adam, Mlp, ParamTensor, TanhGaussian, polyak_update


@dataclass
class SacSettings:
    hidden: tuple[int, ...] = (256, 256)
    lr: float = 3e-4
    gamma: float = 0.99
    tau: float = 0.005
    init_alpha: float = 0.1
    target_entropy: float | None = None  # defaults to -act_dim
    reward_scale: float = 1.0


@dataclass
class SacLosses:
    critic: float
    actor: float
    alpha: float
    entropy: float


class SacAgent:
    def __init__(self, obs_dim: int, act_dim: int, latent_dim: int = 0,
                 settings: SacSettings | None = None, seed: int = 0):
        self.settings = settings or SacSettings()
        s = self.settings
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.latent_dim = latent_dim
        self.rng = np.random.default_rng(seed)
        x_dim = obs_dim + latent_dim
        hid = list(s.hidden)
        self.policy = Mlp([x_dim, *hid, act_dim], self.rng, head="gaussian", name="policy")
        self.q1 = Mlp([x_dim + act_dim, *hid, 1], self.rng, name="q1")
        self.q2 = Mlp([x_dim + act_dim, *hid, 1], self.rng, name="q2")
        self.q1_target = Mlp([x_dim + act_dim, *hid, 1], self.rng, name="q1_target")
        self.q2_target = Mlp([x_dim + act_dim, *hid, 1], self.rng, name="q2_target")
        self.q1_target.copy_from(self.q1)
        self.q2_target.copy_from(self.q2)
        self.log_alpha = ParamTensor(np.array([math.log(s.init_alpha)]), "log_alpha")
        self.target_entropy = float(-act_dim if s.target_entropy is None else s.target_entropy)
        self.policy_opt = Adam(self.policy.params(), s.lr)
        self.q_opt = Adam(self.q1.params() + self.q2.params(), s.lr)
        self.alpha_opt = Adam([self.log_alpha], s.lr)
        self._dist = TanhGaussian()
        self.updates = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.value[0]))

    def networks(self) -> dict[str, Mlp]:
        return {"policy": self.policy, "q1": self.q1, "q2": self.q2,
                "q1_target": self.q1_target, "q2_target": self.q2_target}

    @staticmethod
    def conditioning(obs: np.ndarray, z: np.ndarray | None) -> np.ndarray:
        """``[s, z]``; ``z`` of width 0 (or ``None``) leaves ``s`` unchanged."""
        if z is None or np.size(z) == 0:
            return np.asarray(obs, dtype=np.float64)
        return np.concatenate([obs, z], axis=-1)

    def act(self, obs: np.ndarray, z: np.ndarray | None = None, deterministic: bool = False) -> np.ndarray:
        """Squashed action in (-1, 1)."""
        x = self.conditioning(obs, z)
        mean, log_std = self.policy.predict(x)
        if deterministic:
            return np.tanh(mean)
        eps = self.rng.standard_normal(np.shape(mean))
        return np.tanh(mean + np.exp(log_std) * eps)

    def critic_targets(self, r: np.ndarray, x_next: np.ndarray) -> np.ndarray:
        s = self.settings
        r = s.reward_scale * r
        if s.gamma == 0.0:
            return r
        mean, log_std = self.policy.predict(x_next)
        eps = self.rng.standard_normal(mean.shape)
        a2, logp2 = TanhGaussian().sample(mean, log_std, eps)
        xa = np.concatenate([x_next, a2], axis=1)
        q_t = np.minimum(self.q1_target.predict(xa), self.q2_target.predict(xa))[:, 0]
        return r + s.gamma * (q_t - self.alpha * logp2)

    def update(self, batch: dict[str, np.ndarray]) -> SacLosses:
        s = self.settings
        z = batch.get("z") if self.latent_dim else None
        z_next = batch.get("z_next", z) if self.latent_dim else None
        x = self.conditioning(batch["s"], z)
        x_next = self.conditioning(batch["s_next"], z_next)
        n = x.shape[0]

        # critics
        y = self.critic_targets(np.asarray(batch["r"], dtype=np.float64), x_next)
        xa = np.concatenate([x, batch["a"]], axis=1)
        self.q_opt.zero_grad()
        critic_loss = 0.0
        for q in (self.q1, self.q2):
            err = q.forward(xa)[:, 0] - y
            critic_loss += float(np.mean(err * err))
            q.backward((2.0 / n) * err[:, None])
        self.q_opt.step()

        # actor
        alpha = self.alpha
        mean, log_std = self.policy.forward(x)
        eps = self.rng.standard_normal(mean.shape)
        a_new, logp = self._dist.sample(mean, log_std, eps)
        xa_new = np.concatenate([x, a_new], axis=1)
        q1v = self.q1.forward(xa_new)[:, 0]
        g1 = self.q1.backward(np.full((n, 1), -1.0 / n), accumulate=False)
        q2v = self.q2.forward(xa_new)[:, 0]
        g2 = self.q2.backward(np.full((n, 1), -1.0 / n), accumulate=False)
        use1 = (q1v <= q2v)[:, None]
        g_a = np.where(use1, g1, g2)[:, -self.act_dim:]
        actor_loss = float(np.mean(alpha * logp - np.minimum(q1v, q2v)))
        self.policy_opt.zero_grad()
        self.policy.backward(self._dist.backward(g_a, np.full(n, alpha / n)))
        self.policy_opt.step()

        # temperature
        self.alpha_opt.zero_grad()
        self.log_alpha.grad[0] = -float(np.mean(logp + self.target_entropy))
        self.alpha_opt.step()

        polyak_update(self.q1_target, self.q1, s.tau)
        polyak_update(self.q2_target, self.q2, s.tau)
        self.updates += 1
        return SacLosses(critic=critic_loss, actor=actor_loss, alpha=self.alpha,
                         entropy=float(-np.mean(logp)))
