"""Deterministic actor-critic baseline (Gaussian exploration, target networks)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..channel import SystemConfig
from ..env import RisEnv, Task, Transition, action_to_policy, policy_to_action
from ..neural import Adam, Mlp, polyak_update
from .buffer import ReplayBuffer


@dataclass
class DdpgSettings:
    hidden: tuple[int, ...] = (256, 256)
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    gamma: float = 0.99
    tau: float = 0.005
    exploration_std: float = 0.1
    reward_scale: float = 1.0
    batch: int = 256
    updates_per_epoch: int = 50
    buffer_capacity: int = 100_000


@dataclass
class DdpgLosses:
    critic: float
    actor: float


class DdpgAgent:
    def __init__(self, obs_dim: int, act_dim: int, settings: DdpgSettings | None = None, seed: int = 0):
        self.settings = settings or DdpgSettings()
        s = self.settings
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.rng = np.random.default_rng(seed)
        hid = list(s.hidden)
        self.actor = Mlp([obs_dim, *hid, act_dim], self.rng, name="actor")
        self.critic = Mlp([obs_dim + act_dim, *hid, 1], self.rng, name="critic")
        self.actor_target = Mlp([obs_dim, *hid, act_dim], self.rng, name="actor_target")
        self.critic_target = Mlp([obs_dim + act_dim, *hid, 1], self.rng, name="critic_target")
        self.actor_target.copy_from(self.actor)
        self.critic_target.copy_from(self.critic)
        self.actor_opt = Adam(self.actor.params(), s.actor_lr)
        self.critic_opt = Adam(self.critic.params(), s.critic_lr)
        self.updates = 0

    def networks(self) -> dict[str, Mlp]:
        return {"actor": self.actor, "critic": self.critic,
                "actor_target": self.actor_target, "critic_target": self.critic_target}

    def act(self, obs: np.ndarray, explore: bool = False) -> np.ndarray:
        a = np.tanh(self.actor.predict(obs))
        if explore and self.settings.exploration_std > 0:
            a = np.clip(a + self.settings.exploration_std * self.rng.standard_normal(a.shape), -1.0, 1.0)
        return a

    def critic_targets(self, r: np.ndarray, s_next: np.ndarray) -> np.ndarray:
        s = self.settings
        r = s.reward_scale * r
        if s.gamma == 0.0:
            return r
        a2 = np.tanh(self.actor_target.predict(s_next))
        q = self.critic_target.predict(np.concatenate([s_next, a2], axis=1))[:, 0]
        return r + s.gamma * q

    def update(self, batch: dict[str, np.ndarray]) -> DdpgLosses:
        s_obs = np.asarray(batch["s"], dtype=np.float64)
        n = s_obs.shape[0]
        y = self.critic_targets(np.asarray(batch["r"], dtype=np.float64), batch["s_next"])

        self.critic_opt.zero_grad()
        err = self.critic.forward(np.concatenate([s_obs, batch["a"]], axis=1))[:, 0] - y
        self.critic.backward((2.0 / n) * err[:, None])
        self.critic_opt.step()

        pre = self.actor.forward(s_obs)
        a = np.tanh(pre)
        q = self.critic.forward(np.concatenate([s_obs, a], axis=1))[:, 0]
        g_in = self.critic.backward(np.full((n, 1), -1.0 / n), accumulate=False)
        self.actor_opt.zero_grad()
        self.actor.backward(g_in[:, -self.act_dim:] * (1.0 - a * a))
        self.actor_opt.step()

        polyak_update(self.critic_target, self.critic, self.settings.tau)
        polyak_update(self.actor_target, self.actor, self.settings.tau)
        self.updates += 1
        return DdpgLosses(critic=float(np.mean(err * err)), actor=float(-np.mean(q)))


@dataclass
class DdpgEpochMetrics:
    epoch: int
    critic_loss: float
    actor_loss: float
    train_return: float


def ddpg_rollout(agent: DdpgAgent, env: RisEnv, episode: int, buffer: ReplayBuffer | None,
                 explore: bool = True) -> float:
    """One episode with the actor (plus exploration noise); returns mean reward."""
    obs = env.reset(episode)
    total = 0.0
    done = False
    while not done:
        a = policy_to_action(agent.act(obs, explore), env.config)
        obs_next, r, done, _ = env.step(a)
        if buffer is not None:
            buffer.add(Transition(s=obs, a=a, r=r, s_next=obs_next, task_id=env.task.id,
                                  t=env.t - 1, done=done))
        total += r
        obs = obs_next
    return total / env.episode_len


def ddpg_train(tasks: Sequence[Task], config: SystemConfig, settings: DdpgSettings | None = None,
               epochs: int = 10, episode_len: int = 100, normalize_obs: bool = True, seed: int = 0,
               on_epoch: Callable[[DdpgEpochMetrics], None] | None = None,
               agent: DdpgAgent | None = None) -> tuple[DdpgAgent, list[DdpgEpochMetrics]]:
    """Collect one exploratory episode per task per epoch, then run updates."""
    agent = agent or DdpgAgent(config.obs_dim, config.action_dim, settings, seed)
    s = agent.settings
    buffer = ReplayBuffer(s.buffer_capacity, agent.obs_dim, agent.act_dim)
    envs = [RisEnv(config, task, episode_len, normalize_obs) for task in tasks]
    history = []
    for epoch in range(epochs):
        returns = [ddpg_rollout(agent, env, epoch, buffer) for env in envs]
        losses = None
        for _ in range(s.updates_per_epoch):
            batch = buffer.sample(s.batch, agent.rng)
            losses = agent.update(dict(batch, a=action_to_policy(batch["a"], config)))
            if not (np.isfinite(losses.critic) and np.isfinite(losses.actor)):
                raise FloatingPointError(f"non-finite DDPG loss at epoch {epoch}")
        m = DdpgEpochMetrics(epoch, losses.critic if losses else float("nan"),
                             losses.actor if losses else float("nan"), float(np.mean(returns)))
        history.append(m)
        if on_epoch is not None:
            on_epoch(m)
    agent.buffer = buffer
    return agent, history
