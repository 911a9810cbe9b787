"""One-state, one-step continuous bandit used as a learning sanity check."""

from __future__ import annotations

import numpy as np

from .ddpg import DdpgAgent, DdpgSettings
from .sac import SacAgent, SacSettings

TARGET = 0.5


def bandit_reward(a: np.ndarray) -> np.ndarray:
    """``-(a - 0.5)^2``, maximized at ``a = 0.5``."""
    return -(np.asarray(a)[..., 0] - TARGET) ** 2


def train_bandit(kind: str, updates: int = 5000, seed: int = 0, batch: int = 256,
                 hidden: tuple[int, ...] = (64, 64)) -> float:
    """Train SAC or DDPG on fresh on-policy batches; return the final greedy action."""
    s = np.zeros((batch, 1))
    if kind == "sac":
        agent = SacAgent(1, 1, settings=SacSettings(gamma=0.0, hidden=hidden), seed=seed)
        act = agent.act
        greedy = lambda: agent.act(np.zeros(1), deterministic=True)
    elif kind == "ddpg":
        agent = DdpgAgent(1, 1, settings=DdpgSettings(gamma=0.0, hidden=hidden), seed=seed)
        act = lambda x: agent.act(x, explore=True)
        greedy = lambda: agent.act(np.zeros(1))
    else:
        raise ValueError(f"unknown agent {kind!r}")
    for _ in range(updates):
        a = act(s)
        agent.update({"s": s, "a": a, "r": bandit_reward(a), "s_next": s})
    return float(greedy()[0])
