"""Learning agents: replay buffer, SAC, DDPG and the task-inference meta-agent."""

from .bandit import bandit_reward, train_bandit
from .buffer import EmptyBufferError, ReplayBuffer
from .ddpg import DdpgAgent, DdpgSettings, ddpg_rollout, ddpg_train
from .farm import (
    FarmAgent,
    FarmSettings,
    TaskMap,
    TrainingDiverged,
    encoder_infer,
    farm_act,
    farm_train,
    rollout_episode,
)
from .sac import SacAgent, SacSettings

__all__ = [
    "bandit_reward", "train_bandit",
    "EmptyBufferError", "ReplayBuffer",
    "DdpgAgent", "DdpgSettings", "ddpg_rollout", "ddpg_train",
    "FarmAgent", "FarmSettings", "TaskMap", "TrainingDiverged",
    "encoder_infer", "farm_act", "farm_train", "rollout_episode",
    "SacAgent", "SacSettings",
]
