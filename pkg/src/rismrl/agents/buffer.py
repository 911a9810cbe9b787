from __future__ import annotations

from collections import deque

import numpy as np

from ..env import Transition


class EmptyBufferError(LookupError):
    pass


class ReplayBuffer:
    """Ring buffer of transitions with a per-task recency index.

    Each slot can carry a task encoding ``(y, z)`` plus the encoder version
    that produced it, so stale annotations can be detected.
    """

    def __init__(self, capacity: int, obs_dim: int, act_dim: int, latent_dim: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.latent_dim = latent_dim
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, obs_dim))
        self.task_id = np.zeros(capacity, dtype=np.int64)
        self.t = np.zeros(capacity, dtype=np.int64)
        self.seq = np.zeros(capacity, dtype=np.int64)
        self.y = np.full(capacity, -1, dtype=np.int64)
        self.z = np.zeros((capacity, latent_dim))
        self.z_version = np.full(capacity, -1, dtype=np.int64)
        self.ptr = 0
        self.size = 0
        self.n_added = 0
        self._by_task: dict[int, deque] = {}

    def __len__(self) -> int:
        return self.size

    def add(self, tr: Transition) -> int:
        i = self.ptr
        if self.size == self.capacity:
            old = int(self.task_id[i])
            idx = self._by_task[old]
            idx.popleft()
            if not idx:
                del self._by_task[old]
        self.s[i] = tr.s
        self.a[i] = tr.a
        self.r[i] = tr.r
        self.s_next[i] = tr.s_next
        self.task_id[i] = tr.task_id
        self.t[i] = tr.t
        self.seq[i] = self.n_added
        if tr.y is not None and tr.z is not None:
            self.y[i] = tr.y
            self.z[i] = tr.z
        else:
            self.y[i] = -1
            self.z[i] = 0.0
        self.z_version[i] = -1
        self._by_task.setdefault(int(tr.task_id), deque()).append(i)
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.n_added += 1
        return i

    def task_ids(self) -> list[int]:
        return sorted(self._by_task)

    def task_indices(self, task_id: int) -> np.ndarray:
        if task_id not in self._by_task:
            raise EmptyBufferError(f"no transitions for task {task_id}")
        return np.fromiter(self._by_task[task_id], dtype=np.int64)

    def recent_indices(self, count: int) -> np.ndarray:
        """Slots of the ``count`` most recently added transitions, oldest first."""
        count = min(count, self.size)
        return (self.ptr - count + np.arange(count)) % self.capacity

    def gather(self, idx: np.ndarray) -> dict[str, np.ndarray]:
        return {
            "s": self.s[idx], "a": self.a[idx], "r": self.r[idx],
            "s_next": self.s_next[idx], "task_id": self.task_id[idx], "t": self.t[idx],
            "y": self.y[idx], "z": self.z[idx], "idx": idx,
        }

    def sample(self, batch: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Uniform sample; without replacement when ``batch <= len(self)``."""
        if self.size == 0:
            raise EmptyBufferError("cannot sample an empty buffer")
        idx = rng.choice(self.size, batch, replace=batch > self.size)
        return self.gather(idx)

    def sample_task(self, task_id: int, batch: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        pos = self.task_indices(task_id)
        idx = pos[rng.choice(pos.size, batch, replace=batch > pos.size)]
        return self.gather(idx)

    def context(self, task_id: int, length: int) -> dict[str, np.ndarray]:
        """The task's ``length`` most recent transitions in insertion order."""
        pos = self.task_indices(task_id)
        return self.gather(pos[-length:])

    def transitions(self, idx: np.ndarray) -> list[Transition]:
        out = []
        for i in np.atleast_1d(idx):
            out.append(Transition(s=self.s[i].copy(), a=self.a[i].copy(), r=float(self.r[i]),
                                  s_next=self.s_next[i].copy(), task_id=int(self.task_id[i]),
                                  t=int(self.t[i])))
        return out
