"""Denoising chain viewed as an MDP: states, trajectories, sparse rewards, replay."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, ScoringError


@dataclass(frozen=True)
class MdpState:
    """``x`` is the sample at diffusion index ``T - t`` for MDP step ``t``."""

    x: np.ndarray
    c: int
    t: int

    def diffusion_index(self, T):
        return T - self.t


@dataclass(frozen=True)
class Trajectory:
    states: tuple
    actions: tuple
    pretrained_means: tuple | None = None
    terminal_reward: float | None = None

    @property
    def T(self):
        return len(self.actions)

    @property
    def context(self):
        return self.states[0].c

    @property
    def x0(self):
        return self.states[-1].x

    @classmethod
    def from_chain(cls, chain, c, means=None):
        """Build from an array of samples ordered x_T, x_{T-1}, ..., x_0.

        Actions alias the successor states' arrays (Dirac transitions).
        """
        xs = [np.asarray(x, dtype=np.float64) for x in chain]
        states = tuple(MdpState(x, int(c), k) for k, x in enumerate(xs))
        actions = tuple(xs[1:])
        return cls(states, actions, None if means is None else tuple(means))

    def to_json(self):
        row = {
            "context": self.context,
            "states": [s.x.tolist() for s in self.states],
            "actions": [a.tolist() for a in self.actions],
            "terminal_reward": self.terminal_reward,
        }
        if self.pretrained_means is not None:
            row["pretrained_means"] = [m.tolist() for m in self.pretrained_means]
        return row

    @classmethod
    def from_json(cls, row):
        states = row["states"]
        traj = cls.from_chain(states, row["context"], row.get("pretrained_means"))
        for a, s in zip(row["actions"], states[1:]):
            if a != s:
                raise ContractError("trajectory actions must equal successor states")
        return replace(traj, terminal_reward=row["terminal_reward"])


def attach_sparse_reward(traj, reward_fn):
    """Score the terminal sample; intermediate rewards are implicitly zero."""
    r = float(np.asarray(reward_fn(traj.x0, traj.context)).reshape(-1)[0])
    if not math.isfinite(r):
        raise ScoringError(f"reward function returned {r}")
    return replace(traj, terminal_reward=r)


class ReplayBuffer:
    """Bounded FIFO of scored trajectories; the oldest entries are evicted first."""

    def __init__(self, capacity=2048):
        if capacity < 1:
            raise ContractError("capacity must be positive")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)

    def add(self, traj):
        if traj.terminal_reward is None:
            raise ContractError("only scored trajectories can be stored")
        self._items.append(traj)

    def extend(self, trajs):
        for traj in trajs:
            self.add(traj)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def __iter__(self):
        return iter(self._items)


def minibatch(buffer, batch_size, rng):
    """Uniform trajectory, then uniform step in [0, T]; target is the terminal reward."""
    if len(buffer) == 0:
        raise ContractError("cannot sample from an empty buffer")
    which = rng.integers(0, len(buffer), batch_size)
    pairs = []
    for i in which:
        traj = buffer[int(i)]
        k = int(rng.integers(0, traj.T + 1))
        pairs.append((traj.states[k], traj.terminal_reward))
    return pairs


def stack_pairs(pairs, T):
    """Arrays (x, diffusion index, context, target) from minibatch pairs."""
    x = np.stack([s.x for s, _ in pairs])
    t = np.array([s.diffusion_index(T) for s, _ in pairs])
    c = np.array([s.c for s, _ in pairs])
    r = np.array([float(r) for _, r in pairs])
    return x, t, c, r


def dump_trajectories(path, trajs):
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for traj in trajs:
            fh.write(json.dumps(traj.to_json()) + "\n")


def load_trajectories(path):
    with Path(path).open(encoding="utf-8") as fh:
        return [Trajectory.from_json(json.loads(line)) for line in fh if line.strip()]


class ChainBuffer:
    """Array-backed FIFO of scored chains for high-volume value regression.

    Same sampling law as :func:`minibatch` (uniform chain, then uniform step
    in [0, T]) without materialising per-state records. ``states[i]`` holds
    chain i ordered x_T ... x_0.
    """

    def __init__(self, capacity, T, dim):
        if capacity < 1:
            raise ContractError("capacity must be positive")
        self.capacity, self.T, self.dim = capacity, T, dim
        self.states = np.zeros((capacity, T + 1, dim))
        self.contexts = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def add_chains(self, states, contexts, rewards):
        """``states`` is (T+1, n, dim) as returned by batched sampling."""
        states = np.asarray(states, dtype=np.float64)
        rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
        if states.shape[0] != self.T + 1 or states.shape[2] != self.dim:
            raise ContractError(f"chain shape {states.shape} does not fit T={self.T}, dim={self.dim}")
        if not np.isfinite(rewards).all():
            raise ScoringError("non-finite reward in chain batch")
        for i in range(states.shape[1]):
            j = self._next
            self.states[j] = states[:, i]
            self.contexts[j] = contexts[i]
            self.rewards[j] = rewards[i]
            self._next = (j + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def oldest_first(self):
        """Slot indices ordered from oldest to newest."""
        start = self._next if self._size == self.capacity else 0
        return (start + np.arange(self._size)) % self.capacity

    def sample(self, batch_size, rng):
        """(x, diffusion index, context, reward) arrays."""
        if self._size == 0:
            raise ContractError("cannot sample from an empty buffer")
        which = self.oldest_first()[rng.integers(0, self._size, batch_size)]
        k = rng.integers(0, self.T + 1, batch_size)
        return self.states[which, k], self.T - k, self.contexts[which], self.rewards[which]

    def trajectories(self):
        out = []
        for j in self.oldest_first():
            traj = Trajectory.from_chain(self.states[j], int(self.contexts[j]))
            out.append(replace(traj, terminal_reward=float(self.rewards[j])))
        return out
