"""Recency-prioritized segment replay plus the rolling last-100-episodes
log used by the trust-region coefficient tuner.

Priorities are stored as the raw training step and exponentiated only at
sampling time with a max shift, so nothing overflows no matter how long
the run is.
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np


class UsageError(RuntimeError):
    pass


class InsufficientData(Exception):
    """Signals that a statistic cannot be computed yet (empty/short log)."""


@dataclass
class Transition:
    obs: np.ndarray
    action: object
    reward: float
    log_density: float       # behavior log pi at collection time (diagnostic)
    terminal: bool = False
    timeout: bool = False


@dataclass
class Segment:
    episode_id: int
    start_index: int
    transitions: list
    final_obs: np.ndarray    # observation following the last transition
    priority: float = 0.0

    def __len__(self):
        return len(self.transitions)


class ReplayBuffer:
    def __init__(self, capacity=5000, beta=0.001):
        if beta < 0:
            raise ValueError("recency weight beta must be >= 0")
        self.capacity = capacity
        self.beta = beta
        self._segments = deque()

    def __len__(self):
        return len(self._segments)

    @property
    def segments(self):
        return list(self._segments)

    def n_transitions(self):
        return sum(len(s) for s in self._segments)

    def insert(self, segment, train_step):
        segment.priority = float(train_step)
        self._segments.append(segment)
        while len(self._segments) > self.capacity:
            self._segments.popleft()

    def sample_probs(self):
        p = np.array([s.priority for s in self._segments])
        w = np.exp(self.beta * (p - p.max()))
        return w / w.sum()

    def sample_batch(self, total_transitions, segment_length, rng):
        """Draws ceil(Q/P) segments i.i.d. with replacement, with probability
        proportional to exp(beta * priority)."""
        if not self._segments:
            raise UsageError("cannot sample from an empty replay buffer")
        n = -(-total_transitions // segment_length)  # ceil
        probs = self.sample_probs()
        idx = rng.choice(len(self._segments), size=n, p=probs)
        segs = list(self._segments)
        return [segs[i] for i in idx]


class EpisodeLog:
    """Ring of the last 100 completed episodes: (total return, length)."""

    def __init__(self, maxlen=100):
        self._ring = deque(maxlen=maxlen)

    def __len__(self):
        return len(self._ring)

    def log_episode(self, total_return, length):
        if length < 1:
            raise ValueError("episode length must be >= 1")
        self._ring.append((float(total_return), int(length)))

    def returns(self):
        if len(self._ring) == 0:
            raise InsufficientData("no completed episodes yet")
        return np.array([r for r, _ in self._ring])

    def mean_length(self):
        if len(self._ring) == 0:
            raise InsufficientData("no completed episodes yet")
        return float(np.mean([t for _, t in self._ring]))
