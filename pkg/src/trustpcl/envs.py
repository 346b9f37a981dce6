"""Desk-scale environments: 2-D point-mass, pendulum swing-up, and a
discrete chain MDP defined by a JSON lookup table shared with the tabular
oracle.

All environments are deterministic given the reset seed and the action
sequence.  Timeout (cutoff at T_max) is reported separately from true
termination so the consistency loss knows whether to bootstrap.
"""

import json
from dataclasses import dataclass

import numpy as np


class UsageError(RuntimeError):
    pass


@dataclass
class EnvSpec:
    obs_dim: int
    action_kind: str            # "continuous" | "discrete"
    action_dim: int = 0         # continuous only
    action_low: float = 0.0
    action_high: float = 0.0
    n_actions: int = 0          # discrete only
    t_max: int = 1


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    terminal: bool
    timeout: bool


class PointMassEnv:
    """x <- x + 0.1 * a with a clamped to [-1, 1]^2; goal at the origin.

    Observation is [x, g - x] (dim 4).  Reward -(|x - g|^2 + 0.01 |a|^2)
    on the post-step position; terminal when within 0.05 of the goal.
    """

    GOAL = np.zeros(2)

    def __init__(self, t_max=100):
        self.t_max = t_max
        self._x = None
        self._t = 0
        self._done = True

    def spec(self):
        return EnvSpec(obs_dim=4, action_kind="continuous", action_dim=2,
                       action_low=-1.0, action_high=1.0, t_max=self.t_max)

    def _obs(self):
        return np.concatenate([self._x, self.GOAL - self._x])

    def reset(self, seed):
        rng = np.random.default_rng(seed)
        self._x = rng.uniform(-1.0, 1.0, size=2)
        self._t = 0
        self._done = False
        return self._obs()

    def step(self, action):
        if self._done:
            raise UsageError("step() after terminal/timeout; call reset()")
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        self._x = self._x + 0.1 * a
        self._t += 1
        dist2 = float(np.sum((self._x - self.GOAL) ** 2))
        reward = -(dist2 + 0.01 * float(np.sum(a ** 2)))
        terminal = np.sqrt(dist2) < 0.05
        timeout = (not terminal) and self._t >= self.t_max
        self._done = terminal or timeout
        return StepResult(self._obs(), reward, terminal, timeout)


class PendulumEnv:
    """Torque-limited swing-up: gravity 10, mass 1, length 1, dt 0.05.

    Observation (cos th, sin th, omega); omega clipped to [-8, 8]; torque
    clamped to [-2, 2].  Never terminates; episodes end by timeout.
    """

    G, M, L, DT = 10.0, 1.0, 1.0, 0.05
    MAX_SPEED, MAX_TORQUE = 8.0, 2.0

    def __init__(self, t_max=200):
        self.t_max = t_max
        self._th = None
        self._om = None
        self._t = 0
        self._done = True

    def spec(self):
        return EnvSpec(obs_dim=3, action_kind="continuous", action_dim=1,
                       action_low=-self.MAX_TORQUE, action_high=self.MAX_TORQUE,
                       t_max=self.t_max)

    def _obs(self):
        return np.array([np.cos(self._th), np.sin(self._th), self._om])

    def reset(self, seed):
        rng = np.random.default_rng(seed)
        self._th = rng.uniform(-np.pi, np.pi)
        self._om = 0.0
        self._t = 0
        self._done = False
        return self._obs()

    @staticmethod
    def _wrap(angle):
        return ((angle + np.pi) % (2.0 * np.pi)) - np.pi

    def step(self, action):
        if self._done:
            raise UsageError("step() after timeout; call reset()")
        u = float(np.clip(np.asarray(action, dtype=np.float64).ravel()[0],
                          -self.MAX_TORQUE, self.MAX_TORQUE))
        th, om = self._th, self._om
        angle = self._wrap(th)
        reward = -(angle ** 2 + 0.1 * om ** 2 + 0.001 * u ** 2)
        om_dot = (3.0 * self.G / (2.0 * self.L) * np.sin(th)
                  + 3.0 / (self.M * self.L ** 2) * u)
        om = np.clip(om + om_dot * self.DT, -self.MAX_SPEED, self.MAX_SPEED)
        th = th + om * self.DT
        self._th, self._om = th, float(om)
        self._t += 1
        timeout = self._t >= self.t_max
        self._done = timeout
        return StepResult(self._obs(), float(reward), False, timeout)


class ChainEnv:
    """Deterministic tabular MDP from a JSON lookup table; one-hot
    observations, fixed start state 0, timeout at the table horizon."""

    def __init__(self, table):
        self.n_states = table["num_states"]
        self.n_actions = table["num_actions"]
        self.transitions = [[int(x) for x in row] for row in table["transitions"]]
        self.rewards = [[float(x) for x in row] for row in table["rewards"]]
        self.horizon = table["horizon"]
        self._s = 0
        self._t = 0
        self._done = True

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            return cls(json.load(f))

    @property
    def t_max(self):
        return self.horizon

    @t_max.setter
    def t_max(self, value):
        self.horizon = int(value)

    def spec(self):
        return EnvSpec(obs_dim=self.n_states, action_kind="discrete",
                       n_actions=self.n_actions, t_max=self.horizon)

    def _obs(self):
        obs = np.zeros(self.n_states)
        obs[self._s] = 1.0
        return obs

    def reset(self, seed=None):
        self._s = 0
        self._t = 0
        self._done = False
        return self._obs()

    def step(self, action):
        if self._done:
            raise UsageError("step() after timeout; call reset()")
        a = int(action)
        if not 0 <= a < self.n_actions:
            raise UsageError(f"action {a} out of range")
        reward = self.rewards[self._s][a]
        self._s = self.transitions[self._s][a]
        self._t += 1
        timeout = self._t >= self.horizon
        self._done = timeout
        return StepResult(self._obs(), reward, False, timeout)


def make_env(env_id, chain_path=None):
    if env_id == "point-mass":
        return PointMassEnv()
    if env_id == "pendulum":
        return PendulumEnv()
    if env_id == "chain":
        if chain_path is None:
            from importlib.resources import files
            chain_path = files("trustpcl.data").joinpath("chain6.json")
        return ChainEnv.from_json(chain_path)
    raise ValueError(f"unknown env id {env_id!r}")
