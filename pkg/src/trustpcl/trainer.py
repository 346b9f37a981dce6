"""Training loop: alternate environment collection with gradient steps on
the consistency loss, maintain the lagged prior and the trust-region
coefficient, and record metrics.

One trainer owns its environment, buffer, and parameters; multi-seed
experiments run independent trainers.
"""

import csv
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import envs as envs_mod
from .consistency import ConsistencyConfig, batch_loss_and_grads
from .models import CategoricalPolicy, GaussianPolicy, ValueFunction
from .nn import AdamState, adam_step
from .replay import EpisodeLog, InsufficientData, ReplayBuffer, Segment, Transition
from .trust import LagState, LambdaSolver, estimate_kl, solve_lambda, update_lag

METRICS_COLUMNS = ["iteration", "env_steps", "eval_return", "lambda",
                   "kl_estimate", "kl_target", "loss", "tau", "seconds"]


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    env_id: str = "point-mass"
    epsilon: float = 0.01            # trust-region size; ignored with fixed_lambda
    rollout_d: int = 10
    gamma: float = 0.995
    collect_steps: int = 10          # P
    batch_transitions: int = 64      # Q
    lag_alpha: float = 0.99
    replay_beta: float = 0.001
    lr_policy: float = 1e-4
    lr_value: float = 1e-4
    tau: float = 0.0
    tau_decay_every: int = 0         # 0: constant; else tau_k = tau * 0.1**(k/every)
    n_iterations: int = 1000
    seed: int = 0
    eval_interval: int = 100
    eval_episodes: int = 10
    value_steps: int = 1
    huber_delta: float = 1.0
    buffer_capacity: int = 5000
    fixed_lambda: float = -1.0       # >= 0 bypasses the epsilon tuner
    uniform_reference: bool = False  # fixed uniform prior (discrete envs only)
    t_max: int = 0                   # 0: env default
    chain_path: str = ""

    def validate(self):
        if self.fixed_lambda < 0 and self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.rollout_d < 1:
            raise ConfigError("rollout_d must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must satisfy 0 < gamma <= 1")
        if self.collect_steps < 1:
            raise ConfigError("collect_steps must be >= 1")
        if self.batch_transitions < self.collect_steps:
            raise ConfigError("batch_transitions must be >= collect_steps")
        if not 0.0 <= self.lag_alpha <= 1.0:
            raise ConfigError("lag_alpha must be in [0, 1]")
        if self.replay_beta < 0:
            raise ConfigError("replay_beta must be >= 0")
        if self.tau < 0:
            raise ConfigError("tau must be >= 0")
        if self.huber_delta <= 0:
            raise ConfigError("huber_delta must be > 0")
        return self


def off_policy_preset(env_id="point-mass", **overrides):
    """Desk-scale version of the paper-default off-policy configuration."""
    cfg = TrainConfig(env_id=env_id, collect_steps=10, batch_transitions=64,
                      replay_beta=0.001, lag_alpha=0.99, gamma=0.995,
                      rollout_d=10, epsilon=0.01, lr_policy=1e-4, lr_value=1e-4,
                      tau=0.0)
    return replace(cfg, **overrides)


def on_policy_preset(env_id="point-mass", **overrides):
    """On-policy variant: long collection phases and a near-on-policy buffer."""
    cfg = TrainConfig(env_id=env_id, collect_steps=1000, batch_transitions=25000,
                      replay_beta=0.1, lag_alpha=0.95, gamma=0.995,
                      rollout_d=10, epsilon=0.01, lr_policy=1e-4, lr_value=1e-4,
                      tau=0.0, buffer_capacity=200)
    return replace(cfg, **overrides)


class UniformReference:
    """Fixed uniform prior over K discrete actions."""

    def __init__(self, n_actions):
        self.n_actions = n_actions

    def log_density_batch(self, obs, actions):
        n = len(np.atleast_1d(np.asarray(actions)))
        return np.full(n, -np.log(self.n_actions))


@dataclass
class TrainMetricsRow:
    iteration: int
    env_steps: int
    eval_return: float
    lam: float
    kl_estimate: float
    kl_target: float
    loss: float
    tau: float
    seconds: float


class Trainer:
    def __init__(self, config):
        self.config = config.validate()
        self.rng = np.random.default_rng(config.seed)
        self.env = self._make_env()
        spec = self.env.spec()
        self.spec = spec
        policy_rng = np.random.default_rng(config.seed + 1)
        value_rng = np.random.default_rng(config.seed + 2)
        if spec.action_kind == "continuous":
            self.policy = GaussianPolicy(spec.obs_dim, spec.action_dim, rng=policy_rng)
            if config.uniform_reference:
                raise ConfigError("uniform_reference requires a discrete env")
        else:
            self.policy = CategoricalPolicy(spec.obs_dim, spec.n_actions, rng=policy_rng)
        self.value = ValueFunction(spec.obs_dim, rng=value_rng)
        self.lag = LagState(policy_params=self.policy.get_flat().copy(),
                            value_params=self.value.get_flat().copy(),
                            alpha=config.lag_alpha)
        self.lag_policy = self.policy.clone()
        self.lag_value = self.value.clone()
        self.adam_policy = AdamState.init(self.policy.n_params, lr=config.lr_policy)
        self.adam_value = AdamState.init(self.value.n_params, lr=config.lr_value)
        self.buffer = ReplayBuffer(capacity=config.buffer_capacity,
                                   beta=config.replay_beta)
        self.episode_log = EpisodeLog()
        self.solver = LambdaSolver()
        if config.fixed_lambda >= 0:
            self.lam = config.fixed_lambda
        else:
            self.lam = 1.0
        self.kl_estimate = 0.0
        self.kl_target = 0.0
        self.last_loss = 0.0
        self.iteration = 0
        self.episode_counter = 0
        self._begin_episode()

    def _make_env(self):
        env = envs_mod.make_env(self.config.env_id,
                                chain_path=self.config.chain_path or None)
        if self.config.t_max:
            env.t_max = self.config.t_max
        return env

    def _reference(self):
        if self.config.uniform_reference:
            return UniformReference(self.spec.n_actions)
        return self.lag_policy

    def _begin_episode(self):
        seed = int(self.rng.integers(0, 2 ** 62))
        self.obs = self.env.reset(seed)
        self.episode_return = 0.0
        self.episode_length = 0
        self.episode_counter += 1
        self.episode_offset = 0

    def current_tau(self):
        cfg = self.config
        if cfg.tau_decay_every <= 0:
            return cfg.tau
        return cfg.tau * 0.1 ** (self.iteration / cfg.tau_decay_every)

    def collect(self):
        """Samples P env steps from the live stochastic policy, splitting
        segments at episode boundaries; returns the closed segments."""
        cfg = self.config
        segments = []
        transitions = []
        start_index = self.episode_offset
        for _ in range(cfg.collect_steps):
            action = self.policy.sample(self.obs, self.rng)
            logp = self.policy.log_density(self.obs, action)
            res = self.env.step(action)
            transitions.append(Transition(obs=self.obs, action=action,
                                          reward=res.reward, log_density=logp,
                                          terminal=res.terminal,
                                          timeout=res.timeout))
            self.episode_return += res.reward
            self.episode_length += 1
            self.episode_offset += 1
            if res.terminal or res.timeout:
                segments.append(Segment(episode_id=self.episode_counter,
                                        start_index=start_index,
                                        transitions=transitions,
                                        final_obs=res.obs))
                self.episode_log.log_episode(self.episode_return,
                                             self.episode_length)
                transitions = []
                self._begin_episode()
                start_index = 0
            else:
                self.obs = res.obs
        if transitions:
            segments.append(Segment(episode_id=self.episode_counter,
                                    start_index=start_index,
                                    transitions=transitions,
                                    final_obs=self.obs))
        return segments

    def _consistency_config(self):
        return ConsistencyConfig(d=self.config.rollout_d, gamma=self.config.gamma,
                                 tau=self.current_tau(), lam=self.lam,
                                 huber_delta=self.config.huber_delta)

    def _gradient_step(self, batch):
        cfg = self._consistency_config()
        loss, g_theta, g_phi = batch_loss_and_grads(
            batch, self.policy, self.value, self._reference(), self.lag_value, cfg)
        new_theta, _ = adam_step(self.adam_policy, self.policy.get_flat(), g_theta)
        self.policy.set_flat(new_theta)
        new_phi, _ = adam_step(self.adam_value, self.value.get_flat(), g_phi)
        self.value.set_flat(new_phi)
        for _ in range(self.config.value_steps - 1):
            _, _, g_phi = batch_loss_and_grads(
                batch, self.policy, self.value, self._reference(),
                self.lag_value, cfg)
            new_phi, _ = adam_step(self.adam_value, self.value.get_flat(), g_phi)
            self.value.set_flat(new_phi)
        return loss

    def _ready_to_train(self):
        if self.buffer.n_transitions() < self.config.batch_transitions:
            return False
        if self.config.fixed_lambda < 0 and len(self.episode_log) < 2:
            return False
        return True

    def train_iteration(self):
        cfg = self.config
        for seg in self.collect():
            self.buffer.insert(seg, train_step=self.iteration)
        if self._ready_to_train():
            batch = self.buffer.sample_batch(cfg.batch_transitions,
                                             cfg.collect_steps, self.rng)
            try:
                self.last_loss = self._gradient_step(batch)
            except FloatingPointError as exc:
                raise FloatingPointError(
                    f"iteration {self.iteration}: {exc}") from exc
        self.lag = update_lag(self.lag, self.policy.get_flat(),
                              self.value.get_flat())
        self.lag_policy.set_flat(self.lag.policy_params)
        self.lag_value.set_flat(self.lag.value_params)
        if cfg.fixed_lambda < 0:
            self.lam = solve_lambda(self.episode_log, cfg.epsilon, self.solver)
            try:
                returns = self.episode_log.returns()
                self.kl_estimate = estimate_kl(returns, self.lam).kl
                self.kl_target = cfg.epsilon * self.episode_log.mean_length()
            except InsufficientData:
                self.kl_estimate = 0.0
                self.kl_target = 0.0
        self.iteration += 1

    def evaluate(self):
        return evaluate(self._make_env, self.policy, self.config.eval_episodes,
                        eval_seed_base(self.config.seed))

    def run(self):
        """Executes the configured number of iterations, evaluating every
        eval_interval; returns the metrics rows."""
        cfg = self.config
        rows = []
        t0 = time.perf_counter()
        for _ in range(cfg.n_iterations):
            self.train_iteration()
            if self.iteration % cfg.eval_interval == 0 or self.iteration == cfg.n_iterations:
                rows.append(TrainMetricsRow(
                    iteration=self.iteration,
                    env_steps=self.iteration * cfg.collect_steps,
                    eval_return=self.evaluate(),
                    lam=self.lam,
                    kl_estimate=self.kl_estimate,
                    kl_target=self.kl_target,
                    loss=self.last_loss,
                    tau=self.current_tau(),
                    seconds=time.perf_counter() - t0))
        return rows


def eval_seed_base(train_seed):
    # eval episodes use a seed stream disjoint from training resets
    return (train_seed + 1) * 1_000_003


def evaluate(env_factory, policy, episodes, seed_base):
    """Mean undiscounted return of greedy rollouts on fresh episodes."""
    if episodes < 1:
        raise ConfigError("need at least one evaluation episode")
    total = 0.0
    env = env_factory()
    for k in range(episodes):
        obs = env.reset(seed_base + k)
        ep = 0.0
        while True:
            res = env.step(policy.greedy(obs))
            ep += res.reward
            if res.terminal or res.timeout:
                break
            obs = res.obs
        total += ep
    return total / episodes


def write_metrics(path, rows):
    """Fixed-order CSV; floats are written with full repr precision so
    deterministic reruns produce byte-identical files."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for r in rows:
            writer.writerow([r.iteration, r.env_steps, repr(r.eval_return),
                             repr(r.lam), repr(r.kl_estimate), repr(r.kl_target),
                             repr(r.loss), repr(r.tau), repr(r.seconds)])


def run_training(config, metrics_path=None):
    trainer = Trainer(config)
    rows = trainer.run()
    if metrics_path is not None:
        write_metrics(metrics_path, rows)
    return trainer, rows
