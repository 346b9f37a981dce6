"""Exact ground truth on small discrete MDPs.

Provides softmax value iteration under reference-transformed rewards,
exhaustive multi-step consistency verification, exact trajectory KL, and
exact evaluation of the regularized objectives.  Also hosts the committed
random-MDP corpus and one-hot adapters that let tabular solutions stand in
for the learned policy/value models in the consistency loss.
"""

import json
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    pass


class DomainError(ValueError):
    pass


class InfeasibleError(RuntimeError):
    pass


# Committed corpus: 50 deterministic random MDPs (see random_mdp).
CORPUS_SEEDS = list(range(1000, 1050))
# (tau, lambda) settings exercised over the corpus.
CORPUS_SETTINGS = [(1.0, 0.0), (0.1, 0.5), (0.0, 1.0)]


@dataclass
class TabularMdp:
    transition: np.ndarray        # (S, A, S) rows summing to 1
    reward: np.ndarray            # (S, A)
    gamma: float
    horizon: int | None = None
    s0: int = 0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        sums = self.transition.sum(axis=2)
        if not np.allclose(sums, 1.0, atol=1e-12):
            raise DomainError("transition rows must sum to 1")
        if not np.all(np.isfinite(self.reward)):
            raise DomainError("rewards must be finite")

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    def is_deterministic(self):
        return bool(np.all(np.isin(self.transition, (0.0, 1.0))))

    def next_state(self, s, a):
        return int(np.argmax(self.transition[s, a]))


@dataclass
class TabularPolicy:
    probs: np.ndarray             # (S, A)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(self.probs < 0):
            raise DomainError("policy entries must be >= 0")
        if not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-12):
            raise DomainError("policy rows must sum to 1")

    @classmethod
    def uniform(cls, n_states, n_actions):
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))


@dataclass
class SoftmaxSolution:
    values: np.ndarray            # (S,)
    policy: TabularPolicy
    residual: float


def _transformed_reward(mdp, ref, lam):
    if lam > 0 and np.any(ref.probs <= 0):
        raise DomainError("reference policy must be strictly positive when lambda > 0")
    if lam == 0:
        return mdp.reward
    return mdp.reward + lam * np.log(ref.probs)


def _backup(mdp, r_tilde, v, temp):
    # log-sum-exp stabilized at temperature temp
    q = r_tilde + mdp.gamma * (mdp.transition @ v)
    m = q.max(axis=1, keepdims=True)
    v_new = m[:, 0] + temp * np.log(np.exp((q - m) / temp).sum(axis=1))
    return v_new, q


def softmax_value_iteration(mdp, ref, tau, lam, tol=1e-10, max_sweeps=100_000):
    """Softmax Bellman iteration on the reference-transformed rewards.

    Iterates to sup-norm tolerance for the discounted case, or runs exactly
    ``horizon`` backward passes when the MDP is finite-horizon.
    """
    temp = tau + lam
    if temp <= 0:
        raise ConfigError("tau + lambda must be > 0 for the softmax solver")
    r_tilde = _transformed_reward(mdp, ref, lam)
    v = np.zeros(mdp.n_states)
    if mdp.horizon is not None:
        for _ in range(mdp.horizon):
            v_new, q = _backup(mdp, r_tilde, v, temp)
            residual = float(np.max(np.abs(v_new - v)))
            v = v_new
    else:
        residual = np.inf
        for _ in range(max_sweeps):
            v_new, q = _backup(mdp, r_tilde, v, temp)
            residual = float(np.max(np.abs(v_new - v)))
            v = v_new
            if residual <= tol:
                break
    logits = (q - v[:, None]) / temp
    logits -= logits.max(axis=1, keepdims=True)
    pi = np.exp(logits)
    pi /= pi.sum(axis=1, keepdims=True)
    return SoftmaxSolution(values=v, policy=TabularPolicy(pi), residual=residual)


def verify_consistency(mdp, solution, ref, tau, lam, d):
    """Max absolute violation of the d-step softmax identity over every
    start state and every action sequence of length d, with expectations
    over stochastic transitions taken exactly."""
    temp = tau + lam
    r_tilde = _transformed_reward(mdp, ref, lam)
    # per-(s, a) path term: r + lam log ref - (tau+lam) log pi*
    c = r_tilde - temp * np.log(solution.policy.probs)
    v = solution.values
    S = mdp.n_states
    worst = 0.0

    def recurse(m, depth, acc):
        # m: (S, S) row i = state distribution after the prefix from start i
        nonlocal worst
        if depth == d:
            rhs = acc + mdp.gamma ** d * (m @ v)
            worst = max(worst, float(np.max(np.abs(rhs - v))))
            return
        for a in range(mdp.n_actions):
            term = mdp.gamma ** depth * (m @ c[:, a])
            recurse(m @ mdp.transition[:, a, :], depth + 1, acc + term)

    recurse(np.eye(S), 0, np.zeros(S))
    return worst


def exact_trajectory_kl(mdp, pi_a, pi_b, max_nodes=10_000_000):
    """KL between the length-H trajectory distributions of two tabular
    policies, by exhaustive enumeration from the initial state."""
    if mdp.horizon is None:
        raise InfeasibleError("trajectory KL requires a finite horizon")
    if np.any((pi_a.probs > 0) & (pi_b.probs <= 0)):
        raise DomainError("pi_b must be positive wherever pi_a is positive")
    count = 0
    total = 0.0

    def recurse(s, t, p_a, log_ratio):
        nonlocal count, total
        count += 1
        if count > max_nodes:
            raise InfeasibleError("trajectory enumeration exceeds the node budget")
        if t == mdp.horizon:
            total += p_a * log_ratio
            return
        for a in range(mdp.n_actions):
            qa = pi_a.probs[s, a]
            if qa == 0.0:
                continue
            step_ratio = np.log(qa) - np.log(pi_b.probs[s, a])
            for s2 in np.flatnonzero(mdp.transition[s, a]):
                recurse(int(s2), t + 1, p_a * qa * mdp.transition[s, a, s2],
                        log_ratio + step_ratio)

    recurse(mdp.s0, 0, 1.0, 0.0)
    return total


def evaluate_objectives(mdp, pi, ref, tau, lam):
    """Per-state expected reward, discounted entropy, discounted relative
    entropy, and the entropy / relative-entropy regularized objectives."""
    if mdp.horizon is None and mdp.gamma >= 1.0:
        raise ConfigError("need gamma < 1 or a finite horizon")
    probs = pi.probs
    p_pi = np.einsum("sa,sat->st", probs, mdp.transition)
    r_er = np.sum(probs * mdp.reward, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(probs > 0, np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    r_h = -np.sum(probs * logp, axis=1)
    if np.any((probs > 0) & (ref.probs <= 0)):
        raise DomainError("reference must be positive where pi is positive")
    r_g = np.sum(np.where(probs > 0, probs * (logp - np.log(ref.probs)), 0.0), axis=1)

    def solve(r_vec):
        if mdp.horizon is not None:
            v = np.zeros(mdp.n_states)
            for _ in range(mdp.horizon):
                v = r_vec + mdp.gamma * (p_pi @ v)
            return v
        return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi, r_vec)

    o_er = solve(r_er)
    ent = solve(r_h)
    rel = solve(r_g)
    o_ent = o_er + tau * ent
    o_relent = o_ent - lam * rel
    return {"O_ER": o_er, "H": ent, "G": rel, "O_ENT": o_ent, "O_RELENT": o_relent}


def random_mdp(seed, stochastic=False, gamma=0.9):
    """Reproducible random MDP: S in 2..8, A in 2..4, rewards uniform in
    [-1, 1], transitions one-hot or Dirichlet(1) rows."""
    rng = np.random.default_rng(seed)
    S = int(rng.integers(2, 9))
    A = int(rng.integers(2, 5))
    reward = rng.uniform(-1.0, 1.0, size=(S, A))
    if stochastic:
        transition = rng.dirichlet(np.ones(S), size=(S, A))
    else:
        transition = np.zeros((S, A, S))
        nxt = rng.integers(0, S, size=(S, A))
        for s in range(S):
            for a in range(A):
                transition[s, a, nxt[s, a]] = 1.0
    return TabularMdp(transition=transition, reward=reward, gamma=gamma)


def random_reference(seed, n_states, n_actions):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(n_actions), size=n_states)
    probs = probs + 0.05                       # keep strictly positive
    probs /= probs.sum(axis=1, keepdims=True)
    return TabularPolicy(probs)


def corpus():
    """The committed verification corpus: (seed, mdp, reference) triples."""
    out = []
    for seed in CORPUS_SEEDS:
        mdp = random_mdp(seed, stochastic=False)
        ref = random_reference(seed + 500_000, mdp.n_states, mdp.n_actions)
        out.append((seed, mdp, ref))
    return out


def chain_mdp_from_table(table, gamma):
    """Oracle view of the chain-env JSON table (infinite-horizon discounted)."""
    S, A = table["num_states"], table["num_actions"]
    transition = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            transition[s, a, int(table["transitions"][s][a])] = 1.0
    return TabularMdp(transition=transition,
                      reward=np.array(table["rewards"], dtype=np.float64),
                      gamma=gamma)


def chain_mdp_from_json(path, gamma):
    with open(path) as f:
        return chain_mdp_from_table(json.load(f), gamma)


def layered_tree_mdp(depth, seed):
    """Deterministic layered binary tree with an absorbing zero-reward sink:
    every state is reachable at exactly one time step, so the stationary
    softmax solution coincides with the finite-horizon one.  Used to check
    the trust-region coefficient tuner against exact trajectory KL."""
    rng = np.random.default_rng(seed)
    n_nodes = 2 ** depth - 1
    S = n_nodes + 1                         # + sink
    A = 2
    sink = n_nodes
    transition = np.zeros((S, A, S))
    reward = np.zeros((S, A))
    for node in range(n_nodes):
        for a in range(A):
            child = 2 * node + 1 + a
            transition[node, a, child if child < n_nodes else sink] = 1.0
            reward[node, a] = rng.uniform(-1.0, 1.0)
    transition[sink, :, sink] = 1.0
    return TabularMdp(transition=transition, reward=reward, gamma=1.0,
                      horizon=depth, s0=0)


def sample_episode_returns(mdp, policy, n_episodes, rng):
    """Undiscounted returns of episodes sampled from a tabular policy over
    the MDP's finite horizon."""
    if mdp.horizon is None:
        raise InfeasibleError("episode sampling requires a finite horizon")
    returns = np.zeros(n_episodes)
    for k in range(n_episodes):
        s = mdp.s0
        total = 0.0
        for _ in range(mdp.horizon):
            a = int(rng.choice(mdp.n_actions, p=policy.probs[s]))
            total += mdp.reward[s, a]
            s = int(rng.choice(mdp.n_states, p=mdp.transition[s, a]))
        returns[k] = total
    return returns


class TabularPolicyAdapter:
    """Presents a tabular policy through the model gradient surface used by
    the consistency loss (one-hot observations, empty parameter vector)."""

    def __init__(self, policy):
        self.probs = policy.probs

    def _states(self, obs):
        return np.argmax(np.atleast_2d(np.asarray(obs)), axis=1)

    def log_density_batch(self, obs, actions):
        s = self._states(obs)
        a = np.asarray(actions, dtype=np.int64).ravel()
        return np.log(self.probs[s, a])

    def log_density_weighted_grad(self, obs, actions, weights):
        return self.log_density_batch(obs, actions), np.zeros(0)


class TabularValueAdapter:
    """One-hot-observation view of a tabular value vector."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    def value_batch(self, obs):
        s = np.argmax(np.atleast_2d(np.asarray(obs)), axis=1)
        return self.values[s]

    def value_weighted_grad(self, obs, weights):
        return self.value_batch(obs), np.zeros(0)
