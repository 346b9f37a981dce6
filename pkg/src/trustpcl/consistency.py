"""Multi-step consistency error and its Huber-damped batch loss.

For a window s_t..s_{t+d'} the signed error is

    C = -V(s_t) + gamma^{d'} V_end
        + sum_i gamma^i (r_i - (tau+lam) log pi(a_i|s_i) + lam log ref(a_i|s_i))

where V_end is 0 past a true terminal and otherwise the lagged value net
at the window's final observation.  The live value enters only through
-V(s_t) and the live policy only through its log-densities, so gradients
reduce to a single weighted backward pass per network; batch_loss_and_grads
exploits that to evaluate a whole replay batch with a handful of matrix
passes.
"""

from dataclasses import dataclass

import numpy as np

from .nn import huber

END_INTERIOR = "interior"
END_TERMINAL = "terminal"
END_TIMEOUT = "timeout"


@dataclass
class ConsistencyConfig:
    d: int = 10
    gamma: float = 0.995
    tau: float = 0.0
    lam: float = 0.0
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("rollout length d must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("discount must satisfy 0 < gamma <= 1")
        if self.tau < 0 or self.lam < 0:
            raise ValueError("tau and lambda must be >= 0")


@dataclass
class Window:
    obs: np.ndarray        # (d'+1, obs_dim); last row is the bootstrap obs
    actions: np.ndarray    # (d', action_dim) or (d',) ints
    rewards: np.ndarray    # (d',)
    end_kind: str = END_INTERIOR

    def __len__(self):
        return len(self.rewards)


def segment_windows(segment, d):
    """Every start-offset window within one replay segment, truncated at
    the segment end."""
    n = len(segment)
    obs = np.array([t.obs for t in segment.transitions] + [segment.final_obs])
    actions = np.array([t.action for t in segment.transitions])
    rewards = np.array([t.reward for t in segment.transitions])
    last = segment.transitions[-1]
    windows = []
    for t in range(n):
        e = min(t + d, n)
        if e == n:
            kind = END_TERMINAL if last.terminal else (
                END_TIMEOUT if last.timeout else END_INTERIOR)
        else:
            kind = END_INTERIOR
        windows.append(Window(obs=obs[t:e + 1], actions=actions[t:e],
                              rewards=rewards[t:e], end_kind=kind))
    return windows


def consistency_error(window, policy, value, lag_policy, lag_value, cfg):
    """Signed consistency error of one window with exact gradients for the
    live policy and value parameters (lagged terms are constants)."""
    dp = len(window)
    temp = cfg.tau + cfg.lam
    disc = cfg.gamma ** np.arange(dp)
    logp, grad_theta = policy.log_density_weighted_grad(
        window.obs[:-1], window.actions, -temp * disc)
    if cfg.lam > 0:
        logref = lag_policy.log_density_batch(window.obs[:-1], window.actions)
    else:
        logref = np.zeros(dp)
    v0, grad_phi = value.value_weighted_grad(window.obs[:1], np.array([-1.0]))
    if window.end_kind == END_TERMINAL:
        v_end = 0.0
    else:
        v_end = float(lag_value.value_batch(window.obs[-1:])[0])
    c = (-v0[0] + cfg.gamma ** dp * v_end
         + float(np.sum(disc * (window.rewards - temp * logp + cfg.lam * logref))))
    return float(c), grad_theta, grad_phi


def entropy_only_error(window, policy, value, lag_value, cfg):
    """The entropy-regularized special case (lam = 0): the PCL residual."""
    cfg0 = ConsistencyConfig(d=cfg.d, gamma=cfg.gamma, tau=cfg.tau, lam=0.0,
                             huber_delta=cfg.huber_delta)
    c, _, _ = consistency_error(window, policy, value, policy, lag_value, cfg0)
    return c


def batch_loss_and_grads(segments, policy, value, lag_policy, lag_value, cfg):
    """Huber loss and exact gradients over every window of every segment.

    Windows are enumerated at every start offset, truncating at segment
    ends; the whole batch costs one forward/backward per network.
    """
    if not segments:
        raise ValueError("batch must contain at least one segment")
    temp = cfg.tau + cfg.lam
    d = cfg.d

    all_obs, all_act, end_obs = [], [], []
    seg_slices = []
    k = 0
    for seg in segments:
        n = len(seg)
        obs = np.array([t.obs for t in seg.transitions])
        all_obs.append(obs)
        all_act.extend(t.action for t in seg.transitions)
        ends = []
        for t in range(n):
            e = min(t + d, n)
            ends.append(obs[e] if e < n else seg.final_obs)
        end_obs.append(np.array(ends))
        seg_slices.append((k, k + n))
        k += n
    all_obs = np.concatenate(all_obs)
    all_act = np.array(all_act)
    end_obs = np.concatenate(end_obs)

    logp = policy.log_density_batch(all_obs, all_act)
    logref = (lag_policy.log_density_batch(all_obs, all_act)
              if cfg.lam > 0 else np.zeros(k))
    v_start = value.value_batch(all_obs)
    v_end = lag_value.value_batch(end_obs)

    loss = 0.0
    theta_w = np.zeros(k)
    phi_w = np.zeros(k)
    for seg, (lo, hi) in zip(segments, seg_slices):
        n = hi - lo
        rewards = np.array([t.reward for t in seg.transitions])
        g = rewards - temp * logp[lo:hi] + cfg.lam * logref[lo:hi]
        # suffix discounted sums: suf[t] = sum_{i>=t} gamma^{i-t} g_i
        suf = np.zeros(n + 1)
        for t in range(n - 1, -1, -1):
            suf[t] = g[t] + cfg.gamma * suf[t + 1]
        t_idx = np.arange(n)
        dprime = np.minimum(d, n - t_idx)
        e_idx = t_idx + dprime
        gamma_dp = cfg.gamma ** dprime
        window_sum = suf[t_idx] - gamma_dp * suf[e_idx]
        v_boot = v_end[lo:hi].copy()
        if seg.transitions[-1].terminal:
            v_boot[e_idx == n] = 0.0
        c = -v_start[lo:hi] + gamma_dp * v_boot + window_sum
        hval, hder = huber(c, cfg.huber_delta)
        loss += float(np.sum(hval))
        # per-step policy weight: sum over covering windows of h' * gamma^offset
        u = np.zeros(n)
        for j in range(min(d, n)):
            u[j:] += hder[:n - j] * cfg.gamma ** j
        theta_w[lo:hi] = -temp * u
        phi_w[lo:hi] = -hder
    _, grad_theta = policy.log_density_weighted_grad(all_obs, all_act, theta_w)
    _, grad_phi = value.value_weighted_grad(all_obs, phi_w)
    return loss, grad_theta, grad_phi
