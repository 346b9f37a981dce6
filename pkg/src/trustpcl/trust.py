"""Trust-region mechanics: lagged prior parameters and the automatic
calibration of the relative-entropy coefficient from a target divergence.

The coefficient solver inverts the analytic trajectory-KL estimator

    log Z = log mean_k exp(R_k / lam)
    KL    = -log Z + mean_k (R_k / lam) exp(R_k / lam - log Z)

which is monotone decreasing in lam, so bisection in log lam is exact.
"""

from dataclasses import dataclass, field

import numpy as np

from .replay import InsufficientData


class ConfigError(ValueError):
    pass


@dataclass
class LagState:
    policy_params: np.ndarray
    value_params: np.ndarray
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("lag coefficient alpha must be in [0, 1]")


def update_lag(lag, theta, phi):
    """theta_lag' = alpha * theta_lag + (1 - alpha) * theta, coordinatewise."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if theta.shape != lag.policy_params.shape or phi.shape != lag.value_params.shape:
        raise ValueError("lag/parameter shape mismatch")
    a = lag.alpha
    return LagState(policy_params=a * lag.policy_params + (1.0 - a) * theta,
                    value_params=a * lag.value_params + (1.0 - a) * phi,
                    alpha=a)


@dataclass
class KlEstimate:
    kl: float
    log_z: float
    n: int


def estimate_kl(returns, lam):
    """Sample estimate of the trajectory KL between the exponentiated-return
    tilt of the behavior policy and the behavior policy itself."""
    if lam <= 0:
        raise ConfigError("lambda must be > 0")
    returns = np.asarray(returns, dtype=np.float64)
    if returns.size < 2:
        raise InsufficientData("need at least 2 returns to estimate KL")
    w = returns / lam
    m = float(w.max())
    log_z = m + np.log(np.mean(np.exp(w - m)))
    kl = float(-log_z + np.mean(w * np.exp(w - log_z)))
    return KlEstimate(kl=kl, log_z=float(log_z), n=returns.size)


@dataclass
class LambdaSolver:
    lam_min: float = 1e-4
    lam_max: float = 1e4
    rtol: float = 1e-3
    max_iter: int = 100
    current: float = 1.0


def solve_lambda(episode_log, epsilon, solver):
    """Finds lam with estimated KL equal to epsilon times the mean episode
    length, by bisection in log lam.  Returns a bound when the target is
    unattainable, and keeps the previous lam when the log is too short."""
    if epsilon <= 0:
        raise ConfigError("epsilon must be > 0")
    try:
        returns = episode_log.returns()
        mean_len = episode_log.mean_length()
    except InsufficientData:
        return solver.current
    if returns.size < 2:
        return solver.current
    target = epsilon * mean_len

    def kl_at(lam):
        return estimate_kl(returns, lam).kl

    if kl_at(solver.lam_min) <= target:
        solver.current = solver.lam_min
        return solver.current
    if kl_at(solver.lam_max) >= target:
        solver.current = solver.lam_max
        return solver.current
    lo, hi = np.log(solver.lam_min), np.log(solver.lam_max)
    lam = solver.current
    for _ in range(solver.max_iter):
        mid = 0.5 * (lo + hi)
        lam = float(np.exp(mid))
        kl = kl_at(lam)
        if abs(kl - target) <= solver.rtol * target:
            break
        if kl > target:
            lo = mid       # KL decreasing in lam: need larger lam
        else:
            hi = mid
    solver.current = lam
    return lam
