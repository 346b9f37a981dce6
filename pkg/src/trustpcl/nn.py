"""Minimal dense network numerics: tanh MLPs with exact reverse-mode
gradients, the Adam update, the Huber penalty, and a finite-difference
gradient checker.

Everything is float64.  Forward passes accept a single input vector or a
batch of rows; backward passes return exact gradients so the consistency
loss can be checked against finite differences to tight tolerances.
"""

from dataclasses import dataclass, field

import numpy as np

HIDDEN_WIDTH = 64


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NumericError(FloatingPointError):
    """Raised when a gradient goes non-finite; the run aborts rather than
    silently clipping."""


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ShapeError(f"expected vector or matrix input, got ndim={x.ndim}")


class Mlp:
    """Feed-forward net: tanh hidden layers, identity output layer.

    Hidden layers use scaled-uniform init; the output layer is scaled down
    by 0.01 so initial outputs sit near zero.
    """

    def __init__(self, in_dim, out_dim, hidden=(HIDDEN_WIDTH, HIDDEN_WIDTH),
                 rng=None, out_scale=0.01):
        sizes = [in_dim, *hidden, out_dim]
        self.sizes = sizes
        self.weights = []
        self.biases = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            if i == len(sizes) - 2:
                w = w * out_scale
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_flat(self):
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeError(f"flat vector length {vec.shape} != {self.n_params}")
        k = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = vec[k:k + w.size].reshape(w.shape).copy()
            k += w.size
            self.biases[i] = vec[k:k + b.size].copy()
            k += b.size

    def forward(self, x):
        """Returns (output, cache).  x may be a vector or a (n, in_dim) batch;
        the output matches the input's batching."""
        xb, single = _as_batch(x)
        if xb.shape[1] != self.in_dim:
            raise ShapeError(f"input dim {xb.shape[1]} != {self.in_dim}")
        acts = [xb]
        h = xb
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.tanh(z)
            acts.append(h)
        out = h[0] if single else h
        return out, (acts, single)

    def backward(self, cache, output_grad):
        """Exact gradients of sum(output * output_grad).

        Returns (input_grad, flat_param_grads) with the same batching as the
        forward call that produced the cache.
        """
        acts, single = cache
        dy, _ = _as_batch(output_grad)
        if dy.shape != acts[-1].shape:
            raise ShapeError(f"output_grad shape {dy.shape} != {acts[-1].shape}")
        w_grads = [None] * len(self.weights)
        b_grads = [None] * len(self.biases)
        delta = dy
        for i in range(len(self.weights) - 1, -1, -1):
            h_in = acts[i]
            w_grads[i] = h_in.T @ delta
            b_grads[i] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
            if i > 0:
                # tanh'(z) = 1 - tanh(z)^2, and acts[i] stores tanh(z)
                delta = delta * (1.0 - acts[i] ** 2)
        parts = []
        for wg, bg in zip(w_grads, b_grads):
            parts.append(wg.ravel())
            parts.append(bg)
        input_grad = delta[0] if single else delta
        return input_grad, np.concatenate(parts)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n, lr=1e-4):
        return cls(m=np.zeros(n), v=np.zeros(n), lr=lr)


def adam_step(state, params, grads):
    """One bias-corrected Adam update.  Returns (new_params, state); the
    state is updated in place."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError("params/grads/state length mismatch")
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise NumericError(f"non-finite gradient at coordinate {bad}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads ** 2
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, state


def huber(x, delta=1.0):
    """Huber penalty and its derivative.  Works elementwise on arrays."""
    if delta <= 0:
        raise ConfigError(f"huber delta must be > 0, got {delta}")
    x = np.asarray(x, dtype=np.float64)
    absx = np.abs(x)
    value = np.where(absx <= delta, 0.5 * x ** 2, delta * (absx - 0.5 * delta))
    deriv = np.clip(x, -delta, delta)
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def finite_diff_check(loss_and_grad_fn, params, h=1e-5, floor_frac=1e-5):
    """Max relative error between the analytic gradient of loss_and_grad_fn
    and central finite differences.

    Relative error is 0 when both the analytic and numeric entries are
    below 1e-12 in magnitude.  The denominator is floored at floor_frac
    times the largest analytic entry so that coordinates with near-zero
    true gradients are judged against the gradient's scale instead of
    against finite-difference roundoff noise.
    """
    params = np.asarray(params, dtype=np.float64)
    _, analytic = loss_and_grad_fn(params)
    analytic = np.asarray(analytic, dtype=np.float64)
    floor = floor_frac * float(np.max(np.abs(analytic), initial=0.0))
    worst = 0.0
    for i in range(params.size):
        p_plus = params.copy()
        p_plus[i] += h
        p_minus = params.copy()
        p_minus[i] -= h
        num = (loss_and_grad_fn(p_plus)[0] - loss_and_grad_fn(p_minus)[0]) / (2.0 * h)
        a = analytic[i]
        if abs(a) <= 1e-12 and abs(num) <= 1e-12:
            continue
        err = abs(a - num) / max(abs(a), abs(num), floor)
        worst = max(worst, err)
    return worst
