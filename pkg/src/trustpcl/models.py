"""Policy and value heads.

GaussianPolicy: diagonal Gaussian over continuous actions with a
state-independent log-std vector.  CategoricalPolicy: softmax over K
discrete actions.  ValueFunction: scalar net over the squared-augmented
observation [s, s*s].

All heads expose the same gradient surface used by the consistency loss:
``log_density_weighted_grad`` / ``value_weighted_grad`` evaluate a whole
batch in one forward/backward pass and return the gradient of the
weighted sum, which is all the loss ever needs.
"""

import json

import numpy as np

from .nn import Mlp, ShapeError

LOG_2PI = np.log(2.0 * np.pi)


class GaussianPolicy:
    def __init__(self, obs_dim, action_dim, rng=None):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.mean_net = Mlp(obs_dim, action_dim, rng=rng)
        self.log_std = np.zeros(action_dim)

    @property
    def n_params(self):
        return self.mean_net.n_params + self.action_dim

    def get_flat(self):
        return np.concatenate([self.mean_net.get_flat(), self.log_std])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeError("bad parameter vector length")
        self.mean_net.set_flat(vec[:self.mean_net.n_params])
        self.log_std = vec[self.mean_net.n_params:].copy()

    def clone(self):
        other = GaussianPolicy.__new__(GaussianPolicy)
        other.obs_dim = self.obs_dim
        other.action_dim = self.action_dim
        other.mean_net = Mlp(self.obs_dim, self.action_dim)
        other.log_std = np.zeros(self.action_dim)
        other.set_flat(self.get_flat())
        return other

    def sample(self, obs, rng):
        mu, _ = self.mean_net.forward(obs)
        return mu + np.exp(self.log_std) * rng.standard_normal(self.action_dim)

    def greedy(self, obs):
        mu, _ = self.mean_net.forward(obs)
        return mu

    def log_density_batch(self, obs, actions):
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        mu, _ = self.mean_net.forward(obs)
        z = (actions - mu) * np.exp(-self.log_std)
        return -0.5 * np.sum(z ** 2 + 2.0 * self.log_std + LOG_2PI, axis=1)

    def log_density(self, obs, action):
        return float(self.log_density_batch(obs, action)[0])

    def log_density_weighted_grad(self, obs, actions, weights):
        """Log-densities for the batch plus the exact parameter gradient of
        sum_i weights[i] * log pi(a_i | s_i)."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        weights = np.asarray(weights, dtype=np.float64)
        mu, cache = self.mean_net.forward(obs)
        inv_var = np.exp(-2.0 * self.log_std)
        diff = actions - mu
        z2 = diff ** 2 * inv_var
        logp = -0.5 * np.sum(z2 + 2.0 * self.log_std + LOG_2PI, axis=1)
        # d logp / d mu_j = (a_j - mu_j) / sigma_j^2
        dmu = weights[:, None] * diff * inv_var
        _, net_grad = self.mean_net.backward(cache, dmu)
        # d logp / d xi_j = ((a_j - mu_j)/sigma_j)^2 - 1
        dxi = np.sum(weights[:, None] * (z2 - 1.0), axis=0)
        return logp, np.concatenate([net_grad, dxi])

    def log_density_with_grad(self, obs, action):
        logp, grad = self.log_density_weighted_grad(obs, action, np.ones(1))
        return float(logp[0]), grad


class CategoricalPolicy:
    def __init__(self, obs_dim, n_actions, rng=None):
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.logit_net = Mlp(obs_dim, n_actions, rng=rng)

    @property
    def n_params(self):
        return self.logit_net.n_params

    def get_flat(self):
        return self.logit_net.get_flat()

    def set_flat(self, vec):
        self.logit_net.set_flat(vec)

    def clone(self):
        other = CategoricalPolicy.__new__(CategoricalPolicy)
        other.obs_dim = self.obs_dim
        other.n_actions = self.n_actions
        other.logit_net = Mlp(self.obs_dim, self.n_actions)
        other.set_flat(self.get_flat())
        return other

    def _log_probs(self, obs):
        logits, cache = self.logit_net.forward(np.atleast_2d(np.asarray(obs, dtype=np.float64)))
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return shifted - log_z, cache

    def sample(self, obs, rng):
        logp, _ = self._log_probs(obs)
        probs = np.exp(logp[0])
        return int(rng.choice(self.n_actions, p=probs / probs.sum()))

    def greedy(self, obs):
        logits, _ = self.logit_net.forward(obs)
        return int(np.argmax(logits))

    def action_probs(self, obs):
        logp, _ = self._log_probs(obs)
        return np.exp(logp[0])

    def log_density_batch(self, obs, actions):
        logp, _ = self._log_probs(obs)
        idx = np.asarray(actions, dtype=np.int64).ravel()
        return logp[np.arange(len(idx)), idx]

    def log_density(self, obs, action):
        return float(self.log_density_batch(obs, [action])[0])

    def log_density_weighted_grad(self, obs, actions, weights):
        logp, cache = self._log_probs(obs)
        idx = np.asarray(actions, dtype=np.int64).ravel()
        weights = np.asarray(weights, dtype=np.float64)
        rows = np.arange(len(idx))
        probs = np.exp(logp)
        dlogits = -probs * weights[:, None]
        dlogits[rows, idx] += weights
        _, net_grad = self.logit_net.backward(cache, dlogits)
        return logp[rows, idx], net_grad

    def log_density_with_grad(self, obs, action):
        logp, grad = self.log_density_weighted_grad(obs, [action], np.ones(1))
        return float(logp[0]), grad


class ValueFunction:
    """Scalar value net evaluated on the augmented observation [s, s*s]."""

    def __init__(self, obs_dim, rng=None):
        self.obs_dim = obs_dim
        self.net = Mlp(2 * obs_dim, 1, rng=rng)

    @property
    def n_params(self):
        return self.net.n_params

    def get_flat(self):
        return self.net.get_flat()

    def set_flat(self, vec):
        self.net.set_flat(vec)

    def clone(self):
        other = ValueFunction.__new__(ValueFunction)
        other.obs_dim = self.obs_dim
        other.net = Mlp(2 * self.obs_dim, 1)
        other.set_flat(self.get_flat())
        return other

    @staticmethod
    def _augment(obs):
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        return np.concatenate([obs, obs * obs], axis=1)

    def value_batch(self, obs):
        out, _ = self.net.forward(self._augment(obs))
        return out[:, 0]

    def value(self, obs):
        return float(self.value_batch(obs)[0])

    def value_weighted_grad(self, obs, weights):
        """Values for the batch plus the gradient of sum_i weights[i] * V(s_i)."""
        weights = np.asarray(weights, dtype=np.float64)
        out, cache = self.net.forward(self._augment(obs))
        _, grad = self.net.backward(cache, weights[:, None])
        return out[:, 0], grad

    def value_with_grad(self, obs):
        vals, grad = self.value_weighted_grad(obs, np.ones(1))
        return float(vals[0]), grad


def save_params(path, model, kind):
    """Checkpoint format: JSON with a shape manifest and the flat parameter
    list.  ``kind`` is one of gaussian / categorical / value."""
    meta = {"kind": kind, "flat": model.get_flat().tolist()}
    if kind == "gaussian":
        meta["obs_dim"] = model.obs_dim
        meta["action_dim"] = model.action_dim
    elif kind == "categorical":
        meta["obs_dim"] = model.obs_dim
        meta["n_actions"] = model.n_actions
    elif kind == "value":
        meta["obs_dim"] = model.obs_dim
    else:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    with open(path, "w") as f:
        json.dump(meta, f)


def load_params(path):
    with open(path) as f:
        meta = json.load(f)
    kind = meta["kind"]
    if kind == "gaussian":
        model = GaussianPolicy(meta["obs_dim"], meta["action_dim"])
    elif kind == "categorical":
        model = CategoricalPolicy(meta["obs_dim"], meta["n_actions"])
    elif kind == "value":
        model = ValueFunction(meta["obs_dim"])
    else:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    model.set_flat(np.array(meta["flat"], dtype=np.float64))
    return model
