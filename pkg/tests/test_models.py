import numpy as np
import pytest

from trustpcl.models import (CategoricalPolicy, GaussianPolicy, ValueFunction,
                             load_params, save_params)
from trustpcl.nn import finite_diff_check


def zero_weights(net, out_bias=None):
    for i in range(len(net.weights)):
        net.weights[i][:] = 0.0
        net.biases[i][:] = 0.0
    if out_bias is not None:
        net.biases[-1][:] = np.asarray(out_bias, dtype=np.float64)


class TestGaussianPolicy:
    def test_tiny_std_samples_at_mean(self):
        pi = GaussianPolicy(3, 2, rng=np.random.default_rng(0))
        pi.log_std[:] = -20.0
        obs = np.array([0.1, -0.3, 0.5])
        a = pi.sample(obs, np.random.default_rng(1))
        assert np.max(np.abs(a - pi.greedy(obs))) < 1e-8

    def test_sampling_is_seed_deterministic(self):
        pi = GaussianPolicy(2, 2, rng=np.random.default_rng(0))
        obs = np.array([0.2, 0.7])
        a = pi.sample(obs, np.random.default_rng(42))
        b = pi.sample(obs, np.random.default_rng(42))
        assert np.array_equal(a, b)

    def test_log_density_at_mean_unit_std(self):
        # 2-D standard normal at its mode: -log(2*pi)
        pi = GaussianPolicy(2, 2, rng=np.random.default_rng(0))
        zero_weights(pi.mean_net, out_bias=[0.4, -0.2])
        obs = np.zeros(2)
        logp = pi.log_density(obs, np.array([0.4, -0.2]))
        assert abs(logp - (-np.log(2.0 * np.pi))) < 1e-12

    def test_density_integrates_to_one(self):
        pi = GaussianPolicy(2, 1, rng=np.random.default_rng(3))
        pi.log_std[:] = 0.3
        obs = np.array([0.5, -0.5])
        mu = pi.greedy(obs)[0]
        sigma = float(np.exp(pi.log_std[0]))
        grid = np.linspace(mu - 8 * sigma, mu + 8 * sigma, 40001)
        dens = np.exp(pi.log_density_batch(np.tile(obs, (len(grid), 1)),
                                           grid[:, None]))
        assert abs(np.trapezoid(dens, grid) - 1.0) < 1e-6

    def test_log_density_gradient(self):
        rng = np.random.default_rng(5)
        pi = GaussianPolicy(2, 2, rng=rng)
        obs = rng.standard_normal((3, 2))
        actions = rng.standard_normal((3, 2))
        w = rng.standard_normal(3)

        def loss(p):
            pi.set_flat(p)
            logp, grad = pi.log_density_weighted_grad(obs, actions, w)
            return float(logp @ w), grad

        assert finite_diff_check(loss, pi.get_flat()) < 1e-5

    def test_clone_matches_bitwise(self):
        pi = GaussianPolicy(3, 2, rng=np.random.default_rng(9))
        other = pi.clone()
        obs = np.array([0.1, 0.2, 0.3])
        act = np.array([1.0, -1.0])
        assert pi.log_density(obs, act) == other.log_density(obs, act)
        # the clone is independent storage
        other.log_std[:] = 5.0
        assert pi.log_std[0] == 0.0


class TestCategoricalPolicy:
    def make_fixed(self, logits):
        pi = CategoricalPolicy(2, len(logits), rng=np.random.default_rng(0))
        zero_weights(pi.logit_net, out_bias=logits)
        return pi

    def test_sampling_frequencies(self):
        # logits (ln 3, 0) -> probabilities (0.75, 0.25)
        pi = self.make_fixed([np.log(3.0), 0.0])
        rng = np.random.default_rng(0)
        obs = np.zeros(2)
        n = 100_000
        hits = sum(pi.sample(obs, rng) == 0 for _ in range(n))
        assert abs(hits / n - 0.75) < 0.01

    def test_uniform_log_density(self):
        pi = self.make_fixed([0.0, 0.0, 0.0, 0.0])
        assert abs(pi.log_density(np.ones(2), 2) - (-np.log(4.0))) < 1e-12

    def test_probs_sum_to_one(self):
        pi = CategoricalPolicy(3, 5, rng=np.random.default_rng(1))
        probs = pi.action_probs(np.array([0.3, -0.1, 0.9]))
        assert abs(probs.sum() - 1.0) < 1e-12
        assert np.all(probs > 0.0)

    def test_greedy_is_argmax_lowest_index_tie(self):
        pi = self.make_fixed([0.2, 0.2, 0.1])
        assert pi.greedy(np.zeros(2)) == 0
        pi2 = self.make_fixed([0.1, 0.5, 0.2])
        assert pi2.greedy(np.zeros(2)) == 1

    def test_log_density_gradient(self):
        rng = np.random.default_rng(6)
        pi = CategoricalPolicy(2, 3, rng=rng)
        obs = rng.standard_normal((4, 2))
        actions = np.array([0, 2, 1, 2])
        w = rng.standard_normal(4)

        def loss(p):
            pi.set_flat(p)
            logp, grad = pi.log_density_weighted_grad(obs, actions, w)
            return float(logp @ w), grad

        assert finite_diff_check(loss, pi.get_flat()) < 1e-5

    def test_extreme_logits_stable(self):
        pi = self.make_fixed([1000.0, 0.0])
        logp = pi.log_density(np.zeros(2), 0)
        assert np.isfinite(logp) and abs(logp) < 1e-12


class TestValueFunction:
    def test_constant_output_from_bias(self):
        v = ValueFunction(3, rng=np.random.default_rng(0))
        zero_weights(v.net, out_bias=[7.0])
        assert v.value(np.array([1.0, -2.0, 0.5])) == 7.0
        assert v.value(np.zeros(3)) == 7.0

    def test_batch_matches_single(self):
        v = ValueFunction(2, rng=np.random.default_rng(4))
        obs = np.random.default_rng(0).standard_normal((5, 2))
        batch = v.value_batch(obs)
        singles = [v.value(row) for row in obs]
        assert np.max(np.abs(batch - singles)) < 1e-14

    def test_value_gradient(self):
        rng = np.random.default_rng(8)
        v = ValueFunction(2, rng=rng)
        obs = rng.standard_normal((3, 2))
        w = rng.standard_normal(3)

        def loss(p):
            v.set_flat(p)
            vals, grad = v.value_weighted_grad(obs, w)
            return float(vals @ w), grad

        assert finite_diff_check(loss, v.get_flat()) < 1e-5


class TestCheckpoints:
    @pytest.mark.parametrize("kind,model", [
        ("gaussian", GaussianPolicy(3, 2, rng=np.random.default_rng(11))),
        ("categorical", CategoricalPolicy(4, 3, rng=np.random.default_rng(12))),
        ("value", ValueFunction(3, rng=np.random.default_rng(13))),
    ])
    def test_round_trip(self, tmp_path, kind, model):
        path = tmp_path / f"{kind}.json"
        save_params(path, model, kind)
        loaded = load_params(path)
        assert np.array_equal(loaded.get_flat(), model.get_flat())
