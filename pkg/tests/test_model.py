"""Forward pass, cross-entropy, and log-posterior gradients on tiny networks."""

import math

import numpy as np
import pytest

from ttbayes import inference as inf
from ttbayes import model as mdl
from ttbayes import tt
from ttbayes.priors import PriorConfig
from ttbayes.tt import FactorizedShape, TTShapeError


def tiny_net(seed=0, hidden_rank=3, out_rank=2):
    spec1 = mdl.LayerSpec(FactorizedShape((2, 4), (2, 2)), (1, hidden_rank, 1), "relu")
    spec2 = mdl.LayerSpec(FactorizedShape((2, 2), (2, 1)), (1, out_rank, 1), "softmax")
    net = mdl.Network((spec1, spec2))
    prior = PriorConfig()
    particle = mdl.init_particle(net, prior, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for lp in particle.layers:
        lp.rank_scales = [rng.gamma(2.0, 0.5, size=s.shape) + 0.05 for s in lp.rank_scales]
        lp.bias = 0.3 * rng.normal(size=lp.bias.shape)
    return net, particle, prior


def random_batch(net, n, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n, net.input_dim))
    y = np.zeros((n, net.class_count))
    y[np.arange(n), rng.integers(0, net.class_count, n)] = 1.0
    return x, y


def dense_clone_forward(net, particle, x):
    """Oracle: reconstruct every weight matrix and run a plain dense network."""
    a = x
    z = None
    for spec, lp in zip(net.layers, particle.layers):
        w = tt.tt_reconstruct(tt.TTMatrix(lp.cores))
        z = a @ w + lp.bias
        if spec.activation == "relu":
            a = np.maximum(z, 0.0)
        elif spec.activation == "identity":
            a = z
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestForward:
    def test_zero_weights_uniform_probabilities(self):
        net, particle, _ = tiny_net()
        for lp in particle.layers:
            lp.cores = [np.zeros_like(c) for c in lp.cores]
            lp.bias = np.zeros_like(lp.bias)
        x, _ = random_batch(net, 5)
        probs = mdl.forward(net, particle, x)
        assert np.allclose(probs, 1.0 / net.class_count, atol=1e-15)

    def test_softmax_of_zeros_is_half(self):
        assert np.allclose(mdl.softmax(np.zeros((1, 2))), 0.5)

    def test_matches_dense_clone(self):
        for seed in range(10):
            net, particle, _ = tiny_net(seed=seed)
            x, _ = random_batch(net, 6, seed=seed)
            tt_probs = mdl.forward(net, particle, x)
            dense_probs = dense_clone_forward(net, particle, x)
            assert np.abs(tt_probs - dense_probs).max() < 1e-10

    def test_rows_are_distributions(self):
        net, particle, _ = tiny_net(seed=3)
        x, _ = random_batch(net, 8, seed=3)
        probs = mdl.forward(net, particle, x)
        assert (probs >= 0).all()
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-12

    def test_dimension_mismatch(self):
        net, particle, _ = tiny_net()
        with pytest.raises(TTShapeError):
            mdl.forward(net, particle, np.zeros((2, net.input_dim + 1)))

    def test_softmax_large_logits_stable(self):
        probs = mdl.softmax(np.array([[1000.0, 0.0], [-1000.0, 0.0]]))
        assert np.isfinite(probs).all()
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-12


class TestCrossEntropy:
    def test_perfect_prediction_zero_loss(self):
        probs = np.array([[1.0, 0.0]])
        labels = np.array([[1.0, 0.0]])
        assert mdl.cross_entropy(probs, labels) == 0.0

    def test_uniform_ten_classes(self):
        probs = np.full((1, 10), 0.1)
        labels = np.zeros((1, 10))
        labels[0, 3] = 1.0
        assert np.isclose(mdl.cross_entropy(probs, labels), math.log(10.0), atol=1e-12)

    def test_batch_additivity(self):
        probs = np.array([[0.7, 0.3]])
        labels = np.array([[0.0, 1.0]])
        single = mdl.cross_entropy(probs, labels)
        double = mdl.cross_entropy(np.vstack([probs, probs]), np.vstack([labels, labels]))
        assert double == 2.0 * single

    def test_nonnegative_and_clamped(self):
        probs = np.array([[0.0, 1.0]])
        labels = np.array([[1.0, 0.0]])
        loss = mdl.cross_entropy(probs, labels)
        assert np.isfinite(loss) and loss > 0


class TestGradients:
    def test_zero_input_zero_first_layer_core_grads(self):
        net, particle, _ = tiny_net(seed=1)
        x = np.zeros((4, net.input_dim))
        y = np.zeros((4, net.class_count))
        y[:, 0] = 1.0
        grad = mdl.grad_log_likelihood(net, particle, x, y)
        for core_grad in grad.layers[0].cores:
            assert np.abs(core_grad).max() == 0.0

    def test_likelihood_grad_scale_components_zero(self):
        net, particle, _ = tiny_net(seed=2)
        x, y = random_batch(net, 4, seed=2)
        grad = mdl.grad_log_likelihood(net, particle, x, y)
        for layer in grad.layers:
            for s in layer.rank_scales:
                assert np.array_equal(s, np.zeros_like(s))

    @pytest.mark.parametrize("seed", range(5))
    def test_posterior_grad_matches_finite_differences(self, seed):
        net, particle, prior = tiny_net(seed=seed)
        x, y = random_batch(net, 4, seed=seed)
        layout = inf.ParticleLayout(net)
        vec = layout.flatten(particle)
        grad = layout.flatten(mdl.grad_log_posterior(net, particle, prior, x, y, n_total=11))

        def f(v):
            return mdl.log_posterior(net, layout.unflatten(v), prior, x, y, n_total=11)

        h = 1e-5
        fd = np.zeros_like(vec)
        for i in range(vec.size):
            vp, vm = vec.copy(), vec.copy()
            vp[i] += h
            vm[i] -= h
            fd[i] = (f(vp) - f(vm)) / (2 * h)
        rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-6)
        assert rel.max() < 1e-5

    def test_core_grads_match_dense_backprop(self):
        # map dense weight gradients back through the reconstruction chain rule
        net, particle, _ = tiny_net(seed=6)
        x, y = random_batch(net, 4, seed=6)
        grad = mdl.grad_log_likelihood(net, particle, x, y)
        h = 1e-6
        for li, lp in enumerate(particle.layers):
            k = 0
            idx = (0, 0, 0, 0)
            fd_cores = [c.copy() for c in lp.cores]
            for sign in (1, -1):
                trial = particle.copy()
                trial.layers[li].cores[k][idx] += sign * h
                val = mdl.log_likelihood(net, trial, x, y)
                if sign == 1:
                    up = val
                else:
                    down = val
            fd = (up - down) / (2 * h)
            assert abs(grad.layers[li].cores[k][idx] - fd) < 1e-8 * max(1.0, abs(fd)) + 1e-7


class TestLogPosterior:
    def test_uniform_prediction_composition(self):
        net, particle, prior = tiny_net(seed=7)
        for lp in particle.layers:
            lp.cores = [np.zeros_like(c) for c in lp.cores]
            lp.bias = np.zeros_like(lp.bias)
        x, y = random_batch(net, 1, seed=7)
        value = mdl.log_posterior(net, particle, prior, x, y)
        expected = -math.log(net.class_count) + mdl.log_prior_particle(net, particle, prior)
        assert np.isclose(value, expected, rtol=1e-12)

    def test_duplicated_data_doubles_likelihood_term(self):
        net, particle, prior = tiny_net(seed=8)
        x, y = random_batch(net, 3, seed=8)
        lp = mdl.log_prior_particle(net, particle, prior)
        single = mdl.log_posterior(net, particle, prior, x, y) - lp
        double = (
            mdl.log_posterior(net, particle, prior, np.vstack([x, x]), np.vstack([y, y]))
            - lp
        )
        assert np.isclose(double, 2.0 * single, rtol=1e-12)

    def test_minibatch_rescaling_linearity(self):
        # full-batch likelihood gradient equals the sum over disjoint
        # minibatches, with one prior gradient added on top
        net, particle, prior = tiny_net(seed=9)
        x, y = random_batch(net, 6, seed=9)
        layout = inf.ParticleLayout(net)
        full = layout.flatten(mdl.grad_log_likelihood(net, particle, x, y))
        parts = sum(
            layout.flatten(mdl.grad_log_likelihood(net, particle, x[i : i + 2], y[i : i + 2]))
            for i in range(0, 6, 2)
        )
        assert np.allclose(full, parts, rtol=1e-10, atol=1e-12)

    def test_scale_components_equal_prior_gradient(self):
        from ttbayes import priors

        net, particle, prior = tiny_net(seed=10)
        x, y = random_batch(net, 4, seed=10)
        grad = mdl.grad_log_posterior(net, particle, prior, x, y, n_total=100)
        for lp, gl in zip(particle.layers, grad.layers):
            for k, gs in enumerate(gl.rank_scales):
                expected = priors.grad_log_prior_scales(k, lp.cores, lp.rank_scales, prior)
                assert np.array_equal(gs, expected)

    def test_n_total_scales_only_likelihood(self):
        net, particle, prior = tiny_net(seed=11)
        x, y = random_batch(net, 4, seed=11)
        layout = inf.ParticleLayout(net)
        g1 = layout.flatten(mdl.grad_log_posterior(net, particle, prior, x, y, n_total=4))
        g2 = layout.flatten(mdl.grad_log_posterior(net, particle, prior, x, y, n_total=8))
        gl = layout.flatten(mdl.grad_log_likelihood(net, particle, x, y))
        assert np.allclose(g2 - g1, gl, rtol=1e-9, atol=1e-9)


class TestNetworkValidation:
    def test_dims_must_chain(self):
        spec1 = mdl.LayerSpec(FactorizedShape((2, 2), (2, 2)), (1, 2, 1), "relu")
        spec2 = mdl.LayerSpec(FactorizedShape((3, 2), (2, 1)), (1, 2, 1), "softmax")
        with pytest.raises(TTShapeError):
            mdl.Network((spec1, spec2))

    def test_final_layer_must_be_softmax(self):
        spec = mdl.LayerSpec(FactorizedShape((2, 2), (2, 1)), (1, 2, 1), "relu")
        with pytest.raises(ValueError):
            mdl.Network((spec,))

    def test_hidden_softmax_rejected(self):
        spec1 = mdl.LayerSpec(FactorizedShape((2, 2), (2, 2)), (1, 2, 1), "softmax")
        spec2 = mdl.LayerSpec(FactorizedShape((2, 2), (2, 1)), (1, 2, 1), "softmax")
        with pytest.raises(ValueError):
            mdl.Network((spec1, spec2))
