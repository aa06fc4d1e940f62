"""
Tests for sparse layers, initialization, the forward pass and gradients
"""

import math
import unittest

import numpy as np

from errors import DuplicateEdge, EdgeOutOfRange, InvalidDensity, ShapeMismatch, ZeroFanIn
from sparse_network import (
    DenseReadout,
    Network,
    SparseLayer,
    forward,
    fraction_count,
    init_network,
    kaiming_sample,
    kaiming_std,
    loss_and_grad,
    softmax_cross_entropy,
)


def single_edge_network(weight: float) -> Network:
    layer = SparseLayer(1, 1, [0], [0], [weight], [0.0])
    return Network([layer], DenseReadout(np.ones((1, 1)), np.zeros(1)))


def random_network(sizes, class_count, density, seed) -> Network:
    """Erdos-Renyi network with random biases so no pre-activation sits on the rectifier kink."""
    net = init_network(sizes, class_count, density, seed)
    rng = np.random.default_rng(seed + 1)
    for layer in net.layers:
        layer.bias[:] = rng.normal(0.0, 0.5, layer.out_size)
    net.readout.bias[:] = rng.normal(0.0, 0.5, class_count)
    return net


def batch_loss(net, batch, labels) -> float:
    logits, _ = forward(net, batch)
    return softmax_cross_entropy(logits, labels)[0]


def numeric_gradients(net, batch, labels, step=1e-4):
    gradients = []
    for param in net.parameters():
        grad = np.zeros_like(param)
        flat, out = param.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = batch_loss(net, batch, labels)
            flat[i] = original - step
            minus = batch_loss(net, batch, labels)
            flat[i] = original
            out[i] = (plus - minus) / (2 * step)
        gradients.append(grad)
    return gradients


class TestKaiming(unittest.TestCase):
    def test_standard_deviation(self):
        self.assertAlmostEqual(kaiming_std(784), 0.050507, places=6)
        self.assertAlmostEqual(kaiming_std(1000), 0.044721, places=6)

    def test_zero_fan_in(self):
        with self.assertRaises(ZeroFanIn):
            kaiming_sample(0, np.random.default_rng(0))

    def test_empirical_std(self):
        samples = kaiming_sample(784, np.random.default_rng(0), size=10**6)
        self.assertLess(abs(samples.std() / math.sqrt(2 / 784) - 1.0), 0.01)
        self.assertLess(abs(samples.mean()), 0.001)

    def test_fraction_count_floors_exact_products(self):
        self.assertEqual(fraction_count(0.3, 7840), 2352)
        self.assertEqual(fraction_count(0.1, 30), 3)
        self.assertEqual(fraction_count(0.5, 3), 1)


class TestSparseLayer(unittest.TestCase):
    def test_edges_sorted_by_output_then_input(self):
        layer = SparseLayer(3, 2, [2, 0, 1], [1, 1, 0], [1.0, 2.0, 3.0], [0.0, 0.0])
        self.assertEqual(layer.out_index.tolist(), [0, 1, 1])
        self.assertEqual(layer.in_index.tolist(), [1, 0, 2])
        self.assertEqual(layer.weights.tolist(), [3.0, 2.0, 1.0])
        self.assertEqual(layer.indptr.tolist(), [0, 1, 3])
        np.testing.assert_array_equal(layer.to_csr().toarray(), [[0.0, 3.0, 0.0], [2.0, 0.0, 1.0]])

    def test_duplicate_edge_rejected(self):
        with self.assertRaises(DuplicateEdge):
            SparseLayer(2, 2, [0, 1, 0], [1, 0, 1], [1.0, 1.0, 1.0], [0.0, 0.0])
        layer = SparseLayer(2, 2, [0], [1], [1.0], [0.0, 0.0])
        with self.assertRaises(DuplicateEdge):
            layer.with_edges([0], [1], [0.5])

    def test_out_of_range(self):
        with self.assertRaises(EdgeOutOfRange):
            SparseLayer(2, 2, [2], [0], [1.0], [0.0, 0.0])
        with self.assertRaises(ShapeMismatch):
            SparseLayer(2, 2, [0], [0], [1.0], [0.0])

    def test_degrees_and_membership(self):
        layer = SparseLayer(3, 2, [0, 1, 1], [0, 0, 1], [1.0, 1.0, 1.0], [0.0, 0.0])
        self.assertEqual(layer.in_degrees().tolist(), [2, 1])
        self.assertEqual(layer.out_degrees().tolist(), [1, 2, 0])
        self.assertEqual(layer.contains([0, 2], [0, 1]).tolist(), [True, False])

    def test_network_summaries(self):
        net = init_network((10, 8, 6), class_count=3, density=0.25, seed=3)
        self.assertEqual(net.edge_counts(), [20, 12])
        self.assertAlmostEqual(net.density(), 32 / 128)
        self.assertEqual(net.parameter_count(), 20 + 8 + 12 + 6 + 18 + 3)
        self.assertEqual(net.layer_sizes, [10, 8, 6])

    def test_incompatible_layers(self):
        first = SparseLayer.empty(4, 3)
        second = SparseLayer.empty(2, 2)
        with self.assertRaises(ShapeMismatch):
            Network([first, second], DenseReadout(np.zeros((2, 2)), np.zeros(2)))


class TestInitNetwork(unittest.TestCase):
    def test_edge_counts_at_one_percent(self):
        net = init_network(seed=0)
        self.assertEqual(net.edge_counts(), [7840, 10000, 10000])
        self.assertEqual(net.readout.weight.shape, (10, 1000))
        for layer in net.layers:
            self.assertTrue(np.all(layer.bias == 0.0))
            self.assertEqual(len(np.unique(layer.keys())), layer.edge_count)
        self.assertAlmostEqual(net.layers[0].weights.std(), kaiming_std(784), delta=0.003)

    def test_same_seed_same_network(self):
        first = init_network((50, 40, 30), 5, 0.1, seed=11)
        second = init_network((50, 40, 30), 5, 0.1, seed=11)
        for a, b in zip(first.parameters(), second.parameters()):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(first.layers, second.layers):
            np.testing.assert_array_equal(a.keys(), b.keys())
        self.assertEqual(first.seed_lineage, [11])

    def test_invalid_density(self):
        for density in (0.0, -0.1, 1.5):
            with self.assertRaises(InvalidDensity):
                init_network((4, 4), 2, density, seed=0)


class TestForward(unittest.TestCase):
    def test_single_edge(self):
        net = single_edge_network(2.0)
        logits, cache = forward(net, np.array([[3.0]]))
        self.assertEqual(cache.pre_activations[0][0, 0], 6.0)
        self.assertEqual(logits[0, 0], 6.0)

        logits, cache = forward(net, np.array([[-3.0]]))
        self.assertEqual(cache.pre_activations[0][0, 0], -6.0)
        self.assertEqual(logits[0, 0], 0.0)

    def test_all_zero_network(self):
        net = init_network((12, 6, 6), 4, 0.5, seed=0)
        for param in net.parameters():
            param[...] = 0.0
        logits, _ = forward(net, np.random.default_rng(0).normal(size=(5, 12)))
        np.testing.assert_array_equal(logits, np.zeros((5, 4)))

    def test_multiply_accumulate_count(self):
        net = init_network((20, 10, 10), 3, 0.2, seed=2)
        _, cache = forward(net, np.ones((7, 20)))
        self.assertEqual(cache.mac_count, 7 * sum(net.edge_counts()))

    def test_matches_dense_computation(self):
        net = random_network((9, 7, 5), 4, 0.4, seed=5)
        batch = np.random.default_rng(0).normal(size=(6, 9))
        hidden = batch
        for layer in net.layers:
            hidden = np.maximum(hidden @ layer.to_csr().toarray().T + layer.bias, 0.0)
        expected = hidden @ net.readout.weight.T + net.readout.bias
        np.testing.assert_allclose(forward(net, batch)[0], expected, rtol=1e-12, atol=1e-12)

    def test_shape_mismatch(self):
        net = init_network((12, 6), 2, 0.5, seed=0)
        with self.assertRaises(ShapeMismatch):
            forward(net, np.zeros((3, 11)))


class TestLossAndGrad(unittest.TestCase):
    def test_uniform_logits(self):
        net = init_network((6, 4), 10, 0.5, seed=0)
        net.readout.weight[...] = 0.0
        _, cache = forward(net, np.ones((3, 6)))
        loss, _ = loss_and_grad(net, cache, [0, 4, 9])
        self.assertAlmostEqual(loss, math.log(10), places=12)

    def test_class_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(5, 6))
        labels = rng.integers(0, 6, 5)
        permutation = rng.permutation(6)
        inverse = np.argsort(permutation)
        loss, grad = softmax_cross_entropy(logits, labels)
        permuted_loss, permuted_grad = softmax_cross_entropy(logits[:, permutation], inverse[labels])
        self.assertAlmostEqual(loss, permuted_loss, places=12)
        np.testing.assert_allclose(grad[:, permutation], permuted_grad, atol=1e-15)

    def test_gradient_slots_follow_edges(self):
        net = init_network((10, 8, 8), 3, 0.2, seed=1)
        _, cache = forward(net, np.ones((2, 10)))
        _, grads = loss_and_grad(net, cache, [0, 1])
        for layer, grad in zip(net.layers, grads.sparse_weights):
            self.assertEqual(grad.shape, (layer.edge_count,))
        self.assertEqual(grads.readout_weight.shape, net.readout.weight.shape)

    def test_label_validation(self):
        net = init_network((6, 4), 3, 0.5, seed=0)
        _, cache = forward(net, np.ones((2, 6)))
        with self.assertRaises(ShapeMismatch):
            loss_and_grad(net, cache, [0])
        with self.assertRaises(ShapeMismatch):
            loss_and_grad(net, cache, [0, 3])

    def assert_gradients_match(self, net, batch, labels):
        _, cache = forward(net, batch)
        _, grads = loss_and_grad(net, cache, labels)
        for analytic, numeric in zip(grads.as_list(), numeric_gradients(net, batch, labels)):
            np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)

    def kink_free(self, net, batch, margin=2e-3) -> bool:
        _, cache = forward(net, batch)
        return all(np.abs(z).min() > margin for z in cache.pre_activations)

    def test_finite_differences_on_toy_network(self):
        for seed in range(100):
            net = random_network((6, 4, 4, 4), 3, 0.6, seed)
            rng = np.random.default_rng(seed)
            batch, labels = rng.normal(size=(4, 6)), rng.integers(0, 3, 4)
            if self.kink_free(net, batch):
                self.assert_gradients_match(net, batch, labels)
                return
        self.fail("No kink-free toy network found")

    def test_finite_differences_on_random_networks(self):
        checked = 0
        for seed in range(1000):
            rng = np.random.default_rng(1000 + seed)
            depth = int(rng.integers(1, 4))
            sizes = [int(s) for s in rng.integers(2, 9, depth + 1)]
            classes = int(rng.integers(2, 6))
            net = random_network(sizes, classes, float(rng.uniform(0.3, 0.9)), 1000 + seed)
            batch, labels = rng.normal(size=(3, sizes[0])), rng.integers(0, classes, 3)
            if not self.kink_free(net, batch):
                continue
            self.assert_gradients_match(net, batch, labels)
            checked += 1
            if checked == 50:
                break
        self.assertEqual(checked, 50)


if __name__ == "__main__":
    unittest.main()
