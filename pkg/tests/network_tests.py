import logging
import os
import tempfile
import unittest

from unittest import TestCase

import numpy as np

from faker import Faker

from nnmass import analysis, datasets, network, randmat, topology
from nnmass.errors import RangeError, ShapeError, StaleCacheError, UnsupportedConfigurationError
from nnmass.network import InitScheme, TrainConfig
from nnmass.topology import Activation, ArchitectureSpec, CellSpec, single_cell

faker = Faker()
logger = logging.getLogger(__name__)

SLOW = os.environ.get("NNMASS_SLOW_TESTS") == "1"


class NetworkTestCase(TestCase):
    def setUp(self):
        Faker.seed(0x6d6c70)
        self.topo_seed = faker.random_int(0, 2 ** 32)
        self.init_seed = faker.random_int(0, 2 ** 32)

    def build(self, spec, **kwargs):
        return network.build_model(spec, self.topo_seed, self.init_seed, **kwargs)

    def batch(self, n, dim, key=0):
        return np.random.default_rng([self.init_seed, key]).standard_normal((n, dim))


class BuildTests(NetworkTestCase):
    def test_shapes(self):
        model = self.build(single_cell(16, 8, 10))
        self.assertEqual(model.layers[0].weight.shape, (8, 2))
        self.assertEqual(model.layers[1].weight.shape, (8, 8))
        self.assertEqual(model.layers[2].weight.shape, (8, 16))
        self.assertEqual(model.layers[14].weight.shape, (8, 18))
        self.assertEqual(model.head_weight.shape, (2, 8))

        model = self.build(single_cell(9, 5, 0))
        self.assertTrue(all(layer.weight.shape == (5, 5) for layer in model.layers[1:]))

    def test_shape_law(self):
        """Columns beyond the previous width are exactly the layer's sources"""
        cell = CellSpec(14, 6, faker.random_int(1, 40))
        model = self.build(ArchitectureSpec((cell,)))
        for i in range(2, cell.depth):
            self.assertEqual(model.layers[i].weight.shape[1] - cell.width, topology.n_sources(cell, i))

    def test_multi_cell(self):
        spec = ArchitectureSpec((CellSpec(4, 3, 2), CellSpec(5, 6, 7)), input_dim=4, output_dim=3)
        model = self.build(spec)
        self.assertEqual(len(model.layers), 9)
        self.assertEqual(model.layers[4].weight.shape, (6, 3))
        self.assertEqual(model.layers[4].cell, 1)
        self.assertEqual(model.param_count, analysis.param_count(spec))
        with self.assertRaises(UnsupportedConfigurationError):
            self.build(spec, jacobian_experiment=True)

    def test_deterministic(self):
        spec = single_cell(10, 4, 6)
        first, second = self.build(spec), self.build(spec)
        for a, b in zip(first.parameters(), second.parameters()):
            self.assertEqual(a.tobytes(), b.tobytes())
        self.assertEqual(first.realization, second.realization)

    def test_biases_zero(self):
        model = self.build(single_cell(6, 4, 3))
        self.assertTrue(all(not layer.bias.any() for layer in model.layers))
        self.assertFalse(model.head_bias.any())

    def test_init_variance(self):
        """Weights scaled by sqrt(fan_in / gain) pool to unit variance over the depth and budget grid"""
        for activation in (Activation.elu, Activation.relu):
            gain = InitScheme().resolved_gain(activation)
            scaled = []
            for depth in (16, 24, 32):
                for budget in (0, 7, 14):
                    model = self.build(single_cell(depth, 8, budget, activation))
                    scaled.extend((layer.weight * np.sqrt(layer.weight.shape[1] / gain)).ravel()
                                  for layer in model.layers[1:])
            self.assertAlmostEqual(np.concatenate(scaled).var(), 1.0, delta=0.1, msg=activation.value)

    def test_param_count_agrees(self):
        for _ in range(10):
            depth, width = faker.random_int(3, 12), faker.random_int(1, 6)
            spec = single_cell(depth, width, faker.random_int(0, width * depth), input_dim=faker.random_int(1, 5),
                               output_dim=faker.random_int(1, 5))
            self.assertEqual(self.build(spec).param_count, analysis.param_count(spec))

    def test_init_scheme(self):
        self.assertEqual(InitScheme().resolved_gain("relu"), 2.0)
        self.assertEqual(InitScheme().resolved_gain("elu"), 1.0)
        self.assertEqual(InitScheme(gain=3.0).resolved_gain("relu"), 3.0)
        with self.assertRaises(RangeError):
            InitScheme("orthogonal")


class ForwardTests(NetworkTestCase):
    def test_identity(self):
        """Identity weights and a linear activation pass the input through"""
        model = self.build(single_cell(4, 2, activation=Activation.linear))
        for layer in model.layers:
            layer.weight[...] = np.eye(2)
        model.head_weight[...] = np.eye(2)
        model.touch()

        batch = self.batch(5, 2)
        logits, _ = network.forward(model, batch)
        np.testing.assert_allclose(logits, batch)

    def test_relu_negative(self):
        model = self.build(single_cell(4, 3, activation=Activation.relu))
        model.layers[2].bias[...] = -1e6
        _, cache = network.forward(model, self.batch(7, 2))
        self.assertFalse(cache.activations[2].any())

    def test_elu(self):
        model = self.build(single_cell(5, 4, 2))
        _, cache = network.forward(model, self.batch(6, 2))
        for h, s in zip(cache.pre_activations, cache.activations):
            for value, out in zip(h.ravel(), s.ravel()):
                self.assertAlmostEqual(out, value if value >= 0 else np.exp(value) - 1, places=14)

    def test_concatenation(self):
        """Each layer's input is the previous activation followed by its sources in (layer, unit) order"""
        model = self.build(single_cell(8, 3, 5))
        _, cache = network.forward(model, self.batch(4, 2))
        for i in range(2, 8):
            sources = model.realization.sources_of(0, i)
            expected = np.column_stack([cache.activations[i - 1]] +
                                       [cache.activations[layer][:, unit] for layer, unit in sources])
            np.testing.assert_array_equal(cache.inputs[i], expected)

    def test_bad_batch(self):
        model = self.build(single_cell(4, 2))
        with self.assertRaises(ShapeError):
            network.forward(model, np.zeros((3, 3)))
        with self.assertRaises(ShapeError):
            network.forward(model, np.zeros(2))


class BackwardTests(NetworkTestCase):
    def check_gradients(self, spec, n=8, step=1e-5):
        model = self.build(spec)
        batch = self.batch(n, spec.input_dim)
        labels = np.random.default_rng(self.topo_seed).integers(0, spec.output_dim, n)
        _, cache = network.forward(model, batch)
        gradients = network.backward(model, cache, labels).parameters()

        for param, grad in zip(model.parameters(), gradients):
            self.assertEqual(param.shape, grad.shape)
            numeric = np.zeros_like(param)
            for index in np.ndindex(param.shape):
                original = param[index]
                param[index] = original + step
                plus = network.loss(model, batch, labels)
                param[index] = original - step
                minus = network.loss(model, batch, labels)
                param[index] = original
                numeric[index] = (plus - minus) / (2 * step)
            np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-8)

    def test_gradients(self):
        self.check_gradients(single_cell(6, 4, 3))

    def test_random_gradients(self, models=5):
        """Finite differences agree on random small models"""
        for _ in range(models):
            depth, width = faker.random_int(3, 8), faker.random_int(1, 6)
            spec = single_cell(depth, width, faker.random_int(0, width * (depth - 2)),
                               input_dim=faker.random_int(1, 4), output_dim=faker.random_int(2, 4))
            self.check_gradients(spec)

    def test_multi_cell_gradients(self):
        self.check_gradients(ArchitectureSpec((CellSpec(4, 3, 2), CellSpec(5, 2, 4)), input_dim=3, output_dim=3))

    def test_input_gradient(self):
        spec = single_cell(5, 3, 4)
        model = self.build(spec)
        batch = self.batch(1, 2)
        _, cache = network.forward(model, batch)
        analytic = network.backward(model, cache, [1]).inputs
        for k in range(2):
            delta = np.zeros((1, 2))
            delta[0, k] = 1e-6
            numeric = (network.loss(model, batch + delta, [1]) - network.loss(model, batch - delta, [1])) / 2e-6
            self.assertAlmostEqual(analytic[0, k], numeric, delta=1e-6)

    def test_zero_loss_gradient(self):
        """A head of zeros makes the loss constant in every hidden parameter"""
        model = self.build(single_cell(5, 3, 2))
        model.head_weight[...] = 0
        model.touch()
        _, cache = network.forward(model, self.batch(4, 2))
        gradients = network.backward(model, cache, [0, 1, 0, 1])
        for grad in gradients.weights + gradients.biases:
            self.assertFalse(grad.any())

    def test_zeroed_shortcuts(self):
        """With shortcut columns zeroed no gradient reaches a source through them"""
        model = self.build(single_cell(4, 2, 2))
        layer = model.layers[2]
        layer.weight[:, layer.previous_width:] = 0
        for later in model.layers[3:]:
            later.weight[:, later.previous_width:] = 0
        model.layers[1].weight[...] = 0
        model.touch()
        _, cache = network.forward(model, self.batch(3, 2))
        gradients = network.backward(model, cache, [0, 1, 1])
        # layer 0 only feeds layer 1 (zeroed) and shortcuts (zeroed)
        self.assertFalse(gradients.weights[0].any())

    def test_stale_cache(self):
        model = self.build(single_cell(4, 2, 1))
        _, cache = network.forward(model, self.batch(2, 2))
        model.touch()
        with self.assertRaises(StaleCacheError):
            network.backward(model, cache, [0, 1])


class JacobianTests(NetworkTestCase):
    def test_linear_is_weight(self):
        model = self.build(single_cell(6, 3, 4, Activation.linear))
        for i in range(1, 6):
            np.testing.assert_array_equal(network.layerwise_jacobian(model, self.batch(1, 2)[0], i),
                                          model.layers[i].weight)

    def test_relu_positive_is_weight(self):
        model = self.build(single_cell(4, 3, 2, Activation.relu))
        model.layers[3].bias[...] = 1e6
        model.touch()
        np.testing.assert_array_equal(network.layerwise_jacobian(model, [0.3, -0.2], 3), model.layers[3].weight)

    def test_finite_difference(self):
        """ds_i / dx_{i-1} by perturbing each column of the layer input"""
        model = self.build(single_cell(7, 4, 5))
        sample = self.batch(1, 2)
        _, cache = network.forward(model, sample)
        for i in (1, 3, 6):
            jacobian = network.layerwise_jacobian(model, sample[0], i)
            x = cache.inputs[i][0]
            numeric = np.zeros_like(jacobian)
            for k in range(len(x)):
                delta = np.zeros_like(x)
                delta[k] = 1e-6
                plus = model.activation(model.layers[i].weight @ (x + delta) + model.layers[i].bias)
                minus = model.activation(model.layers[i].weight @ (x - delta) + model.layers[i].bias)
                numeric[:, k] = (plus - minus) / 2e-6
            self.assertEqual(jacobian.shape, (4, 4 + topology.n_sources(model.spec.cells[0], i)))
            np.testing.assert_allclose(jacobian, numeric, rtol=1e-4, atol=1e-8)

    def test_layer_range(self):
        model = self.build(single_cell(4, 2))
        for layer in (0, 4):
            with self.assertRaises(RangeError):
                network.layerwise_jacobian(model, [0.0, 0.0], layer)
        with self.assertRaises(RangeError):
            network.ldi_report(model, np.zeros((0, 2)))

    def test_report(self):
        model = self.build(single_cell(8, 4, 3))
        report = network.ldi_report(model, network.default_probe(2, 8, self.init_seed))
        self.assertEqual([j.layer for j in report.layers], list(range(1, 8)))
        shortcut_means = [j.mean_sv for j in report.layers if j.cell_layer >= 2]
        self.assertAlmostEqual(report.mean_sv, float(np.mean(shortcut_means)), places=12)
        self.assertEqual(report.to_dict()["layers"][0]["cols"], 4)

    def test_linear_square_baseline(self):
        """With no shortcuts and a linear activation the Jacobians are the square Gaussian weights"""
        model = self.build(single_cell(5, 6, 0, Activation.linear))
        report = network.ldi_report(model, network.default_probe(2, 3, self.init_seed))
        for j in report.layers:
            expected = randmat.singular_values(model.layers[j.layer].weight)
            np.testing.assert_allclose(j.spectrum.values, expected.values, rtol=1e-10)

    def test_equal_mass_equal_isometry(self):
        """Depth 16 and 32 at the same width and budget have nearly equal mass and initial singular values"""
        reports = []
        for depth in (16, 32):
            model = self.build(single_cell(depth, 8, 10), jacobian_experiment=True)
            reports.append(network.ldi_report(model, network.default_probe(2, 32, self.init_seed)))
        shallow, deep = reports
        self.assertLess(abs(shallow.mean_sv - deep.mean_sv) / deep.mean_sv, 0.1)


class TrainingTestCase(NetworkTestCase):
    def setUp(self):
        super(TrainingTestCase, self).setUp()
        self.train_set = datasets.gen_circle(4, 256, self.init_seed)
        self.test_set = datasets.gen_circle(4, 64, self.init_seed + 1)


class TrainingTests(TrainingTestCase):
    def test_schedule(self):
        config = TrainConfig(epochs=10, lr0=0.2)
        self.assertAlmostEqual(config.learning_rate(0), 0.2)
        self.assertAlmostEqual(config.learning_rate(5), 0.1)
        self.assertEqual(TrainConfig(schedule="constant", lr0=0.3).learning_rate(7), 0.3)
        self.assertEqual(TrainConfig.full.epochs, 60)
        with self.assertRaises(RangeError):
            TrainConfig(schedule="step")

    def test_zero_learning_rate(self):
        model = self.build(single_cell(6, 4, 3))
        before = [param.copy() for param in model.parameters()]
        trace = network.train(model, self.train_set, self.test_set, TrainConfig(epochs=3, batch_size=32, lr0=0.0))
        for a, b in zip(before, model.parameters()):
            np.testing.assert_array_equal(a, b)
        losses = [record.train_loss for record in trace.epochs]
        self.assertAlmostEqual(max(losses), min(losses), places=10)

    def test_deterministic(self):
        traces = []
        for _ in range(2):
            model = self.build(single_cell(6, 4, 3))
            traces.append(network.train(model, self.train_set, self.test_set, TrainConfig(epochs=2, batch_size=32,
                                                                                          data_seed=5)))
        self.assertEqual(traces[0].epochs, traces[1].epochs)
        self.assertEqual(traces[0].hyperparameters["topo_seed"], self.topo_seed)

    def test_learns(self):
        model = self.build(single_cell(4, 8, 2))
        trace = network.train(model, self.train_set, self.test_set, TrainConfig(epochs=8, batch_size=16, lr0=0.1))
        self.assertLess(trace.epochs[-1].train_loss, trace.epochs[0].train_loss)

    def test_incompatible(self):
        model = self.build(single_cell(4, 2, input_dim=3))
        with self.assertRaises(ShapeError):
            network.train(model, self.train_set, self.test_set)

    def test_checkpoint(self):
        model = self.build(ArchitectureSpec((CellSpec(5, 3, 4), CellSpec(4, 2, 1))))
        network.train(model, self.train_set, self.test_set, TrainConfig(epochs=1, batch_size=64))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model.ckpt")
            network.save_checkpoint(model, path)
            loaded = network.load_checkpoint(path)
        self.assertEqual(loaded.realization, model.realization)
        for a, b in zip(model.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(a, b)
        self.assertEqual(network.evaluate(model, self.test_set), network.evaluate(loaded, self.test_set))


@unittest.skipUnless(SLOW, "Set NNMASS_SLOW_TESTS=1 to train on full Circle20")
class ConvergenceTests(TrainingTestCase):
    def setUp(self):
        super(ConvergenceTests, self).setUp()
        self.train_set, self.test_set = datasets.load_ref(datasets.DatasetRef(), self.init_seed)
        self.config = TrainConfig(epochs=15, data_seed=self.topo_seed)

    def trace(self, depth, budget):
        return network.train(self.build(single_cell(depth, 8, budget)), self.train_set, self.test_set, self.config)

    def test_higher_mass_trains_faster(self):
        high, low = self.trace(20, 12), self.trace(20, 2)
        for epoch in range(5, self.config.epochs):
            self.assertLess(high.epochs[epoch].train_loss, low.epochs[epoch].train_loss, f"epoch {epoch}")

    def test_equal_mass_converges_alike(self):
        shallow, deep = self.trace(20, 10), self.trace(32, 10)
        a, b = shallow.epochs[-1].train_loss, deep.epochs[-1].train_loss
        self.assertLess(abs(a - b) / max(a, b), 0.15)
