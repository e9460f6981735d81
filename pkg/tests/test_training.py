import unittest
from unittest.mock import patch
import os
import sys

import numpy as np

# Ensure modules can be imported
_root = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if _root not in sys.path:
    sys.path.insert(0, _root)

from modules import models, training  # noqa: E402
from modules.config import TrainSettings  # noqa: E402
from modules.data import LabeledDataset  # noqa: E402
from modules.errors import InvalidInputError, ShapeError, TrainingError  # noqa: E402
from modules.training import TrainConfig  # noqa: E402


def linear_toy(n=64, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1))
    y = 2.5 * x + 0.3 + 0.1 * rng.standard_normal((n, 1))
    return LabeledDataset(x, y)


def linear_model():
    return models.build_model([{"type": "fc", "out": 1}], (1,), 1, seed=0)


def classification_toy(n=120, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 4))
    labels = (x[:, 0] + x[:, 1] > 0).astype(np.int64)
    return LabeledDataset(x, labels)


class TestTrainConfig(unittest.TestCase):
    def test_validation(self):
        with self.assertRaises(InvalidInputError):
            TrainConfig(epochs=-1)
        with self.assertRaises(InvalidInputError):
            TrainConfig(batch_size=0)
        with self.assertRaises(InvalidInputError):
            TrainConfig(lr_decay=1.5)
        with self.assertRaises(InvalidInputError):
            TrainConfig(lr=0.0)
        with self.assertRaises(InvalidInputError):
            TrainConfig(loss="hinge")

    def test_from_settings(self):
        config = TrainConfig.from_settings(TrainSettings(epochs=3, loss="mse"), seed=7)
        self.assertEqual((config.epochs, config.loss, config.seed), (3, "mse", 7))


class TestTrain(unittest.TestCase):
    def test_zero_epochs(self):
        model = linear_model()
        trained, history = training.train(model, linear_toy(), TrainConfig(epochs=0, loss="mse"))
        self.assertIs(trained, model)
        self.assertEqual(len(history), 0)

    def test_linear_regression_converges(self):
        data = linear_toy()
        design = np.hstack([data.inputs, np.ones((len(data), 1))])
        slope, intercept = np.linalg.lstsq(design, data.targets[:, 0], rcond=None)[0]
        config = TrainConfig(epochs=200, batch_size=len(data), lr=0.1, lr_decay=1.0, loss="mse")
        trained, history = training.train(linear_model(), data, config)
        self.assertAlmostEqual(float(trained.layers[0].weight[0, 0]), slope, delta=1e-3)
        self.assertAlmostEqual(float(trained.layers[0].bias[0]), intercept, delta=1e-3)
        self.assertEqual(len(history), 200)

    def test_loss_non_increasing_on_convex_toy(self):
        data = linear_toy(seed=1)
        config = TrainConfig(epochs=30, batch_size=len(data), lr=0.05, lr_decay=1.0, loss="mse")
        _, history = training.train(linear_model(), data, config)
        losses = [stats.train_loss for stats in history.epochs]
        self.assertTrue(all(b <= a for a, b in zip(losses, losses[1:])))

    def test_learning_rate_decays(self):
        config = TrainConfig(epochs=3, batch_size=16, lr=0.2, lr_decay=0.5, loss="mse")
        _, history = training.train(linear_model(), linear_toy(), config)
        np.testing.assert_allclose([s.lr for s in history.epochs], [0.2, 0.1, 0.05])

    def test_bitwise_reproducible(self):
        data = classification_toy()
        model = models.build_model([{"type": "fc", "out": 8}, {"type": "relu"}, {"type": "fc", "out": 2}],
                                   (4,), 2, seed=1)
        config = TrainConfig(epochs=3, batch_size=16, lr=0.1, seed=5)
        a, log_a = training.train(model, data, config)
        b, log_b = training.train(model, data, config)
        for la, lb in zip(a.layers, b.layers):
            for name in la.ARRAYS:
                np.testing.assert_array_equal(getattr(la, name), getattr(lb, name))
        self.assertEqual(log_a.csv_rows(), log_b.csv_rows())

    def test_input_model_untouched(self):
        model = linear_model()
        before = model.layers[0].weight.copy()
        training.train(model, linear_toy(), TrainConfig(epochs=2, loss="mse"))
        np.testing.assert_array_equal(model.layers[0].weight, before)

    def test_eval_data_logged(self):
        data = classification_toy()
        model = models.build_model([{"type": "fc", "out": 2}], (4,), 2)
        _, history = training.train(model, data, TrainConfig(epochs=2, batch_size=32), eval_data=data)
        self.assertIsNotNone(history.epochs[0].eval_accuracy)
        self.assertEqual(training.TrainLog.HEADER[0], "epoch")

    def test_non_finite_loss(self):
        bad = LabeledDataset(np.ones((4, 1)), np.full((4, 1), np.nan))
        with self.assertRaises(TrainingError) as ctx:
            training.train(linear_model(), bad, TrainConfig(epochs=1, loss="mse"))
        self.assertIn("epoch 1", str(ctx.exception))

    def test_batchnorm_statistics_frozen(self):
        arch = [{"type": "fc", "out": 3}, {"type": "batchnorm"}, {"type": "relu"}, {"type": "fc", "out": 2}]
        model = models.build_model(arch, (4,), 2)
        trained, _ = training.train(model, classification_toy(), TrainConfig(epochs=1, batch_size=32))
        np.testing.assert_array_equal(trained.layers[1].gamma, model.layers[1].gamma)
        self.assertFalse(np.array_equal(trained.layers[0].weight, model.layers[0].weight))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            training.train(linear_model(), classification_toy(), TrainConfig(epochs=1))


class TestFineTune(unittest.TestCase):
    @patch("modules.training.log")
    def test_zero_epochs_keeps_accuracy(self, mock_log):
        data = classification_toy()
        model = models.build_model([{"type": "fc", "out": 2}], (4,), 2, seed=3)
        tuned, history = training.fine_tune(model, data, TrainConfig(epochs=0))
        self.assertEqual(training.evaluate(tuned, data), training.evaluate(model, data))
        self.assertEqual(len(history), 0)
        self.assertIn("[FineTune]", mock_log.call_args_list[0].args[0])


class TestEvaluate(unittest.TestCase):
    def test_one_hot_logits(self):
        labels = np.array([0, 2, 1, 2])
        model = models.Model(
            layers=(models.FullyConnected(weight=np.eye(3), bias=np.zeros(3)),),
            name="oracle", input_shape=(3,), num_classes=3,
        )
        _, accuracy = training.evaluate(model, LabeledDataset(np.eye(3)[labels], labels))
        self.assertEqual(accuracy, 1.0)

    def test_constant_logits_score_class_frequency(self):
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 10, size=500)
        modal = int(np.bincount(labels).argmax())
        model = models.Model(
            layers=(models.FullyConnected(weight=np.zeros((2, 10)), bias=np.eye(10)[modal]),),
            name="constant", input_shape=(2,), num_classes=10,
        )
        _, accuracy = training.evaluate(model, LabeledDataset(rng.standard_normal((500, 2)), labels))
        self.assertAlmostEqual(accuracy, np.mean(labels == modal))

    def test_mse_of_zero_model(self):
        y = np.random.default_rng(5).standard_normal((30, 2))
        model = models.Model(
            layers=(models.FullyConnected(weight=np.zeros((3, 2)), bias=np.zeros(2)),),
            name="zero", input_shape=(3,), num_classes=2,
        )
        loss, _ = training.evaluate(model, LabeledDataset(np.ones((30, 3)), y), loss="mse")
        self.assertAlmostEqual(loss, np.mean(np.sum(y * y, axis=1)))

    def test_single_output_rounds(self):
        model = models.Model(
            layers=(models.FullyConnected(weight=np.ones((1, 1)), bias=np.zeros(1)),),
            name="round", input_shape=(1,), num_classes=1,
        )
        data = LabeledDataset(np.array([[0.9], [-1.2], [0.4]]), np.array([[1.0], [-1.0], [1.0]]))
        _, accuracy = training.evaluate(model, data, loss="mse")
        self.assertAlmostEqual(accuracy, 2.0 / 3.0)

    def test_empty_dataset(self):
        with self.assertRaises(InvalidInputError):
            training.evaluate(linear_model(), LabeledDataset(np.ones((0, 1)), np.ones((0, 1))), loss="mse")


class TestGradientCheck(unittest.TestCase):
    def test_fc_model(self):
        model = models.build_model(
            [{"type": "fc", "out": 6}, {"type": "relu"}, {"type": "fc", "out": 3}], (4,), 3, seed=6,
        )
        check = training.gradient_check(model, classification_toy(n=10, seed=6), loss="cross_entropy")
        self.assertEqual(set(check.per_parameter), {"layer0.weight", "layer0.bias", "layer2.weight", "layer2.bias"})
        self.assertLessEqual(check.max_error, 1e-4)

    def test_conv_model(self):
        model = models.build_model(
            [{"type": "conv2d", "out": 3, "kernel": 3, "padding": 1}, {"type": "relu"},
             {"type": "avgpool2d", "size": 2}, {"type": "flatten"}, {"type": "fc", "out": 2}],
            (1, 4, 4), 2, seed=7,
        )
        rng = np.random.default_rng(8)
        data = LabeledDataset(rng.standard_normal((6, 1, 4, 4)), rng.standard_normal((6, 2)))
        self.assertLessEqual(training.gradient_check(model, data, loss="mse").max_error, 1e-4)

    def test_residual_block(self):
        model = models.build_model(
            [{"type": "fc", "out": 5}, {"type": "relu"},
             {"type": "residual", "layers": [{"type": "fc", "out": 4}, {"type": "relu"}, {"type": "fc", "out": 5}]},
             {"type": "fc", "out": 3}],
            (4,), 3, seed=9,
        )
        check = training.gradient_check(model, classification_toy(n=10, seed=9), loss="cross_entropy")
        self.assertEqual(len(check.per_parameter), 8)
        self.assertLessEqual(check.max_error, 1e-4)

    def test_maxpool_and_conv_residual(self):
        model = models.build_model(
            [{"type": "conv2d", "out": 2, "kernel": 3, "padding": 1}, {"type": "relu"},
             {"type": "maxpool2d", "size": 2},
             {"type": "residual", "layers": [{"type": "conv2d", "out": 2, "kernel": 3, "padding": 1}]},
             {"type": "flatten"}, {"type": "fc", "out": 2}],
            (1, 6, 6), 2, seed=10,
        )
        rng = np.random.default_rng(11)
        data = LabeledDataset(rng.standard_normal((5, 1, 6, 6)), rng.standard_normal((5, 2)))
        check = training.gradient_check(model, data, loss="mse")
        self.assertIn("layer0.weight", check.per_parameter)
        self.assertLessEqual(check.max_error, 1e-4)


if __name__ == "__main__":
    unittest.main()
