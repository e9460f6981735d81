import unittest
from unittest.mock import MagicMock, patch, mock_open
import os
import sys
import tempfile

# Ensure modules can be imported
_root = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if _root not in sys.path:
    sys.path.insert(0, _root)

from modules import config  # noqa: E402
from modules.errors import ConfigError  # noqa: E402


class TestLoadConfig(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "run.yaml")

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, text):
        with open(self.path, "w", encoding="utf-8") as f:
            f.write(text)

    def test_load_full_config(self):
        self.write(
            "seed: 3\n"
            "model_name: tiny\n"
            "output_dir: out\n"
            "architecture:\n"
            "  - {type: fc, out: 8}\n"
            "  - {type: relu}\n"
            "  - {type: fc, out: 1}\n"
            "data: {source: circle, circle_train_size: 100, prune_set_size: 20}\n"
            "train: {epochs: 2, loss: mse}\n"
            "prune: {method: magnitude, fraction: 0.25, layer_fractions: {'0': 0.5}}\n"
            "theory: {delta: 0.1}\n"
        )
        log = MagicMock()
        run = config.load_config(self.path, log)

        self.assertEqual(run.seed, 3)
        self.assertEqual(run.model_name, "tiny")
        self.assertEqual(len(run.architecture), 3)
        self.assertEqual(run.data.circle_train_size, 100)
        self.assertEqual(run.data.prune_set_size, 20)
        self.assertEqual(run.train.epochs, 2)
        self.assertEqual(run.train.loss, "mse")
        # Untouched sections keep their defaults
        self.assertEqual(run.finetune.epochs, config.FINETUNE_EPOCHS)
        self.assertEqual(run.prune.method, "magnitude")
        self.assertEqual(run.prune.layer_fractions, {0: 0.5})
        self.assertEqual(run.theory.delta, 0.1)
        self.assertEqual(run.theory.zeta, config.THEORY_ZETA)
        log.assert_called()

    def test_json_is_accepted(self):
        self.write('{"seed": 9, "prune": {"epsilon": 0.1, "fraction": null}}')
        run = config.load_config(self.path, MagicMock())
        self.assertEqual(run.seed, 9)
        self.assertEqual(run.prune.epsilon, 0.1)
        self.assertIsNone(run.prune.fraction)

    def test_logging_settings(self):
        log_path = os.path.join(self.tmp.name, "custom.log")
        self.write(f"debug_logging: true\nlog_file: {log_path}\n")
        config.load_config(self.path, MagicMock())
        self.assertTrue(config.DEBUG_LOGGING)
        self.assertEqual(config.LOG_FILE, log_path)

    @patch("os.path.exists", return_value=False)
    def test_load_config_missing(self, mock_exists):
        log = MagicMock()
        run = config.load_config("nowhere.yaml", log)
        self.assertEqual(run, config.RunConfig())
        log.assert_called_with(unittest.mock.ANY, "WARNING")

    @patch("builtins.open", new_callable=mock_open, read_data="seed: [1, 2\n")
    @patch("os.path.exists", return_value=True)
    def test_load_config_invalid_yaml(self, mock_exists, mock_file):
        with self.assertRaises(ConfigError) as ctx:
            config.load_config("broken.yaml", MagicMock())
        self.assertIn("broken.yaml", str(ctx.exception))

    def test_empty_file_gives_defaults(self):
        self.write("")
        self.assertEqual(config.load_config(self.path, MagicMock()), config.RunConfig())

    def test_top_level_must_be_mapping(self):
        self.write("- 1\n- 2\n")
        with self.assertRaises(ConfigError):
            config.load_config(self.path, MagicMock())

    def test_unknown_section_key(self):
        self.write("train: {epochs: 2, warmup: 5}\n")
        with self.assertRaises(ConfigError) as ctx:
            config.load_config(self.path, MagicMock())
        self.assertIn("warmup", str(ctx.exception))

    def test_section_must_be_mapping(self):
        self.write("prune: 0.5\n")
        with self.assertRaises(ConfigError):
            config.load_config(self.path, MagicMock())

    def test_architecture_must_be_list(self):
        self.write("architecture: {type: fc}\n")
        with self.assertRaises(ConfigError):
            config.load_config(self.path, MagicMock())

    def test_invalid_enumerations(self):
        for text in ("data: {source: cifar}\n", "prune: {method: random}\n",
                     "train: {loss: hinge}\n", "data: {prune_policy: from_validation}\n",
                     "prune: {fraction: null}\n"):
            self.write(text)
            with self.assertRaises(ConfigError, msg=text):
                config.load_config(self.path, MagicMock())


class TestOverrides(unittest.TestCase):
    def test_flags_override_config(self):
        run = config.RunConfig()
        log = MagicMock()
        merged = config.apply_overrides(run, {
            "model": "m.idnet", "seed": 4, "fraction": 0.75, "skip_layers": [2],
            "prune_set_size": 10, "finetune_epochs": 1, "epochs": None,
        }, log)
        self.assertEqual(merged.model_path, "m.idnet")
        self.assertEqual(merged.seed, 4)
        self.assertEqual(merged.prune.fraction, 0.75)
        self.assertEqual(merged.prune.skip_layers, [2])
        self.assertEqual(merged.data.prune_set_size, 10)
        self.assertEqual(merged.finetune.epochs, 1)
        self.assertEqual(merged.train.epochs, config.TRAIN_EPOCHS)
        self.assertIn("seed", log.call_args.args[0])

    def test_input_left_untouched(self):
        run = config.RunConfig()
        config.apply_overrides(run, {"seed": 11, "skip_layers": [0]}, MagicMock())
        self.assertEqual(run.seed, 0)
        self.assertEqual(run.prune.skip_layers, [])

    def test_epsilon_clears_default_fraction(self):
        merged = config.apply_overrides(config.RunConfig(), {"epsilon": 0.05}, MagicMock())
        self.assertEqual(merged.prune.epsilon, 0.05)
        self.assertIsNone(merged.prune.fraction)

    def test_epsilon_and_fraction_both_kept(self):
        merged = config.apply_overrides(config.RunConfig(), {"epsilon": 0.05, "fraction": 0.5}, MagicMock())
        self.assertEqual(merged.prune.fraction, 0.5)

    def test_nothing_to_apply(self):
        log = MagicMock()
        merged = config.apply_overrides(config.RunConfig(), {"seed": None, "unknown": 1}, log)
        self.assertEqual(merged, config.RunConfig())
        log.assert_not_called()

    def test_override_is_validated(self):
        with self.assertRaises(ConfigError):
            config.apply_overrides(config.RunConfig(), {"method": "random"}, MagicMock())


class TestDigest(unittest.TestCase):
    def test_stable_hex(self):
        digest = config.RunConfig().digest()
        self.assertEqual(len(digest), 64)
        self.assertEqual(digest, config.RunConfig().digest())

    def test_output_dir_excluded(self):
        self.assertEqual(config.RunConfig(output_dir="a").digest(), config.RunConfig(output_dir="b").digest())

    def test_settings_change_digest(self):
        other = config.RunConfig()
        other.prune.fraction = 0.25
        self.assertNotEqual(config.RunConfig().digest(), other.digest())


if __name__ == "__main__":
    unittest.main()
