import unittest
import hashlib
import json
import os
import sys
import tempfile

import numpy as np

# Ensure modules can be imported
_root = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if _root not in sys.path:
    sys.path.insert(0, _root)

from modules import models  # noqa: E402
from modules.errors import DataFormatError, InvalidInputError, ShapeError, StructuralError  # noqa: E402

CONV_ARCH = [
    {"type": "conv2d", "out": 4, "kernel": 3, "padding": 1},
    {"type": "batchnorm"},
    {"type": "relu"},
    {"type": "maxpool2d", "size": 2},
    {"type": "residual", "layers": [
        {"type": "conv2d", "out": 6, "kernel": 3, "padding": 1},
        {"type": "relu"},
        {"type": "conv2d", "out": 4, "kernel": 3, "padding": 1},
    ]},
    {"type": "flatten"},
    {"type": "fc", "out": 3},
]


class TestModelBuilder(unittest.TestCase):
    def test_build_fc(self):
        model = models.build_model(
            [{"type": "fc", "out": 5}, {"type": "relu"}, {"type": "fc", "out": 2}],
            input_shape=(3,), num_classes=2, seed=0,
        )
        self.assertEqual([layer.kind for layer in model.layers], ["fc", "relu", "fc"])
        self.assertEqual(model.widths(), {0: 5, 2: 2})
        self.assertEqual(model.weight_layer_indices(), [0, 2])
        np.testing.assert_array_equal(model.layers[0].bias, np.zeros(5))

    def test_build_is_seeded(self):
        arch = [{"type": "fc", "out": 4}]
        a = models.build_model(arch, (6,), 4, seed=3)
        b = models.build_model(arch, (6,), 4, seed=3)
        c = models.build_model(arch, (6,), 4, seed=4)
        np.testing.assert_array_equal(a.layers[0].weight, b.layers[0].weight)
        self.assertFalse(np.array_equal(a.layers[0].weight, c.layers[0].weight))

    def test_init_scale(self):
        model = models.build_model([{"type": "fc", "out": 2000}], (400,), 2000, seed=0, init_scale=2.0)
        std = model.layers[0].weight.std()
        self.assertAlmostEqual(std, 2.0 / np.sqrt(400), delta=0.01)

    def test_build_conv_with_residual(self):
        model = models.build_model(CONV_ARCH, (1, 8, 8), 3, seed=1)
        kinds = [layer.kind for layer in model.layers]
        self.assertEqual(kinds.count("residual_start"), 1)
        self.assertEqual(kinds.index("residual_end"), kinds.index("residual_start") + 4)
        shapes = models.infer_shapes(model)
        self.assertEqual(shapes[3], (4, 4, 4))
        self.assertEqual(shapes[-2], (64,))

    def test_unknown_layer_type(self):
        with self.assertRaises(InvalidInputError):
            models.build_model([{"type": "lstm"}], (3,), 3)

    def test_wrong_output_width(self):
        with self.assertRaises(ShapeError):
            models.build_model([{"type": "fc", "out": 4}], (3,), 10)


class TestModelValidation(unittest.TestCase):
    def _fc(self, d_in, d_out):
        return models.FullyConnected(weight=np.ones((d_in, d_out)), bias=np.zeros(d_out))

    def test_shape_mismatch_names_layer(self):
        model = models.Model(
            layers=(self._fc(3, 4), models.ReLU(), self._fc(5, 2)),
            name="bad", input_shape=(3,), num_classes=2,
        )
        with self.assertRaises(ShapeError) as ctx:
            models.validate_model(model)
        self.assertIn("layer 2", str(ctx.exception))

    def test_unclosed_residual(self):
        model = models.Model(
            layers=(models.ResidualStart(0), self._fc(3, 3)),
            name="open", input_shape=(3,), num_classes=3,
        )
        with self.assertRaises(StructuralError):
            models.validate_model(model)

    def test_crossed_residual_blocks(self):
        model = models.Model(
            layers=(models.ResidualStart(0), models.ResidualStart(1), models.ResidualEnd(0),
                    models.ResidualEnd(1)),
            name="crossed", input_shape=(3,), num_classes=3,
        )
        with self.assertRaises(StructuralError):
            models.validate_model(model)

    def test_residual_must_preserve_shape(self):
        model = models.Model(
            layers=(models.ResidualStart(0), self._fc(3, 2), models.ResidualEnd(0)),
            name="narrowing", input_shape=(3,), num_classes=2,
        )
        with self.assertRaises(ShapeError):
            models.validate_model(model)

    def test_layer_descriptor_checks(self):
        with self.assertRaises(ShapeError):
            models.FullyConnected(weight=np.ones((3, 2)), bias=np.zeros(3))
        with self.assertRaises(ShapeError):
            models.Conv2d(weight=np.ones((2, 1, 3, 3)), bias=np.zeros(2), stride=0)
        with self.assertRaises(InvalidInputError):
            models.BatchNorm(gamma=np.ones(2), beta=np.zeros(2), mean=np.zeros(2), var=np.array([1.0, 0.0]))


class TestModelFiles(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "net.idnet")
        self.model = models.build_model(CONV_ARCH, (1, 8, 8), 3, seed=2, name="conv_toy")

    def tearDown(self):
        self.tmp.cleanup()

    def _read(self, path):
        with open(path, "rb") as f:
            return f.read()

    def test_round_trip_is_byte_exact(self):
        models.save_model(self.model, self.path, provenance={"seed": 2})
        loaded = models.load_model(self.path)
        again = os.path.join(self.tmp.name, "again.idnet")
        models.save_model(loaded, again)
        self.assertEqual(self._read(self.path + ".bin"), self._read(again + ".bin"))
        first = json.loads(self._read(self.path))
        second = json.loads(self._read(again))
        first.pop("blob")
        second.pop("blob")
        self.assertEqual(first, second)
        self.assertEqual(loaded.provenance, {"seed": 2})

    def test_loaded_model_matches_float32_weights(self):
        models.save_model(self.model, self.path)
        loaded = models.load_model(self.path)
        self.assertEqual([layer.kind for layer in loaded.layers], [layer.kind for layer in self.model.layers])
        for orig, back in zip(self.model.layers, loaded.layers):
            for name in orig.ARRAYS:
                expected = getattr(orig, name).astype(np.float32).astype(np.float64)
                np.testing.assert_array_equal(getattr(back, name), expected)
                self.assertEqual(getattr(back, name).dtype, np.float64)
        self.assertEqual(loaded.input_shape, (1, 8, 8))

    def test_manifest_layout(self):
        models.save_model(self.model, self.path)
        manifest = json.loads(self._read(self.path))
        self.assertEqual(manifest["format"], "IDNET")
        self.assertEqual(manifest["version"], 1)
        self.assertEqual(manifest["blob"], "net.idnet.bin")
        conv = manifest["layers"][0]
        self.assertEqual(conv["kind"], "conv2d")
        self.assertEqual(conv["tensors"][0], {"name": "weight", "shape": [4, 1, 3, 3], "offset": 0})
        self.assertEqual(conv["tensors"][1]["offset"], 4 * 36)

    def test_checksum_mismatch(self):
        models.save_model(self.model, self.path)
        blob = bytearray(self._read(self.path + ".bin"))
        blob[0] ^= 0xFF
        with open(self.path + ".bin", "wb") as f:
            f.write(bytes(blob))
        with self.assertRaises(DataFormatError):
            models.load_model(self.path)

    def test_non_finite_tensor_rejected(self):
        models.save_model(self.model, self.path)
        blob = bytearray(self._read(self.path + ".bin"))
        blob[4:8] = np.array([np.nan], dtype="<f4").tobytes()
        with open(self.path + ".bin", "wb") as f:
            f.write(bytes(blob))
        manifest = json.loads(self._read(self.path))
        manifest["blob_sha256"] = hashlib.sha256(bytes(blob)).hexdigest()
        with open(self.path, "w", encoding="utf-8") as f:
            json.dump(manifest, f)
        with self.assertRaises(DataFormatError) as ctx:
            models.load_model(self.path)
        self.assertIn(self.path, str(ctx.exception))
        self.assertIn("non-finite", str(ctx.exception))

    def test_truncated_blob(self):
        models.save_model(self.model, self.path)
        blob = self._read(self.path + ".bin")
        with open(self.path + ".bin", "wb") as f:
            f.write(blob[:-4])
        with self.assertRaises(DataFormatError):
            models.load_model(self.path)

    def test_missing_and_garbage_files(self):
        with self.assertRaises(DataFormatError):
            models.load_model(os.path.join(self.tmp.name, "absent.idnet"))
        with open(self.path, "w", encoding="utf-8") as f:
            f.write("{not json")
        with self.assertRaises(DataFormatError):
            models.load_model(self.path)

    def test_wrong_version(self):
        models.save_model(self.model, self.path)
        manifest = json.loads(self._read(self.path))
        manifest["version"] = 2
        with open(self.path, "w", encoding="utf-8") as f:
            json.dump(manifest, f)
        with self.assertRaises(DataFormatError):
            models.load_model(self.path)

    def test_no_temp_files_left(self):
        models.save_model(self.model, self.path)
        self.assertEqual(sorted(os.listdir(self.tmp.name)), ["net.idnet", "net.idnet.bin"])


if __name__ == "__main__":
    unittest.main()
