import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..', 'src')))

import json
import shutil
import tempfile
import unittest

import numpy as np

from src import layers as L
from src.checkpoint import save_checkpoint, read_checkpoint, load_into, checkpoint_to_dict
from src.utils import DatasetFormatError

def _model():
    return L.Sequential([("hidden", L.dense(3, 4)), ("norm", L.batchnorm(4)), ("out", L.dense(4, 2))])

class CheckpointTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.path = os.path.join(self.tmp, "nested", "model.json")

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_save_and_load_is_bit_exact(self):
        source = _model().init(np.random.default_rng(1))
        source.layers["norm"].buffers["running_var"] = np.array([0.1, 0.2, 1.0 / 3.0, 7.0])
        save_checkpoint(self.path, source, meta={"seed": np.int64(4), "curve": np.array([1.5, 0.5])})

        target = _model()
        meta = load_into(target, self.path)
        for name, tensor in source.parameters().items():
            np.testing.assert_array_equal(target.parameters()[name].data, tensor.data)
        np.testing.assert_array_equal(target.buffers()["norm.running_var"],
                                      source.buffers()["norm.running_var"])
        self.assertEqual(meta, {"seed": 4, "curve": [1.5, 0.5]})

    def test_parameter_order_must_match(self):
        save_checkpoint(self.path, _model())
        other = L.Sequential([("out", L.dense(4, 2)), ("hidden", L.dense(3, 4))])
        with self.assertRaises(DatasetFormatError):
            load_into(other, self.path)

    def test_rejects_foreign_files(self):
        os.makedirs(os.path.dirname(self.path))
        with open(self.path, "w") as f:
            json.dump({"format": "something-else"}, f)
        with self.assertRaises(DatasetFormatError):
            read_checkpoint(self.path)

        blob = checkpoint_to_dict(_model())
        blob["version"] = 99
        with open(self.path, "w") as f:
            json.dump(blob, f)
        with self.assertRaises(DatasetFormatError):
            read_checkpoint(self.path)

    def test_rejects_broken_json(self):
        os.makedirs(os.path.dirname(self.path))
        with open(self.path, "w") as f:
            f.write("{not json")
        with self.assertRaises(DatasetFormatError):
            read_checkpoint(self.path)

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            read_checkpoint(os.path.join(self.tmp, "absent.json"))

if __name__ == "__main__":
    unittest.main()
