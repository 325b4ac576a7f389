import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..', 'src')))

import json
import shutil
import tempfile
import unittest
from unittest.mock import MagicMock, patch

import numpy as np

from src import harness
from src import precoder as prec
from src import predictor as pred
from src.harness import MetricsRow
from src.settings import ExperimentSpec, build_run_config
from src.utils import ShapeError, StageError

# Small enough that a whole pipeline trains in seconds.
TINY = {
    "system": {"n_antennas": 4, "n_devices": 2},
    "data": {"n_train": 20, "n_test": 10, "slots_per_episode": 12, "error_set_size": 30,
             "composed_set_size": 60},
    "predictor": {"w_step": 2, "epochs": 1, "batch_size": 16, "lstm_units": [4, 4], "filters": [2, 2, 2]},
    "vae": {"epochs": 1, "batch_size": 16, "min_samples": 10},
    "precoder": {"epochs": 1, "batch_size": 8, "n_aug": 4, "dense_factors": [2, 2]},
}

def _writer(name):
    def build(path):
        with open(os.path.join(path, name), "w") as f:
            f.write("x")
        return [name]
    return MagicMock(side_effect=build)

class StageCacheTests(unittest.TestCase):
    def setUp(self):
        self.workdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.workdir)

    def test_second_run_is_a_cache_hit(self):
        build = _writer("out.txt")
        first = harness.run_stage("gen-data", {"a": 1}, [], build, self.workdir)
        second = harness.run_stage("gen-data", {"a": 1}, [], build, self.workdir)
        self.assertFalse(first.cached)
        self.assertTrue(second.cached)
        self.assertEqual(build.call_count, 1)
        self.assertEqual(second.outputs, ["out.txt"])
        with open(os.path.join(first.path, harness.MANIFEST)) as f:
            self.assertEqual(json.load(f)["key"], first.key)

    def test_changed_config_changes_the_key(self):
        a = harness.run_stage("gen-data", {"a": 1}, [], _writer("out.txt"), self.workdir)
        b = harness.run_stage("gen-data", {"a": 2}, [], _writer("out.txt"), self.workdir)
        self.assertNotEqual(a.key, b.key)
        self.assertNotEqual(a.path, b.path)

    def test_missing_output_forces_rerun(self):
        build = _writer("out.txt")
        first = harness.run_stage("gen-data", {}, [], build, self.workdir)
        os.remove(first.output("out.txt"))
        again = harness.run_stage("gen-data", {}, [], build, self.workdir)
        self.assertFalse(again.cached)
        self.assertEqual(build.call_count, 2)

    def test_rerun_upstream_forces_downstream(self):
        upstream = harness.run_stage("gen-data", {}, [], _writer("a"), self.workdir)
        build = _writer("b")
        harness.run_stage("train-predictor", {}, [upstream], build, self.workdir)
        harness.run_stage("train-predictor", {}, [upstream], build, self.workdir)
        self.assertEqual(build.call_count, 2)
        cached = harness.StageResult(upstream.stage, upstream.key, upstream.path, True, upstream.outputs)
        self.assertTrue(harness.run_stage("train-predictor", {}, [cached], build, self.workdir).cached)

    def test_failures_become_stage_errors(self):
        build = MagicMock(side_effect=RuntimeError("disk full"))
        with patch("src.harness.log_error") as log:
            with self.assertRaises(StageError) as ctx:
                harness.run_stage("train-vae", {}, [], build, self.workdir)
        self.assertEqual(ctx.exception.stage, "train-vae")
        self.assertIn("disk full", str(ctx.exception))
        log.assert_called_once()

class MetricsTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_csv_and_sidecar(self):
        rows = [MetricsRow("dlpdn", "NMSE_dB", -12.5, "w_step", 4.0, 1, 99),
                MetricsRow("zfbf", "WSR", 3.25, p2_dbw=10.0)]
        path = harness.write_metrics(os.path.join(self.tmp, "out", "m.csv"), rows, {"name": "x"})
        self.assertEqual(harness.read_metrics(path), rows)
        with open(path + ".json") as f:
            self.assertEqual(json.load(f), {"name": "x"})
        with open(path) as f:
            self.assertEqual(f.readline().strip(), ",".join(harness.METRIC_FIELDS))

    def test_summarize(self):
        rows = [MetricsRow("zfbf", "WSR", 1.0, axis_value=0.0), MetricsRow("zfbf", "WSR", 3.0, axis_value=0.0),
                MetricsRow("zfbf", "WSR", 5.0, axis_value=10.0)]
        summary = harness.summarize(rows)
        self.assertEqual(len(summary), 2)
        self.assertEqual((summary[0]["mean"], summary[0]["std"], summary[0]["n"]), (2.0, 1.0, 2))

class SweepPlanTests(unittest.TestCase):
    def test_power_axis_runs_per_value(self):
        spec = ExperimentSpec(name="p", axis="P_2", values=[0, 10], replications=2)
        self.assertEqual(harness.sweep_jobs(spec), [(0.0, 0, None), (10.0, 0, None), (0.0, 1, None), (10.0, 1, None)])

    def test_other_axes_run_per_value(self):
        spec = ExperimentSpec(name="w", axis="w_step", values=[2, 4], replications=2)
        self.assertEqual(harness.sweep_jobs(spec), [(2.0, 0, None), (4.0, 0, None), (2.0, 1, None), (4.0, 1, None)])

    def test_no_axis(self):
        with self.assertRaises(ValueError):
            harness.sweep_jobs(ExperimentSpec(name="single"))

    def test_replication_seeds(self):
        spec = ExperimentSpec(name="s", master_seed=3)
        seeds = {harness.replication_seed(spec, r) for r in range(5)}
        self.assertEqual(len(seeds), 5)
        self.assertTrue(all(0 <= s < 2 ** 31 for s in seeds))
        self.assertEqual(harness.replication_seed(spec, 0), harness.replication_seed(spec, 0))

class TimingTests(unittest.TestCase):
    def test_rows_per_size(self):
        rc = build_run_config("desk", {"system": {"n_devices": 2}, "predictor": {"w_step": 2}})
        rows = harness.time_scheme("zfbf", [2, 4], rc, repeats=3)
        self.assertEqual([r.axis_value for r in rows], [2.0, 4.0])
        self.assertTrue(all(r.axis == "M" and r.metric == "wall_time_ms" and r.value >= 0 for r in rows))
        self.assertEqual(len(harness.time_scheme("lr", [4], rc, repeats=2)), 1)
        with self.assertRaises(ValueError):
            harness.time_scheme("zfbf", [2], rc, repeats=0)

    def test_checkpoint_of_another_size_is_refused(self):
        rc = build_run_config("desk", {"system": {"n_devices": 2}, "predictor": {"w_step": 2}})
        tmp = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, tmp)
        precoder = prec.save_precoder(os.path.join(tmp, "p.json"),
                                      prec.init_dlpcn(4, 2, rc.precoder, rc.system.total_power, seed=0))
        lr = pred.save_lr(os.path.join(tmp, "lr.json"), pred.LrModel(np.zeros((16, 3)), 2, (8, 2)))
        for scheme, path in (("dlpcn", precoder), ("lr", lr)):
            with self.assertRaisesRegex(ShapeError, "trained for M=4, K=2"):
                harness.time_scheme(scheme, [8], rc, path, repeats=1)
        self.assertEqual(len(harness.time_scheme("dlpcn", [4], rc, precoder, repeats=1)), 1)

class PipelineTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.workdir = tempfile.mkdtemp()
        cls.spec = ExperimentSpec(name="tiny", overrides=TINY, schemes=["dlpdn", "lr", "dlpcn", "zfbf"],
                                  master_seed=1)
        cls.rows = harness.pipeline_rows(cls.spec, workdir=cls.workdir)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.workdir)

    def _metric(self, scheme, metric):
        return [r for r in self.rows if r.scheme == scheme and r.metric == metric]

    def test_rows_cover_every_scheme(self):
        self.assertEqual(len(self._metric("dlpdn", "NMSE_dB")), 1)
        self.assertEqual(len(self._metric("lr", "NMSE_dB")), 1)
        for scheme in ("dlpcn", "zfbf"):
            self.assertEqual(len(self._metric(scheme, "WSR")), 1)
            self.assertEqual(len(self._metric(scheme, "outage_1")), 1)
        self.assertEqual(self._metric("zfbf", "WSR")[0].p2_dbw, 10.0)
        self.assertTrue(all(r.seed == harness.replication_seed(self.spec, 0) for r in self.rows))

    def test_replay_touches_no_stage(self):
        rc = self.spec.run_config(None, harness.replication_seed(self.spec, 0))
        stages = harness.run_stages(rc, self.spec.schemes, self.workdir)
        self.assertEqual(list(stages), list(harness.STAGES))
        self.assertTrue(all(stage.cached for stage in stages.values()))

    def test_each_power_trains_its_own_precoder(self):
        rows = harness.pipeline_rows(self.spec, workdir=self.workdir, powers=[0.0, 20.0])
        wsr = sorted((r.p2_dbw, r.value) for r in rows if r.scheme == "dlpcn" and r.metric == "WSR")
        self.assertEqual([p for p, _ in wsr], [0.0, 20.0])
        self.assertEqual(len([r for r in rows if r.metric == "NMSE_dB" and r.scheme == "lr"]), 1)
        seed = harness.replication_seed(self.spec, 0)
        low = harness.run_stages(harness.at_power(self.spec.run_config(None, seed), 0.0), self.spec.schemes,
                                 self.workdir)
        high = harness.run_stages(harness.at_power(self.spec.run_config(None, seed), 20.0), self.spec.schemes,
                                  self.workdir)
        self.assertEqual(low["train-predictor"].key, high["train-predictor"].key)
        self.assertNotEqual(low["train-precoder"].key, high["train-precoder"].key)
        self.assertTrue(all(stage.cached for stage in high.values()))

    def test_power_axis_labels_rows_with_the_power(self):
        spec = self.spec.model_copy(update={"axis": "P_2", "values": [10.0]})
        rows = harness.pipeline_rows(spec, axis_value=10.0, workdir=self.workdir)
        self.assertTrue(all(r.axis_value == 10.0 for r in rows))

if __name__ == "__main__":
    unittest.main()
