"""
Tests for the command-line entry point
"""

import os
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

import main
from analysis_service import read_density_csv, read_summary_csv, read_timing_csv
from dataset_service import LabeledImageSet
from experiment_runner import STATUS_COMPLETED, STATUS_FAILED, RunRecord
from robustness_service import PerturbationKind, RobustnessCurve, write_curve
from snapshot_service import save_snapshot
from sparse_network import init_network
from topology_service import LayerUpdate, UpdateStats, append_update_log
from training_service import HISTORY_FILE, TrainingHistory

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "config")


@patch("main.settings.configure_logging")
class TestMain(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, *parts):
        return os.path.join(self.tmp.name, *parts)

    def test_parser(self, _):
        argv = ["robustness", "--snapshot", "s", "--kind", "random_prune", "--grid", "0,0.5,1", "--dataset", "mnist"]
        args = main.build_parser().parse_args(argv + ["--out", "o"])
        self.assertEqual(args.grid, [0.0, 0.5, 1.0])
        self.assertEqual(args.replicas, 32)
        with self.assertRaises(SystemExit):
            main.build_parser().parse_args(["robustness", "--kind", "dropout"])
        with self.assertRaises(SystemExit):
            main.build_parser().parse_args(["report", "--in", "a", "--out", "b", "--bins", "many"])

    def test_density(self, mock_logging):
        net = init_network((40, 30, 30), 3, 0.2, seed=0)
        save_snapshot(net, self.path("runs", "a", "final"))
        save_snapshot(net, self.path("runs", "b", "final"))

        argv = ["density", "--snapshot", self.path("runs"), "--out", self.path("out"), "--bins", "10", "--layer", "2"]
        code = main.main(["--log-level", "DEBUG"] + argv)

        self.assertEqual(code, 0)
        mock_logging.assert_called_once_with(level="DEBUG")
        estimates = read_density_csv(self.path("out", "weight_density.csv"))
        self.assertEqual(sorted(estimates), [os.path.join("a", "final.npz"), os.path.join("b", "final.npz")])
        self.assertEqual({estimate.scope for estimate in estimates.values()}, {"layer2"})

    def test_report(self, _):
        for strategy in ("ch3l3", "rlr"):
            run_dir = self.path("in", f"mnist_{strategy}", "replica_00")
            os.makedirs(run_dir)
            history = TrainingHistory(metadata={"strategy": strategy, "name": f"mnist_{strategy}"})
            history.append(0.9, 0.3, 0.0 if strategy == "ch3l3" else 0.5, [10])
            history.append(0.95, 0.2, 0.0, [10])
            history.to_csv(os.path.join(run_dir, HISTORY_FILE))
            net = init_network((20, 10), 2, 0.3, seed=1)
            save_snapshot(net, os.path.join(run_dir, "final"), {"strategy": strategy})
            curve = RobustnessCurve(PerturbationKind.WEIGHT_MODIFY, [0.0, 1.0], [[0.95, 0.94], [0.5, 0.6]])
            write_curve(curve, self.path("in", "sweeps", strategy))
        update = LayerUpdate(layer=1, removed=3, dangling_removed=0, regrown=3, duration_seconds=0.25)
        append_update_log(self.path("in", "mnist_ch3l3", "replica_00", "topology.csv"), UpdateStats(1, [update]))

        self.assertEqual(main.main(["report", "--in", self.path("in"), "--out", self.path("out"), "--bins", "8"]), 0)

        report_dir = self.path("out", "report")
        accuracy = read_summary_csv(os.path.join(report_dir, "accuracy.csv"))
        self.assertEqual(sorted(accuracy), ["ch3l3", "rlr"])
        robustness = read_summary_csv(os.path.join(report_dir, "robustness_weight_modify.csv"))
        self.assertEqual(sorted(robustness), ["ch3l3", "rlr"])
        np.testing.assert_allclose(robustness["rlr"].mean, [0.945, 0.55])
        self.assertEqual(sorted(read_density_csv(os.path.join(report_dir, "weight_density.csv"))), ["ch3l3", "rlr"])
        timing = read_timing_csv(os.path.join(report_dir, "update_timing.csv"))
        self.assertEqual(timing["ch3l3"]["mean_update_seconds"], 0.25)
        self.assertEqual(timing["rlr"]["mean_update_seconds"], 0.5)

    def test_report_without_inputs_fails(self, _):
        os.makedirs(self.path("empty"))
        self.assertEqual(main.main(["report", "--in", self.path("empty"), "--out", self.path("out")]), 1)

    def test_missing_snapshot_fails(self, _):
        self.assertEqual(main.main(["density", "--snapshot", self.path("nothing"), "--out", self.path("out")]), 1)

    @patch("main.load_dataset")
    def test_robustness(self, mock_load, _):
        rng = np.random.default_rng(0)
        test_set = LabeledImageSet(rng.random((50, 784)), rng.integers(0, 3, 50), 3)
        mock_load.return_value = (None, test_set)
        save_snapshot(init_network((784, 20), 3, 0.05, seed=2), self.path("final"))

        argv = ["robustness", "--snapshot", self.path("final.npz"), "--kind", "random_prune", "--grid", "0,0.5,1"]
        argv += ["--replicas", "3", "--dataset", "mnist", "--out", self.path("out"), "--test-limit", "40"]
        code = main.main(argv)

        self.assertEqual(code, 0)
        curve = RobustnessCurve.from_csv(self.path("out", "robustness_random_prune.csv"))
        self.assertEqual(curve.samples.shape, (3, 3))
        self.assertTrue(os.path.exists(self.path("out", "robustness_random_prune_summary.csv")))

    @patch("main.run_experiment_suite")
    def test_train_reports_failed_replicas(self, mock_suite, _):
        config = os.path.join(CONFIG_DIR, "mnist_rlr.json")
        mock_suite.return_value = [
            RunRecord("mnist_rlr", 0, 1, STATUS_COMPLETED, "out/0"),
            RunRecord("mnist_rlr", 1, 2, STATUS_FAILED, "out/1", error="RuntimeError: diverged"),
        ]
        self.assertEqual(main.main(["train", "--config", config, "--replicas", "2", "--workers", "1"]), 1)
        configs, replicas = mock_suite.call_args[0]
        self.assertEqual(configs[0].name, "mnist_rlr")
        self.assertEqual(replicas, 2)

        mock_suite.return_value = mock_suite.return_value[:1]
        self.assertEqual(main.main(["train", "--config", config]), 0)

    @patch("main.fetch_dataset")
    def test_fetch_data(self, mock_fetch, _):
        mock_fetch.return_value = ["a.gz", "b.gz", "c.gz", "d.gz"]
        self.assertEqual(main.main(["fetch-data", "--dataset", "fashion-mnist", "--root", self.tmp.name]), 0)
        mock_fetch.assert_called_once_with("fashion-mnist", root=self.tmp.name, mirror_url=None)
        mock_fetch.side_effect = OSError("offline")
        self.assertEqual(main.main(["fetch-data", "--dataset", "mnist"]), 1)


if __name__ == "__main__":
    unittest.main()
