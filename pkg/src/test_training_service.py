"""
Tests for the training loop, optimizers and the experiment runner
"""

import os
import tempfile
import unittest
from dataclasses import replace
from unittest.mock import MagicMock, patch

import numpy as np

import experiment_runner
from dataset_service import LabeledImageSet
from errors import ConfigInvalid
from experiment_runner import STATUS_COMPLETED, STATUS_FAILED, read_manifest, replica_seeds, run_experiment_suite
from optimizers import Adam, MomentumSGD, build_optimizer
from snapshot_service import load_snapshot
from sparse_network import forward, init_network, loss_and_grad
from topology_service import (
    RegrowthStrategy,
    TopologyUpdateConfig,
    epoch_update_seconds,
    read_update_log,
    topology_update,
)
from training_service import (
    CHECKPOINT_DIR,
    FINAL_SNAPSHOT,
    HISTORY_FILE,
    TOPOLOGY_LOG_FILE,
    OptimizerConfig,
    TrainConfig,
    TrainingHistory,
    derive_run_seeds,
    evaluate,
    train,
)

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "config")


def synthetic_split(count, seed, class_count=3) -> LabeledImageSet:
    """Images whose label is the brightest of three pixel bands."""
    rng = np.random.default_rng(seed)
    images = rng.random((count, 784)) * 0.5
    labels = rng.integers(0, class_count, count)
    for label in range(class_count):
        band = slice(label * 200, label * 200 + 200)
        images[labels == label, band] += 0.5
    return LabeledImageSet(images, labels, class_count)


def small_config(**overrides) -> TrainConfig:
    values = dict(
        name="toy",
        layer_sizes=[784, 32, 32],
        density=0.1,
        epochs=2,
        batch_size=50,
        topology=TopologyUpdateConfig(strategy="rlr"),
        seed=5,
        record_timing=False,
        progress=False,
    )
    values.update(overrides)
    return TrainConfig(**values)


class TestTrain(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.train_set = synthetic_split(200, 0)
        cls.test_set = synthetic_split(100, 1)

    def test_single_epoch_without_update(self):
        net, history = train(small_config(epochs=1), self.train_set, self.test_set)
        self.assertEqual(len(history), 1)
        self.assertEqual(history.update_seconds, [0.0])
        self.assertGreater(net.step_count, 0)
        self.assertEqual(history.edge_counts[0], net.edge_counts())

    def test_edge_counts_constant_across_updates(self):
        config = small_config(epochs=3, topology=TopologyUpdateConfig(strategy="ch3l3"), record_timing=True)
        net, history = train(config, self.train_set, self.test_set)
        initial = init_network([784, 32, 32], 3, 0.1, derive_run_seeds(5)[0]).edge_counts()
        self.assertEqual(history.edge_counts, [initial] * 3)
        self.assertEqual(net.edge_counts(), initial)
        self.assertGreater(history.update_seconds[0], 0.0)
        self.assertEqual(history.update_seconds[-1], 0.0)

    def test_same_seed_gives_identical_outputs(self):
        with tempfile.TemporaryDirectory() as tmp:
            outputs = []
            for run in ("a", "b"):
                out_dir = os.path.join(tmp, run)
                train(small_config(), self.train_set, self.test_set, out_dir=out_dir)
                files = []
                for name in (HISTORY_FILE, FINAL_SNAPSHOT):
                    with open(os.path.join(out_dir, name), "rb") as handle:
                        files.append(handle.read())
                outputs.append(files)
        self.assertEqual(outputs[0], outputs[1])

    def test_different_seeds_differ(self):
        _, first = train(small_config(seed=1), self.train_set, self.test_set)
        _, second = train(small_config(seed=2), self.train_set, self.test_set)
        self.assertNotEqual(first.loss, second.loss)

    def test_outputs_written(self):
        with tempfile.TemporaryDirectory() as tmp:
            train(small_config(checkpoint_every=1), self.train_set, self.test_set, out_dir=tmp)
            self.assertTrue(os.path.exists(os.path.join(tmp, CHECKPOINT_DIR, "epoch_0001.npz")))
            self.assertTrue(os.path.exists(os.path.join(tmp, CHECKPOINT_DIR, "epoch_0002.npz")))
            rows = read_update_log(os.path.join(tmp, TOPOLOGY_LOG_FILE))
            self.assertEqual(rows["layer"].tolist(), [1, 2])
            history = TrainingHistory.from_csv(os.path.join(tmp, HISTORY_FILE))
        self.assertEqual(history.metadata["strategy"], "rlr")
        self.assertEqual(history.metadata["seed"], "5")
        self.assertEqual(len(history), 2)

    def test_shipped_config_reproduces_history_bytes(self):
        shipped = TrainConfig.from_file(os.path.join(CONFIG_DIR, "mnist_ch3l3.json"))
        config = replace(shipped, layer_sizes=[784, 40, 40], density=0.1, epochs=3, batch_size=50, progress=False)
        with tempfile.TemporaryDirectory() as tmp:
            outputs = []
            for run in ("a", "b"):
                out_dir = os.path.join(tmp, run)
                train(config, self.train_set, self.test_set, out_dir=out_dir)
                files = []
                for name in (HISTORY_FILE, FINAL_SNAPSHOT):
                    with open(os.path.join(out_dir, name), "rb") as handle:
                        files.append(handle.read())
                outputs.append(files)
            timed = TrainingHistory.from_run_dir(os.path.join(tmp, "a"))
            durations = epoch_update_seconds(os.path.join(tmp, "a", TOPOLOGY_LOG_FILE))
        self.assertEqual(outputs[0], outputs[1])
        self.assertEqual(timed.update_seconds[:2], [durations[1], durations[2]])
        self.assertEqual(timed.update_seconds[2], 0.0)
        self.assertGreater(timed.mean_update_seconds(), 0.0)

    def test_timed_history_is_kept(self):
        config = small_config(epochs=3, record_timing=True)
        with tempfile.TemporaryDirectory() as tmp:
            _, history = train(config, self.train_set, self.test_set, out_dir=tmp)
            restored = TrainingHistory.from_run_dir(tmp)
        self.assertEqual(restored.update_seconds, history.update_seconds)

    def test_first_epoch_loss_falls(self):
        losses = []

        def recording(net, cache, labels):
            loss, grads = loss_and_grad(net, cache, labels)
            losses.append(loss)
            return loss, grads

        config = small_config(epochs=1, optimizer=OptimizerConfig(learning_rate=0.01))
        with patch("training_service.loss_and_grad", side_effect=recording):
            train(config, synthetic_split(1000, 4), self.test_set)
        self.assertEqual(len(losses), 20)
        self.assertLess(np.median(losses[-10:]), np.median(losses[:10]))

    def test_random_regrowth_updates_faster_than_ch3l3(self):
        means = {}
        for strategy in ("rlr", "ch3l3"):
            topology = TopologyUpdateConfig(strategy=strategy)
            config = small_config(layer_sizes=[784, 64, 64], epochs=4, topology=topology, record_timing=True)
            _, history = train(config, self.train_set, self.test_set)
            means[strategy] = history.mean_update_seconds()
        self.assertGreater(means["rlr"], 0.0)
        self.assertLess(means["rlr"], means["ch3l3"])

    def test_one_split_given_is_rejected(self):
        with patch("training_service.load_dataset") as mock_load:
            with self.assertRaises(ConfigInvalid):
                train(small_config(), self.train_set, None)
            with self.assertRaises(ConfigInvalid):
                train(small_config(), None, self.test_set)
        mock_load.assert_not_called()

    @patch("training_service.load_dataset")
    def test_both_splits_loaded_when_omitted(self, mock_load):
        mock_load.return_value = (self.train_set, self.test_set)
        _, history = train(small_config(epochs=1))
        mock_load.assert_called_once_with("mnist", None, strict=True)
        self.assertEqual(len(history), 1)

    def test_learns_the_synthetic_task(self):
        data = {**small_config(epochs=3).to_dict(), "optimizer": {"kind": "adam", "learning_rate": 0.01}}
        _, history = train(TrainConfig.from_dict(data), self.train_set, self.test_set)
        self.assertGreater(history.accuracy[-1], 0.5)

    def test_limits_apply(self):
        net, history = train(small_config(epochs=1, train_limit=50, test_limit=10), self.train_set, self.test_set)
        self.assertEqual(net.step_count, 1)
        self.assertAlmostEqual(history.accuracy[0] * 10, round(history.accuracy[0] * 10))


class TestEvaluate(unittest.TestCase):
    def setUp(self):
        self.data = synthetic_split(60, 3)
        self.net = init_network([784, 16], 3, 0.1, seed=0)

    def test_constant_prediction(self):
        self.net.readout.weight[...] = 0.0
        self.net.readout.bias[:] = [0.0, 0.0, 1.0]
        labels = np.full(len(self.data), 2)
        data = LabeledImageSet(self.data.images.copy(), labels, 3)
        self.assertEqual(evaluate(self.net, data), 1.0)

    def test_ties_go_to_first_class(self):
        for param in self.net.parameters():
            param[...] = 0.0
        expected = np.mean(self.data.labels == 0)
        self.assertEqual(evaluate(self.net, self.data), expected)

    def test_subsets_decompose(self):
        first, second = self.data.subset(np.arange(25)), self.data.subset(np.arange(25, 60))
        combined = evaluate(self.net, first) * 25 + evaluate(self.net, second) * 35
        self.assertAlmostEqual(evaluate(self.net, self.data, batch_size=7) * 60, combined, places=9)


class TestTrainConfig(unittest.TestCase):
    def test_shipped_configs_load(self):
        for name, strategy in (("mnist_ch3l3.json", RegrowthStrategy.CH3L3), ("mnist_rlr.json", RegrowthStrategy.RLR)):
            config = TrainConfig.from_file(os.path.join(CONFIG_DIR, name))
            self.assertEqual(config.topology.strategy, strategy)
            self.assertEqual(config.layer_sizes, [784, 1000, 1000, 1000])
            self.assertEqual(config.topology.prune_fraction, 0.3)
            self.assertEqual(config.optimizer.learning_rate, 0.001)

    def test_dict_round_trip(self):
        config = small_config(checkpoint_every=3)
        self.assertEqual(TrainConfig.from_dict(config.to_dict()), config)

    def test_invalid_values(self):
        with self.assertRaises(ConfigInvalid):
            small_config(epochs=0)
        with self.assertRaises(ConfigInvalid):
            small_config(density=0.0)
        with self.assertRaises(ConfigInvalid):
            TrainConfig.from_dict({"topology": {"strategy": "ch2"}})
        with self.assertRaises(ConfigInvalid):
            TrainConfig.from_dict({"optimizer": {"kind": "rmsprop"}})

    def test_unknown_fields(self):
        with self.assertRaises(ConfigInvalid):
            TrainConfig.from_dict({"learning_rate": 0.1})
        with self.assertRaises(ConfigInvalid):
            TrainConfig.from_dict({"topology": {"zeta": 0.3}})

    def test_malformed_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "broken.json")
            with open(path, "w") as handle:
                handle.write("{not json")
            with self.assertRaises(ConfigInvalid):
                TrainConfig.from_file(path)


class TestTrainingHistory(unittest.TestCase):
    def test_csv_round_trip(self):
        history = TrainingHistory(metadata={"strategy": "ch3l3", "seed": "3"})
        history.append(0.1 + 0.2, 2.302585092994046, 0.0, [10, 12])
        history.append(0.97, 0.123456789012345, 1.5, [10, 12])
        with tempfile.TemporaryDirectory() as tmp:
            restored = TrainingHistory.from_csv(history.to_csv(os.path.join(tmp, "h.csv")))
        self.assertEqual(restored, history)

    def test_first_epoch_above(self):
        history = TrainingHistory(accuracy=[0.5, 0.9, 0.95, 0.97])
        self.assertEqual(history.first_epoch_above(0.9), 3)
        self.assertEqual(history.first_epoch_above(0.4), 1)
        self.assertIsNone(history.first_epoch_above(0.99))

    def test_mean_update_seconds_ignores_untimed_epochs(self):
        history = TrainingHistory(update_seconds=[1.0, 3.0, 0.0])
        self.assertEqual(history.mean_update_seconds(), 2.0)
        self.assertEqual(TrainingHistory().mean_update_seconds(), 0.0)

    def test_run_seeds(self):
        first, second = derive_run_seeds(7), derive_run_seeds(7)
        self.assertEqual(first[0], second[0])
        shuffle = np.random.default_rng(first[1]).random(4)
        topology = np.random.default_rng(first[2]).random(4)
        np.testing.assert_array_equal(shuffle, np.random.default_rng(second[1]).random(4))
        self.assertFalse(np.array_equal(shuffle, topology))


class TestOptimizers(unittest.TestCase):
    def setUp(self):
        self.net = init_network([20, 16, 16], 3, 0.3, seed=2)
        rng = np.random.default_rng(0)
        self.batch, self.labels = rng.random((8, 20)), rng.integers(0, 3, 8)

    def loss(self):
        _, cache = forward(self.net, self.batch)
        return loss_and_grad(self.net, cache, self.labels)

    def test_small_steps_reduce_loss(self):
        for optimizer in (Adam(self.net, 1e-4), MomentumSGD(self.net, 1e-3)):
            before, grads = self.loss()
            optimizer.step(self.net, grads)
            after, _ = self.loss()
            self.assertLess(after, before)
        self.assertEqual(self.net.step_count, 2)

    def test_rebind_follows_surviving_edges(self):
        optimizer = Adam(self.net, 1e-3)
        _, grads = self.loss()
        optimizer.step(self.net, grads)
        old_keys = [layer.keys().copy() for layer in self.net.layers]
        old_m = [slot.copy() for slot in optimizer.state["m"]]

        _, stats = topology_update(self.net, TopologyUpdateConfig(strategy="rlr"), np.random.default_rng(3))
        optimizer.rebind(self.net, [row.added_keys for row in stats.layers])

        for k, layer in enumerate(self.net.layers):
            m = optimizer.state["m"][k]
            self.assertEqual(m.shape, (layer.edge_count,))
            added = np.isin(layer.keys(), stats.layers[k].added_keys)
            self.assertTrue(np.all(m[added] == 0.0))
            lookup = dict(zip(old_keys[k].tolist(), old_m[k].tolist()))
            for key, value in zip(layer.keys()[~added].tolist(), m[~added].tolist()):
                self.assertEqual(value, lookup[key])
        _, grads = self.loss()
        optimizer.step(self.net, grads)

    def test_build_optimizer(self):
        self.assertIsInstance(build_optimizer("adam", self.net, 1e-3), Adam)
        self.assertIsInstance(build_optimizer("sgd", self.net, 1e-2), MomentumSGD)
        with self.assertRaises(ConfigInvalid):
            build_optimizer("lbfgs", self.net, 1e-3)
        with self.assertRaises(ConfigInvalid):
            build_optimizer("adam", self.net, 0.0)


class TestExperimentSuite(unittest.TestCase):
    def test_replica_seeds(self):
        seeds = replica_seeds(42, 10)
        self.assertEqual(len(set(seeds)), 10)
        self.assertEqual(seeds, replica_seeds(42, 10))
        self.assertEqual(seeds[:3], replica_seeds(42, 3))

    @patch("experiment_runner.load_dataset")
    @patch("experiment_runner.train")
    def test_failing_replica_does_not_stop_siblings(self, mock_train, mock_load):
        mock_load.return_value = (MagicMock(), MagicMock())
        failing_seed = replica_seeds(11, 10)[3]

        def fake_train(config, train_set, test_set, out_dir, origin):
            if config.seed == failing_seed:
                raise RuntimeError("diverged")
            return None, TrainingHistory(accuracy=[0.9])

        mock_train.side_effect = fake_train
        with tempfile.TemporaryDirectory() as tmp:
            records = run_experiment_suite([small_config()], replicas=10, out_dir=tmp, master_seed=11, workers=1)
            manifest = read_manifest(tmp)

        statuses = [record.status for record in records]
        self.assertEqual(statuses.count(STATUS_COMPLETED), 9)
        self.assertEqual(statuses.count(STATUS_FAILED), 1)
        self.assertEqual(records[3].status, STATUS_FAILED)
        self.assertIn("diverged", records[3].error)
        self.assertEqual(manifest, records)
        self.assertEqual(mock_train.call_count, 10)
        self.assertEqual([call.kwargs["origin"] for call in mock_train.call_args_list], [(11, r) for r in range(10)])
        self.assertEqual({record.master_seed for record in manifest}, {11})
        mock_load.assert_called_once()
        self.assertTrue(records[0].out_dir.endswith(os.path.join("toy", "replica_00")))

    @patch("experiment_runner.load_dataset")
    def test_master_seed_recorded(self, mock_load):
        mock_load.return_value = (synthetic_split(100, 0), synthetic_split(50, 1))
        with tempfile.TemporaryDirectory() as tmp:
            config = small_config(epochs=1)
            records = run_experiment_suite([config], replicas=2, out_dir=tmp, master_seed=987654, workers=1)
            manifest = read_manifest(tmp)
            history = TrainingHistory.from_csv(records[1].history_path)
            snapshot = load_snapshot(records[1].snapshot_path)

        seed = replica_seeds(987654, 2)[1]
        self.assertEqual([record.master_seed for record in manifest], [987654, 987654])
        self.assertEqual(history.metadata["master_seed"], "987654")
        self.assertEqual(history.metadata["replica"], "1")
        self.assertEqual(history.metadata["seed"], str(seed))
        self.assertEqual(history.metadata["seed_lineage"].split()[:3], ["987654", "1", str(seed)])
        self.assertEqual(snapshot.seed_lineage[:3], [987654, 1, seed])

    @patch("experiment_runner.load_dataset")
    def test_unloadable_dataset_fails_every_replica(self, mock_load):
        mock_load.side_effect = OSError("no data")
        with patch.object(experiment_runner, "train", side_effect=OSError("no data")):
            with tempfile.TemporaryDirectory() as tmp:
                records = run_experiment_suite([small_config()], replicas=2, out_dir=tmp, workers=1)
        self.assertEqual([record.status for record in records], [STATUS_FAILED] * 2)

    def test_invalid_replica_count(self):
        with self.assertRaises(ValueError):
            run_experiment_suite([small_config()], replicas=0)


if __name__ == "__main__":
    unittest.main()
