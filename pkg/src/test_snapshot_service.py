"""
Tests for network snapshots
"""

import os
import tempfile
import unittest

import numpy as np

from errors import SnapshotFormatError
from snapshot_service import list_snapshots, load_snapshot, load_snapshot_with_metadata, save_snapshot
from sparse_network import init_network


class TestSnapshotService(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.net = init_network((30, 20, 10), class_count=4, density=0.2, seed=9)
        self.net.layers[0].bias[:] = np.linspace(-1.0, 1.0, 20)
        self.net.step_count = 17

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, *parts):
        return os.path.join(self.tmp.name, *parts)

    def test_round_trip_is_bit_exact(self):
        written = save_snapshot(self.net, self.path("net"), metadata={"strategy": "ch3l3", "epoch": 3})
        self.assertTrue(written.endswith(".npz"))

        restored, metadata = load_snapshot_with_metadata(written)
        self.assertEqual(metadata, {"strategy": "ch3l3", "epoch": 3})
        self.assertEqual(restored.layer_sizes, self.net.layer_sizes)
        self.assertEqual(restored.seed_lineage, [9])
        self.assertEqual(restored.step_count, 17)
        for original, copy in zip(self.net.layers, restored.layers):
            np.testing.assert_array_equal(original.in_index, copy.in_index)
            np.testing.assert_array_equal(original.out_index, copy.out_index)
            self.assertEqual(original.weights.tobytes(), copy.weights.tobytes())
            self.assertEqual(original.bias.tobytes(), copy.bias.tobytes())
        self.assertEqual(self.net.readout.weight.tobytes(), restored.readout.weight.tobytes())

    def test_identical_networks_give_identical_files(self):
        first = save_snapshot(self.net, self.path("a.npz"))
        second = save_snapshot(self.net.copy(), self.path("b.npz"))
        with open(first, "rb") as a, open(second, "rb") as b:
            self.assertEqual(a.read(), b.read())

    def test_foreign_archive_rejected(self):
        foreign = self.path("foreign.npz")
        np.savez(foreign, weights=np.zeros(3))
        with self.assertRaises(SnapshotFormatError):
            load_snapshot(foreign)

    def test_corrupt_file_rejected(self):
        broken = self.path("broken.npz")
        with open(broken, "wb") as handle:
            handle.write(b"not a zip archive")
        with self.assertRaises(SnapshotFormatError):
            load_snapshot(broken)

    def test_list_snapshots(self):
        save_snapshot(self.net, self.path("run", "b"))
        save_snapshot(self.net, self.path("run", "nested", "a"))
        found = list_snapshots(self.path("run"))
        self.assertEqual([os.path.basename(p) for p in found], ["b.npz", "a.npz"])
        self.assertEqual(list_snapshots(found[0]), [found[0]])
        with self.assertRaises(SnapshotFormatError):
            list_snapshots(self.path("empty"))


if __name__ == "__main__":
    unittest.main()
