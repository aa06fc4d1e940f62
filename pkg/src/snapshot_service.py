"""
Snapshot Service Module
- Stores and restores complete network snapshots as versioned .npz archives.
"""

import glob
import json
import logging
import os
import zipfile
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from errors import SnapshotFormatError
from sparse_network import DenseReadout, Network, SparseLayer

FORMAT_TAG = "sparse-dst-snapshot/1"
SNAPSHOT_SUFFIX = ".npz"

# Fixed member timestamp keeps archives of identical networks byte-identical
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def _network_arrays(net: Network, metadata: Optional[Dict[str, Any]]) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {
        "format": np.array(FORMAT_TAG),
        "layer_sizes": np.asarray(net.layer_sizes, dtype=np.int64),
        "seed_lineage": np.asarray(net.seed_lineage, dtype=np.int64),
        "step_count": np.asarray(net.step_count, dtype=np.int64),
        "readout_weight": net.readout.weight,
        "readout_bias": net.readout.bias,
        "metadata": np.array(json.dumps(metadata or {}, sort_keys=True)),
    }
    for k, layer in enumerate(net.layers):
        arrays[f"layer{k}_in"] = layer.in_index
        arrays[f"layer{k}_out"] = layer.out_index
        arrays[f"layer{k}_weights"] = layer.weights
        arrays[f"layer{k}_bias"] = layer.bias
    return arrays


def save_snapshot(net: Network, path: str, metadata: Optional[Dict[str, Any]] = None) -> str:
    """
    Write a network snapshot.
    :param net: Network to store.
    :param path: Target file; the .npz suffix is added when missing.
    :param metadata: JSON-serializable run information stored alongside the arrays.
    :return: The written path.
    """
    if not path.endswith(SNAPSHOT_SUFFIX):
        path += SNAPSHOT_SUFFIX
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    tmp_path = path + ".part"
    try:
        with zipfile.ZipFile(tmp_path, "w", compression=zipfile.ZIP_STORED) as zf:
            for name, array in _network_arrays(net, metadata).items():
                info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
                with zf.open(info, "w", force_zip64=True) as member:
                    np.lib.format.write_array(member, np.asanyarray(array), allow_pickle=False)
        os.replace(tmp_path, path)
    finally:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)

    logging.info(f"Snapshot stored: {path} (edges per layer {net.edge_counts()})")
    return path


def load_snapshot_with_metadata(path: str) -> Tuple[Network, Dict[str, Any]]:
    try:
        with np.load(path, allow_pickle=False) as data:
            if "format" not in data.files or str(data["format"]) != FORMAT_TAG:
                raise SnapshotFormatError(f"{path} is not a {FORMAT_TAG} snapshot")

            sizes = [int(s) for s in data["layer_sizes"]]
            layers = []
            for k, (in_size, out_size) in enumerate(zip(sizes[:-1], sizes[1:])):
                layers.append(
                    SparseLayer(
                        in_size,
                        out_size,
                        data[f"layer{k}_in"],
                        data[f"layer{k}_out"],
                        data[f"layer{k}_weights"],
                        data[f"layer{k}_bias"],
                    )
                )
            readout = DenseReadout(data["readout_weight"], data["readout_bias"])
            net = Network(
                layers,
                readout,
                seed_lineage=[int(s) for s in data["seed_lineage"]],
                step_count=int(data["step_count"]),
            )
            metadata = json.loads(str(data["metadata"]))
    except (KeyError, ValueError, zipfile.BadZipFile) as e:
        raise SnapshotFormatError(f"Could not read snapshot {path}: {e}") from e
    return net, metadata


def load_snapshot(path: str) -> Network:
    """Restore a network written by save_snapshot."""
    net, _ = load_snapshot_with_metadata(path)
    return net


def list_snapshots(location: str) -> List[str]:
    """A single snapshot file, or every snapshot below a directory in sorted order."""
    if os.path.isfile(location):
        return [location]
    paths = sorted(glob.glob(os.path.join(location, "**", f"*{SNAPSHOT_SUFFIX}"), recursive=True))
    if not paths:
        raise SnapshotFormatError(f"No snapshots found under {location}")
    return paths
