"""
Robustness Service Module
- Five post-training perturbations of the sparse layers: random pruning, weight-order pruning,
  reverse weight-order pruning, binned weight shuffling and Gaussian weight modification.
- Sweeps test accuracy over a grid of intensities without any retraining.
"""

import logging
import math
import os
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from analysis_service import CurveSummary, aggregate_curves
from dataset_service import LabeledImageSet
from errors import DegenerateRange, GridMismatch, InvalidIntensity
from snapshot_service import load_snapshot
from sparse_network import Network, SparseLayer, fraction_count
from topology_service import remove_by_magnitude
from training_service import evaluate

DEFAULT_REPLICAS = 32
CURVE_COLUMNS = ["kind", "intensity", "replica", "accuracy"]
SUMMARY_COLUMNS = ["kind", "intensity", "mean", "std", "median", "p40", "p60"]

# guards ceil(1/r) against 1/0.1 = 10.000000000000002
_BIN_EPS = 1e-9


class PerturbationKind(str, Enum):
    RANDOM_PRUNE = "random_prune"
    WEIGHT_ORDER_PRUNE = "weight_order_prune"
    REVERSE_WEIGHT_ORDER_PRUNE = "reverse_weight_order_prune"
    WEIGHT_SHUFFLE = "weight_shuffle"
    WEIGHT_MODIFY = "weight_modify"

    @property
    def is_pruning(self) -> bool:
        return self in (
            PerturbationKind.RANDOM_PRUNE,
            PerturbationKind.WEIGHT_ORDER_PRUNE,
            PerturbationKind.REVERSE_WEIGHT_ORDER_PRUNE,
        )

    @property
    def is_deterministic(self) -> bool:
        return self in (PerturbationKind.WEIGHT_ORDER_PRUNE, PerturbationKind.REVERSE_WEIGHT_ORDER_PRUNE)


def check_intensity(kind: PerturbationKind, intensity: float) -> None:
    if not math.isfinite(intensity):
        raise InvalidIntensity(f"{kind.value} intensity must be finite, got {intensity}")
    if kind is PerturbationKind.WEIGHT_MODIFY:
        if intensity < 0.0:
            raise InvalidIntensity(f"weight_modify intensity must be non-negative, got {intensity}")
    elif not 0.0 <= intensity <= 1.0:
        raise InvalidIntensity(f"{kind.value} intensity must lie in [0, 1], got {intensity}")


def _map_layers(net: Network, transform) -> Network:
    perturbed = net.copy()
    perturbed.layers = [transform(k, layer) for k, layer in enumerate(perturbed.layers)]
    return perturbed


def _random_removal(layer: SparseLayer, count: int, rng: np.random.Generator) -> SparseLayer:
    if count <= 0:
        return layer
    mask = np.zeros(layer.edge_count, dtype=bool)
    mask[rng.choice(layer.edge_count, size=count, replace=False)] = True
    return layer.without(mask)


def random_prune(net: Network, p: float, rng: np.random.Generator) -> Network:
    """Remove floor(p * E) uniformly chosen edges from every sparse layer."""
    check_intensity(PerturbationKind.RANDOM_PRUNE, p)
    return _map_layers(net, lambda k, layer: _random_removal(layer, fraction_count(p, layer.edge_count), rng))


def weight_order_prune(net: Network, p: float) -> Network:
    """Targeted attack: remove the floor(p * E) largest-magnitude edges of every sparse layer."""
    check_intensity(PerturbationKind.WEIGHT_ORDER_PRUNE, p)
    return _map_layers(
        net, lambda k, layer: remove_by_magnitude(layer, fraction_count(p, layer.edge_count), largest=True)
    )


def reverse_weight_order_prune(net: Network, p: float) -> Network:
    check_intensity(PerturbationKind.REVERSE_WEIGHT_ORDER_PRUNE, p)
    return _map_layers(
        net, lambda k, layer: remove_by_magnitude(layer, fraction_count(p, layer.edge_count), largest=False)
    )


def shuffle_layer_weights(weights: np.ndarray, bin_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """
    Permute weights among the entries that share a bin.
    Bins are contiguous, r * (w_max - w_min) wide over the signed weight range; the last bin
    may be shorter and is closed at w_max.
    """
    low, high = float(weights.min()), float(weights.max())
    if high == low:
        raise DegenerateRange(f"All {len(weights)} weights equal {low}; no range to bin")
    bin_count = math.ceil(1.0 / bin_ratio - _BIN_EPS)
    width = bin_ratio * (high - low)
    bins = np.minimum(np.floor((weights - low) / width).astype(np.int64), bin_count - 1)

    slots = np.argsort(bins, kind="stable")
    donors = np.lexsort((rng.random(len(weights)), bins))
    shuffled = np.empty_like(weights)
    shuffled[slots] = weights[donors]
    return shuffled


def weight_shuffle(net: Network, bin_ratio: float, rng: np.random.Generator) -> Network:
    """Shuffle weight values within fixed-width bins, layer by layer. The edge set is unchanged."""
    check_intensity(PerturbationKind.WEIGHT_SHUFFLE, bin_ratio)

    def shuffle(k: int, layer: SparseLayer) -> SparseLayer:
        if bin_ratio == 0.0 or layer.edge_count < 2:
            return layer
        try:
            return layer.with_weights(shuffle_layer_weights(layer.weights, bin_ratio, rng))
        except DegenerateRange as e:
            logging.warning(f"Layer {k + 1} left unshuffled: {e}")
            return layer

    return _map_layers(net, shuffle)


def mean_magnitude(weights: np.ndarray) -> float:
    return float(np.mean(np.abs(weights))) if len(weights) else 0.0


def weight_modify(net: Network, m_p: float, rng: np.random.Generator) -> Network:
    """
    Add N(0, (w_bar * m_p)^2) noise to every sparse weight, where w_bar is the mean |w|
    of the layer.
    """
    check_intensity(PerturbationKind.WEIGHT_MODIFY, m_p)

    def modify(k: int, layer: SparseLayer) -> SparseLayer:
        if m_p == 0.0 or layer.edge_count == 0:
            return layer
        sigma = mean_magnitude(layer.weights) * m_p
        return layer.with_weights(layer.weights + rng.normal(0.0, sigma, layer.edge_count))

    return _map_layers(net, modify)


@dataclass
class PerturbationSpec:
    kind: PerturbationKind
    intensity: float
    seed: Optional[int] = None

    def __post_init__(self):
        try:
            self.kind = PerturbationKind(self.kind)
        except ValueError:
            raise InvalidIntensity(f"Unknown perturbation kind {self.kind!r}")
        check_intensity(self.kind, self.intensity)

    def apply(self, net: Network, rng: Optional[np.random.Generator] = None) -> Network:
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        if self.kind is PerturbationKind.RANDOM_PRUNE:
            return random_prune(net, self.intensity, rng)
        if self.kind is PerturbationKind.WEIGHT_ORDER_PRUNE:
            return weight_order_prune(net, self.intensity)
        if self.kind is PerturbationKind.REVERSE_WEIGHT_ORDER_PRUNE:
            return reverse_weight_order_prune(net, self.intensity)
        if self.kind is PerturbationKind.WEIGHT_SHUFFLE:
            return weight_shuffle(net, self.intensity, rng)
        return weight_modify(net, self.intensity, rng)


@dataclass
class RobustnessCurve:
    """Accuracy samples over an intensity grid: samples[g, r] is replica r at grid point g."""

    kind: PerturbationKind
    grid: np.ndarray
    samples: np.ndarray

    def __post_init__(self):
        self.kind = PerturbationKind(self.kind)
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if len(self.grid) == 0 or np.any(np.diff(self.grid) <= 0.0):
            raise InvalidIntensity(f"Grid must be non-empty and strictly increasing, got {self.grid}")
        if self.samples.ndim != 2 or self.samples.shape[0] != len(self.grid) or self.samples.shape[1] == 0:
            raise GridMismatch(f"Samples of shape {self.samples.shape} do not match a grid of {len(self.grid)}")

    @property
    def replicas(self) -> int:
        return self.samples.shape[1]

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=1)

    def summary(self) -> CurveSummary:
        return aggregate_curves([(self.grid, column) for column in self.samples.T])

    def merge(self, other: "RobustnessCurve") -> "RobustnessCurve":
        """Concatenate replicas of two curves over the same grid."""
        if other.kind is not self.kind or not np.array_equal(other.grid, self.grid):
            raise GridMismatch(f"Cannot merge {other.kind.value} curve into {self.kind.value} curve on another grid")
        return RobustnessCurve(self.kind, self.grid, np.hstack([self.samples, other.samples]))

    def to_frame(self) -> pd.DataFrame:
        """Long table: one row per (intensity, replica)."""
        return pd.DataFrame(
            {
                "kind": self.kind.value,
                "intensity": np.repeat(self.grid, self.replicas),
                "replica": np.tile(np.arange(self.replicas, dtype=np.int64), len(self.grid)),
                "accuracy": self.samples.ravel(),
            },
            columns=CURVE_COLUMNS,
        )

    def to_csv(self, path: str) -> str:
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        return path

    def summary_to_csv(self, path: str) -> str:
        summary = self.summary()
        table = pd.DataFrame(
            {
                "kind": self.kind.value,
                "intensity": summary.grid,
                "mean": summary.mean,
                "std": summary.std,
                "median": summary.median,
                "p40": summary.p40,
                "p60": summary.p60,
            },
            columns=SUMMARY_COLUMNS,
        )
        table.to_csv(path, index=False, lineterminator="\n")
        return path

    @classmethod
    def from_csv(cls, path: str) -> "RobustnessCurve":
        table = pd.read_csv(path, float_precision="round_trip")
        if table.empty:
            raise GridMismatch(f"{path} holds no samples")
        kinds = sorted(table["kind"].unique())
        if len(kinds) != 1:
            raise GridMismatch(f"{path} mixes perturbation kinds {kinds}")
        if table.duplicated(["intensity", "replica"]).any():
            raise GridMismatch(f"{path} holds a replica twice at one intensity")
        samples = table.pivot(index="intensity", columns="replica", values="accuracy").sort_index()
        samples = samples.reindex(columns=range(int(table["replica"].max()) + 1))
        if samples.isna().to_numpy().any():
            raise GridMismatch(f"{path} does not hold every replica at every intensity")
        return cls(kinds[0], samples.index.to_numpy(dtype=np.float64), samples.to_numpy(dtype=np.float64))


def _cumulative_pruning(
    net: Network,
    kind: PerturbationKind,
    grid: np.ndarray,
    test_set: LabeledImageSet,
    rng: np.random.Generator,
) -> List[float]:
    """Remove edges step by step so that floor(p * E0) edges are gone at grid value p."""
    current = net.copy()
    original = net.edge_counts()
    accuracies = []
    for p in grid:
        layers = []
        for layer, total in zip(current.layers, original):
            count = fraction_count(p, total) - (total - layer.edge_count)
            if kind is PerturbationKind.RANDOM_PRUNE:
                layers.append(_random_removal(layer, count, rng))
            else:
                largest = kind is PerturbationKind.WEIGHT_ORDER_PRUNE
                layers.append(remove_by_magnitude(layer, count, largest=largest) if count > 0 else layer)
        current.layers = layers
        accuracies.append(evaluate(current, test_set))
    return accuracies


def sweep(
    snapshot: Union[Network, str],
    kind,
    grid: Sequence[float],
    replicas: int,
    test_set: LabeledImageSet,
    seed: int = 0,
    progress: bool = True,
) -> RobustnessCurve:
    """
    Accuracy of a trained network under increasing perturbation, with no weight learning.
    Pruning kinds act cumulatively along the grid; shuffle and modify start from the pristine
    network at every grid value.
    :param snapshot: Network or snapshot path.
    :param replicas: Accuracy samples per grid point; deterministic kinds are evaluated once.
    :param seed: Seed the replica streams are spawned from.
    """
    kind = PerturbationKind(kind)
    net = load_snapshot(snapshot) if isinstance(snapshot, str) else snapshot
    grid = np.asarray(grid, dtype=np.float64)
    if replicas < 1:
        raise InvalidIntensity(f"replicas must be at least 1, got {replicas}")
    if len(grid) == 0 or np.any(np.diff(grid) <= 0.0):
        raise InvalidIntensity(f"Grid must be non-empty and strictly increasing, got {grid}")
    for intensity in grid:
        check_intensity(kind, float(intensity))

    streams = np.random.SeedSequence(seed).spawn(replicas)
    runs = 1 if kind.is_deterministic else replicas
    columns = []
    for replica in tqdm(range(runs), desc=f"{kind.value} sweep", leave=False, disable=None if progress else True):
        rng = np.random.default_rng(streams[replica])
        if kind.is_pruning:
            columns.append(_cumulative_pruning(net, kind, grid, test_set, rng))
        else:
            columns.append(
                [evaluate(PerturbationSpec(kind, float(intensity)).apply(net, rng), test_set) for intensity in grid]
            )
    samples = np.array(columns).T
    if runs < replicas:
        samples = np.repeat(samples, replicas, axis=1)

    curve = RobustnessCurve(kind, grid, samples)
    logging.info(
        f"Sweep {kind.value}: {len(grid)} intensities x {replicas} replicas, "
        f"accuracy {curve.mean()[0]:.4f} -> {curve.mean()[-1]:.4f}"
    )
    return curve


def sweep_snapshots(
    paths: Sequence[str],
    kind,
    grid: Sequence[float],
    replicas: int,
    test_set: LabeledImageSet,
    seed: int = 0,
    progress: bool = True,
) -> RobustnessCurve:
    """Sweep several trained networks and merge their curves replica-wise."""
    if not paths:
        raise GridMismatch("No snapshots to sweep")
    seeds = np.random.SeedSequence(seed).generate_state(len(paths))
    curve = None
    for path, snapshot_seed in zip(paths, seeds):
        logging.info(f"Sweeping {path}")
        result = sweep(path, kind, grid, replicas, test_set, int(snapshot_seed), progress)
        curve = result if curve is None else curve.merge(result)
    return curve


def write_curve(curve: RobustnessCurve, out_dir: str) -> List[str]:
    """Write robustness_<kind>.csv and its _summary sibling."""
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, f"robustness_{curve.kind.value}")
    return [curve.to_csv(base + ".csv"), curve.summary_to_csv(base + "_summary.csv")]
