"""
Topology Service Module
- Three-stage topology update between epochs: magnitude pruning, optional removal of
  disconnected neurons, and regrowth by random choice or link prediction.
- Every stage keeps per-layer link counts: what is removed is regrown.
"""

import logging
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Set, Tuple

import numpy as np
import pandas as pd

from errors import ConfigInvalid, EmptyLayer, NotEnoughNonEdges, UntrainedNetwork
from link_prediction import l3_candidates, path_scores
from sparse_network import Network, SparseLayer, fraction_count, kaiming_sample

DEFAULT_PRUNE_FRACTION = 0.3

UPDATE_LOG_COLUMNS = ["epoch", "layer", "removed", "regrown", "dangling_removed", "duration_seconds"]


class RegrowthStrategy(str, Enum):
    RLR = "rlr"
    CH3L3 = "ch3l3"
    L3_COUNT = "l3count"


@dataclass
class TopologyUpdateConfig:
    prune_fraction: float = DEFAULT_PRUNE_FRACTION
    strategy: RegrowthStrategy = RegrowthStrategy.CH3L3
    dangling_cleanup: bool = True
    merge_into_bias: bool = True
    seed: Optional[int] = None
    enabled: bool = True
    # update after every `every`-th epoch
    every: int = 1
    after_final_epoch: bool = False

    def __post_init__(self):
        try:
            self.strategy = RegrowthStrategy(self.strategy)
        except ValueError:
            raise ConfigInvalid(
                f"strategy must be one of {[s.value for s in RegrowthStrategy]}, got {self.strategy!r}"
            )
        if not 0.0 < self.prune_fraction < 1.0:
            raise ConfigInvalid(f"prune_fraction must lie in (0, 1), got {self.prune_fraction}")
        if self.every < 1:
            raise ConfigInvalid(f"every must be at least 1, got {self.every}")

    def is_due(self, epoch: int, epochs: int) -> bool:
        """Whether an update follows the (0-based) epoch."""
        if not self.enabled:
            return False
        if epoch == epochs - 1 and not self.after_final_epoch:
            return False
        return (epoch + 1) % self.every == 0

    def to_dict(self) -> dict:
        return {
            "prune_fraction": self.prune_fraction,
            "strategy": self.strategy.value,
            "dangling_cleanup": self.dangling_cleanup,
            "merge_into_bias": self.merge_into_bias,
            "seed": self.seed,
            "enabled": self.enabled,
            "every": self.every,
            "after_final_epoch": self.after_final_epoch,
        }


@dataclass
class LayerUpdate:
    layer: int
    removed: int
    dangling_removed: int
    regrown: int
    duration_seconds: float
    added_keys: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0, dtype=np.int64))


@dataclass
class UpdateStats:
    epoch: Optional[int]
    layers: List[LayerUpdate]
    cleanup_seconds: float = 0.0

    @property
    def removed(self) -> List[int]:
        return [row.removed for row in self.layers]

    @property
    def regrown(self) -> List[int]:
        return [row.regrown for row in self.layers]

    @property
    def dangling_removed(self) -> List[int]:
        return [row.dangling_removed for row in self.layers]

    @property
    def total_seconds(self) -> float:
        return sum(row.duration_seconds for row in self.layers)

    def rows(self) -> List[list]:
        return [
            [self.epoch, row.layer, row.removed, row.regrown, row.dangling_removed, float(row.duration_seconds)]
            for row in self.layers
        ]


@dataclass
class DisconnectedNeurons:
    """Hidden neurons on no input-to-output path, keyed (hidden layer 1..L, neuron)."""

    neurons: Set[Tuple[int, int]]
    edge_masks: List[np.ndarray]
    forward_reachable: List[np.ndarray]

    @property
    def edge_count(self) -> int:
        return int(sum(mask.sum() for mask in self.edge_masks))


def remove_by_magnitude(layer: SparseLayer, count: int, largest: bool) -> SparseLayer:
    """
    Remove `count` edges ordered by |weight| (smallest first, or largest first).
    Ties are broken by (in_index, out_index) in lexicographic order.
    """
    if count <= 0:
        return layer.copy()
    magnitude = np.abs(layer.weights)
    primary = -magnitude if largest else magnitude
    order = np.lexsort((layer.out_index, layer.in_index, primary))
    mask = np.zeros(layer.edge_count, dtype=bool)
    mask[order[:count]] = True
    return layer.without(mask)


def prune_weakest(layer: SparseLayer, zeta: float) -> Tuple[SparseLayer, int]:
    """
    Magnitude pruning: drop the floor(zeta * E) edges with the smallest |weight|.
    :return: (pruned layer, removed count)
    """
    if layer.edge_count == 0:
        raise EmptyLayer("Cannot prune a layer without edges")
    count = fraction_count(zeta, layer.edge_count)
    return remove_by_magnitude(layer, count, largest=False), count


def find_disconnected(net: Network) -> DisconnectedNeurons:
    """
    Flag hidden neurons unreachable from the input or unable to reach the output.
    The dense readout connects every last-hidden neuron to the output.
    """
    forward_reachable = []
    reach = np.ones(net.input_size, dtype=bool)
    for layer in net.layers:
        nxt = np.zeros(layer.out_size, dtype=bool)
        nxt[layer.out_index[reach[layer.in_index]]] = True
        forward_reachable.append(nxt)
        reach = nxt

    backward_reachable: List[np.ndarray] = [np.empty(0, dtype=bool)] * len(net.layers)
    co_reach = np.ones(net.layers[-1].out_size, dtype=bool)
    for k in reversed(range(len(net.layers))):
        layer = net.layers[k]
        backward_reachable[k] = co_reach
        prev = np.zeros(layer.in_size, dtype=bool)
        prev[layer.in_index[co_reach[layer.out_index]]] = True
        co_reach = prev

    alive = [f & b for f, b in zip(forward_reachable, backward_reachable)]
    neurons = {(k + 1, int(n)) for k, mask in enumerate(alive) for n in np.flatnonzero(~mask)}

    edge_masks = []
    for k, layer in enumerate(net.layers):
        mask = ~alive[k][layer.out_index]
        if k > 0:
            mask |= ~alive[k - 1][layer.in_index]
        edge_masks.append(mask)

    return DisconnectedNeurons(neurons, edge_masks, forward_reachable)


def _constant_activations(net: Network, forward_reachable: List[np.ndarray]) -> List[np.ndarray]:
    """Input-independent activations of neurons the input cannot reach (0 elsewhere)."""
    constants = []
    previous = None
    for k, layer in enumerate(net.layers):
        z = layer.bias.copy()
        if k > 0:
            sources = layer.in_index
            contribution = layer.weights * np.where(forward_reachable[k - 1][sources], 0.0, previous[sources])
            np.add.at(z, layer.out_index, contribution)
        previous = np.where(forward_reachable[k], 0.0, np.maximum(z, 0.0))
        constants.append(previous)
    return constants


def remove_disconnected(net: Network, merge_into_bias: bool = True) -> Tuple[Network, List[int]]:
    """
    Drop every edge incident to a disconnected neuron.
    With merge_into_bias, an edge whose source the input cannot reach carries a constant;
    that constant is folded into the target's bias so the network function is unchanged.
    :return: (cleaned network, removed edges per layer)
    """
    report = find_disconnected(net)
    constants = _constant_activations(net, report.forward_reachable) if merge_into_bias else None

    layers = []
    for k, layer in enumerate(net.layers):
        mask = report.edge_masks[k]
        cleaned = layer.without(mask)
        if constants is not None and k > 0:
            constant_source = mask & ~report.forward_reachable[k - 1][layer.in_index]
            np.add.at(
                cleaned.bias,
                layer.out_index[constant_source],
                layer.weights[constant_source] * constants[k - 1][layer.in_index[constant_source]],
            )
        layers.append(cleaned)

    if report.neurons:
        logging.debug(f"Dangling cleanup flagged {len(report.neurons)} neurons, {report.edge_count} edges")
    cleaned_net = Network(layers, net.readout, list(net.seed_lineage), net.step_count)
    return cleaned_net, [int(mask.sum()) for mask in report.edge_masks]


def _random_non_edges(layer: SparseLayer, count: int, rng: np.random.Generator, exclude_keys=None) -> np.ndarray:
    taken = layer.keys()
    if exclude_keys is not None and len(exclude_keys):
        taken = np.concatenate([taken, exclude_keys])
    pool = np.setdiff1d(np.arange(layer.possible_edges, dtype=np.int64), taken)
    if count > len(pool):
        raise NotEnoughNonEdges(f"Requested {count} new edges, only {len(pool)} non-edges remain")
    return rng.choice(pool, size=count, replace=False)


def choose_regrowth(
    layer: SparseLayer, count: int, strategy: RegrowthStrategy, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pick `count` non-edges to grow.
    RLR draws them uniformly. CH3L3 and L3Count take the highest scores, breaking ties at
    random, and fill up with uniform non-edges when too few candidates score above zero.
    :return: (in_index, out_index) of the new edges
    """
    strategy = RegrowthStrategy(strategy)
    available = layer.possible_edges - layer.edge_count
    if count > available:
        raise NotEnoughNonEdges(f"Requested {count} new edges, only {available} non-edges remain")
    if count <= 0:
        none = np.empty(0, dtype=np.int64)
        return none, none

    if strategy is RegrowthStrategy.RLR:
        keys = _random_non_edges(layer, count, rng)
    else:
        cand_in, cand_out, counts = l3_candidates(layer)
        if strategy is RegrowthStrategy.CH3L3:
            scores = path_scores(layer, cand_in, cand_out, weighted=True)
        else:
            scores = counts
        positive = scores > 0.0
        cand_in, cand_out, scores = cand_in[positive], cand_out[positive], scores[positive]

        tiebreak = rng.permutation(len(scores))
        take = np.lexsort((tiebreak, -scores))[:count]
        keys = cand_out[take] * layer.in_size + cand_in[take]
        if len(keys) < count:
            filler = _random_non_edges(layer, count - len(keys), rng, exclude_keys=keys)
            keys = np.concatenate([keys, filler])

    out_index, in_index = np.divmod(keys, layer.in_size)
    return in_index, out_index


def regrow(layer: SparseLayer, count: int, strategy, rng: np.random.Generator) -> SparseLayer:
    """Grow `count` new edges with Kaiming-initialized weights."""
    in_index, out_index = choose_regrowth(layer, count, strategy, rng)
    weights = kaiming_sample(layer.in_size, rng, size=len(in_index))
    return layer.with_edges(in_index, out_index, weights)


def topology_update(
    net: Network,
    config: TopologyUpdateConfig,
    rng: Optional[np.random.Generator] = None,
    epoch: Optional[int] = None,
) -> Tuple[Network, UpdateStats]:
    """
    Prune, optionally clean up disconnected neurons, and regrow. The network is updated in
    place and every sparse layer ends with the edge count it started with.
    """
    if net.step_count == 0:
        raise UntrainedNetwork("Topology updates need a network that has taken at least one training step")
    rng = rng if rng is not None else np.random.default_rng(config.seed)

    before = net.edge_counts()
    layers = list(net.layers)
    durations = [0.0] * len(layers)
    removed = [0] * len(layers)

    for k, layer in enumerate(layers):
        start = time.perf_counter()
        layers[k], removed[k] = prune_weakest(layer, config.prune_fraction)
        durations[k] += time.perf_counter() - start

    dangling = [0] * len(layers)
    cleanup_seconds = 0.0
    if config.dangling_cleanup:
        start = time.perf_counter()
        pruned = Network(layers, net.readout, list(net.seed_lineage), net.step_count)
        cleaned, dangling = remove_disconnected(pruned, config.merge_into_bias)
        layers = cleaned.layers
        cleanup_seconds = time.perf_counter() - start

    rows = []
    for k, layer in enumerate(layers):
        start = time.perf_counter()
        count = before[k] - layer.edge_count
        layers[k] = regrow(layer, count, config.strategy, rng)
        durations[k] += time.perf_counter() - start + cleanup_seconds / len(layers)
        rows.append(
            LayerUpdate(
                layer=k + 1,
                removed=removed[k],
                dangling_removed=dangling[k],
                regrown=count,
                duration_seconds=durations[k],
                added_keys=np.setdiff1d(layers[k].keys(), layer.keys(), assume_unique=True),
            )
        )

    net.layers = layers
    stats = UpdateStats(epoch=epoch, layers=rows, cleanup_seconds=cleanup_seconds)
    logging.info(
        f"Topology update{'' if epoch is None else f' after epoch {epoch}'}: "
        f"removed {stats.removed}, dangling {stats.dangling_removed}, regrown {stats.regrown}, "
        f"{stats.total_seconds:.3f}s ({config.strategy.value})"
    )
    return net, stats


def append_update_log(path: str, stats: UpdateStats) -> None:
    """Append one row per layer to the topology CSV log, writing the header for a new file."""
    new_file = not os.path.exists(path)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    table = pd.DataFrame(stats.rows(), columns=UPDATE_LOG_COLUMNS)
    table.to_csv(path, mode="a", header=new_file, index=False, lineterminator="\n")


def read_update_log(path: str) -> pd.DataFrame:
    """Topology log rows; epoch is NA for updates logged without one."""
    table = pd.read_csv(path, float_precision="round_trip")
    table["epoch"] = table["epoch"].astype("Int64")
    return table


def epoch_update_seconds(path: str) -> Dict[int, float]:
    """Total update duration over all layers, per epoch of the topology log."""
    table = read_update_log(path).dropna(subset=["epoch"])
    totals = table.groupby("epoch")["duration_seconds"].sum()
    return {int(epoch): float(seconds) for epoch, seconds in totals.items()}
