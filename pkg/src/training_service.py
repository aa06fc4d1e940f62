"""
Training Service Module
- Alternates one epoch of mini-batch weight learning with one topology update.
- Records accuracy, loss, update duration and edge counts per epoch and checkpoints networks.
"""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from dataset_service import LabeledImageSet, load_dataset
from errors import ConfigInvalid
from link_prediction import warmup
from optimizers import OPTIMIZER_KINDS, build_optimizer
from snapshot_service import save_snapshot
from sparse_network import DEFAULT_LAYER_SIZES, Network, forward, init_network, loss_and_grad
from topology_service import (
    RegrowthStrategy,
    TopologyUpdateConfig,
    append_update_log,
    epoch_update_seconds,
    topology_update,
)

HISTORY_FILE = "history.csv"
TOPOLOGY_LOG_FILE = "topology.csv"
FINAL_SNAPSHOT = "final.npz"
CHECKPOINT_DIR = "checkpoints"

EVAL_BATCH_SIZE = 1000


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigInvalid(f"optimizer.kind must be one of {OPTIMIZER_KINDS}, got {self.kind!r}")


@dataclass
class TrainConfig:
    name: str = "run"
    dataset: str = "mnist"
    data_root: Optional[str] = None
    layer_sizes: List[int] = field(default_factory=lambda: list(DEFAULT_LAYER_SIZES))
    density: float = 0.01
    epochs: int = 50
    batch_size: int = 128
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    topology: TopologyUpdateConfig = field(default_factory=TopologyUpdateConfig)
    seed: int = 0
    # snapshot every n epochs besides the final one; 0 keeps only the final snapshot
    checkpoint_every: int = 0
    # wall-clock update durations in history.csv; topology.csv always carries them
    record_timing: bool = False
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None
    strict_splits: bool = True
    progress: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigInvalid(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigInvalid(f"batch_size must be at least 1, got {self.batch_size}")
        if not 0.0 < self.density <= 1.0:
            raise ConfigInvalid(f"density must lie in (0, 1], got {self.density}")
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ConfigInvalid(f"layer_sizes needs an input size and positive hidden sizes, got {self.layer_sizes}")
        if self.checkpoint_every < 0:
            raise ConfigInvalid(f"checkpoint_every must be non-negative, got {self.checkpoint_every}")
        for limit in ("train_limit", "test_limit"):
            value = getattr(self, limit)
            if value is not None and value < 1:
                raise ConfigInvalid(f"{limit} must be positive, got {value}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigInvalid(f"Unknown config fields: {unknown}")
        values = dict(data)
        try:
            if isinstance(values.get("optimizer"), dict):
                values["optimizer"] = OptimizerConfig(**values["optimizer"])
            if isinstance(values.get("topology"), dict):
                values["topology"] = TopologyUpdateConfig(**values["topology"])
            if "layer_sizes" in values:
                values["layer_sizes"] = [int(size) for size in values["layer_sizes"]]
            return cls(**values)
        except TypeError as e:
            raise ConfigInvalid(f"Invalid config: {e}") from e

    @classmethod
    def from_file(cls, path: str) -> "TrainConfig":
        try:
            with open(path, "r") as handle:
                data = json.load(handle)
        except json.JSONDecodeError as e:
            raise ConfigInvalid(f"{path} is not valid JSON: {e}") from e
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["topology"] = self.topology.to_dict()
        return data

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=int(seed))


@dataclass
class TrainingHistory:
    accuracy: List[float] = field(default_factory=list)
    loss: List[float] = field(default_factory=list)
    update_seconds: List[float] = field(default_factory=list)
    edge_counts: List[List[int]] = field(default_factory=list)
    metadata: Dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.accuracy)

    def append(self, accuracy: float, loss: float, update_seconds: float, edge_counts: List[int]) -> None:
        self.accuracy.append(float(accuracy))
        self.loss.append(float(loss))
        self.update_seconds.append(float(update_seconds))
        self.edge_counts.append([int(count) for count in edge_counts])

    def first_epoch_above(self, threshold: float) -> Optional[int]:
        """1-based epoch whose test accuracy first exceeds threshold, or None."""
        for epoch, accuracy in enumerate(self.accuracy, start=1):
            if accuracy > threshold:
                return epoch
        return None

    def mean_update_seconds(self) -> float:
        timed = [seconds for seconds in self.update_seconds if seconds > 0.0]
        return float(np.mean(timed)) if timed else 0.0

    def to_csv(self, path: str) -> str:
        layers = len(self.edge_counts[0]) if self.edge_counts else 0
        table = pd.DataFrame(
            {
                "epoch": np.arange(1, len(self) + 1, dtype=np.int64),
                "accuracy": np.asarray(self.accuracy, dtype=np.float64),
                "loss": np.asarray(self.loss, dtype=np.float64),
                "update_seconds": np.asarray(self.update_seconds, dtype=np.float64),
            }
        )
        edges = np.asarray(self.edge_counts, dtype=np.int64).reshape(len(self), layers)
        for k in range(layers):
            table[f"edges_l{k + 1}"] = edges[:, k]
        with open(path, "w", newline="") as handle:
            for key in sorted(self.metadata):
                handle.write(f"# {key}: {self.metadata[key]}\n")
            table.to_csv(handle, index=False, lineterminator="\n")
        return path

    @classmethod
    def from_csv(cls, path: str) -> "TrainingHistory":
        history = cls()
        with open(path, "r", newline="") as handle:
            for line in handle:
                if not line.startswith("# "):
                    break
                key, _, value = line[2:].rstrip("\n").partition(": ")
                history.metadata[key] = value
        table = pd.read_csv(path, comment="#", float_precision="round_trip")
        edge_columns = [column for column in table.columns if column.startswith("edges_l")]
        history.accuracy = table["accuracy"].astype(float).tolist()
        history.loss = table["loss"].astype(float).tolist()
        history.update_seconds = table["update_seconds"].astype(float).tolist()
        history.edge_counts = table[edge_columns].astype(int).to_numpy().tolist()
        return history

    @classmethod
    def from_run_dir(cls, run_dir: str) -> "TrainingHistory":
        """
        History of a run directory, with per-epoch update durations taken from its topology
        log when the history itself was written without timings.
        """
        history = cls.from_csv(os.path.join(run_dir, HISTORY_FILE))
        log_path = os.path.join(run_dir, TOPOLOGY_LOG_FILE)
        if os.path.exists(log_path) and not any(seconds > 0.0 for seconds in history.update_seconds):
            durations = epoch_update_seconds(log_path)
            history.update_seconds = [durations.get(epoch, 0.0) for epoch in range(1, len(history) + 1)]
        return history


def derive_run_seeds(seed: int) -> Tuple[int, np.random.SeedSequence, np.random.SeedSequence]:
    """Split a run seed into the initialization seed, the shuffle stream and the topology stream."""
    init_seq, shuffle_seq, topology_seq = np.random.SeedSequence(seed).spawn(3)
    return int(init_seq.generate_state(1)[0]), shuffle_seq, topology_seq


def evaluate(net: Network, data: LabeledImageSet, batch_size: int = EVAL_BATCH_SIZE) -> float:
    """Fraction of samples whose largest logit is the true class; ties go to the lowest class index."""
    correct = 0
    for start in range(0, len(data), batch_size):
        logits, _ = forward(net, data.images[start : start + batch_size])
        correct += int(np.sum(np.argmax(logits, axis=1) == data.labels[start : start + batch_size]))
    return correct / len(data)


def _run_metadata(config: TrainConfig, net: Network, origin: Optional[Sequence[int]]) -> Dict[str, str]:
    metadata = {
        "name": config.name,
        "dataset": config.dataset,
        "strategy": config.topology.strategy.value,
        "prune_fraction": repr(config.topology.prune_fraction),
        "seed": str(config.seed),
        "seed_lineage": " ".join(str(s) for s in net.seed_lineage),
        "optimizer": config.optimizer.kind,
    }
    if origin is not None:
        metadata["master_seed"] = str(origin[0])
        metadata["replica"] = str(origin[1])
    return metadata


def train(
    config: TrainConfig,
    train_set: Optional[LabeledImageSet] = None,
    test_set: Optional[LabeledImageSet] = None,
    out_dir: Optional[str] = None,
    origin: Optional[Sequence[int]] = None,
) -> Tuple[Network, TrainingHistory]:
    """
    Run one seeded training instance.
    :param config: Validated run configuration.
    :param train_set: Training data; loaded from config.dataset when both splits are omitted.
    :param test_set: Test data evaluated after every epoch.
    :param out_dir: When given, receives history.csv, topology.csv, checkpoints and final.npz.
    :param origin: (master seed, replica index) the run seed was spawned from, prepended to the seed lineage.
    :return: (final network, per-epoch history)
    """
    config.validate()
    if (train_set is None) != (test_set is None):
        raise ConfigInvalid("Pass both train_set and test_set, or neither to load config.dataset")
    if train_set is None:
        train_set, test_set = load_dataset(config.dataset, config.data_root, strict=config.strict_splits)
    train_set = train_set.head(config.train_limit)
    test_set = test_set.head(config.test_limit)

    init_seed, shuffle_seq, topology_seq = derive_run_seeds(config.seed)
    net = init_network(config.layer_sizes, train_set.class_count, config.density, init_seed)
    net.seed_lineage = [int(s) for s in origin or []] + [int(config.seed), init_seed]
    optimizer = build_optimizer(
        config.optimizer.kind,
        net,
        config.optimizer.learning_rate,
        config.optimizer.momentum,
        config.optimizer.beta1,
        config.optimizer.beta2,
    )
    shuffle_rng = np.random.default_rng(shuffle_seq)
    topology_rng = np.random.default_rng(
        topology_seq if config.topology.seed is None else config.topology.seed
    )
    if config.topology.enabled and config.topology.strategy is not RegrowthStrategy.RLR:
        warmup()

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        topology_log = os.path.join(out_dir, TOPOLOGY_LOG_FILE)
        if os.path.exists(topology_log):
            os.remove(topology_log)

    history = TrainingHistory(metadata=_run_metadata(config, net, origin))
    logging.info(
        f"Training {config.name}: {config.dataset}, layers {config.layer_sizes}, density {config.density}, "
        f"strategy {config.topology.strategy.value}, seed {config.seed}, edges {net.edge_counts()}"
    )

    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = shuffle_rng.permutation(len(train_set))
        losses = []
        batches = range(0, len(order), config.batch_size)
        for first in tqdm(
            batches, desc=f"{config.name} epoch {epoch + 1}", leave=False, disable=None if config.progress else True
        ):
            index = order[first : first + config.batch_size]
            _, cache = forward(net, train_set.images[index])
            loss, grads = loss_and_grad(net, cache, train_set.labels[index])
            optimizer.step(net, grads)
            losses.append(loss)

        accuracy = evaluate(net, test_set)

        update_seconds = 0.0
        if config.topology.is_due(epoch, config.epochs):
            net, stats = topology_update(net, config.topology, topology_rng, epoch=epoch + 1)
            optimizer.rebind(net, [row.added_keys for row in stats.layers])
            update_seconds = stats.total_seconds
            if out_dir:
                append_update_log(os.path.join(out_dir, TOPOLOGY_LOG_FILE), stats)

        history.append(
            accuracy, float(np.mean(losses)), update_seconds if config.record_timing else 0.0, net.edge_counts()
        )
        logging.info(
            f"{config.name} epoch {epoch + 1}/{config.epochs}: accuracy {accuracy:.4f}, "
            f"loss {history.loss[-1]:.4f}, update {update_seconds:.3f}s, epoch {time.perf_counter() - start:.1f}s"
        )

        if out_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_snapshot(
                net,
                os.path.join(out_dir, CHECKPOINT_DIR, f"epoch_{epoch + 1:04d}"),
                metadata={**history.metadata, "epoch": epoch + 1},
            )

    if out_dir:
        history.to_csv(os.path.join(out_dir, HISTORY_FILE))
        save_snapshot(
            net,
            os.path.join(out_dir, FINAL_SNAPSHOT),
            metadata={**history.metadata, "epoch": config.epochs, "accuracy": history.accuracy[-1]},
        )
    return net, history
