"""
Sparse Network Module
- Sparse feed-forward layers stored as edge lists grouped by output neuron.
- Exact forward activations, softmax cross-entropy and gradients restricted to existing links.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from errors import DuplicateEdge, EdgeOutOfRange, InvalidDensity, ShapeMismatch, ZeroFanIn

DEFAULT_LAYER_SIZES = (784, 1000, 1000, 1000)
DEFAULT_DENSITY = 0.01

# Guards floor() against products like 0.1 * 30 = 2.9999999999999996
_FLOOR_EPS = 1e-9


def fraction_count(fraction: float, total: int) -> int:
    """Number of items a fraction selects out of total, rounded down."""
    return int(math.floor(fraction * total + _FLOOR_EPS))


def kaiming_std(fan_in: int) -> float:
    if fan_in < 1:
        raise ZeroFanIn(f"Kaiming initialization needs a positive fan-in, got {fan_in}")
    return math.sqrt(2.0 / fan_in)


def kaiming_sample(fan_in: int, rng: np.random.Generator, size=None):
    """
    Draw weights from N(0, 2/fan_in).
    :param fan_in: Size of the preceding neuron layer.
    :param rng: numpy Generator owning the draw.
    :param size: Optional output shape; a scalar is returned when omitted.
    """
    return rng.normal(0.0, kaiming_std(fan_in), size)


@dataclass
class SparseLayer:
    """
    Bipartite weighted edge set between two consecutive neuron layers.

    Edges are kept sorted by (out_index, in_index), which is exactly CSR order of the
    out_size x in_size weight matrix, so `weights` doubles as the CSR data array.
    """

    in_size: int
    out_size: int
    in_index: np.ndarray
    out_index: np.ndarray
    weights: np.ndarray
    bias: np.ndarray
    indptr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.in_index = np.asarray(self.in_index, dtype=np.int64).ravel()
        self.out_index = np.asarray(self.out_index, dtype=np.int64).ravel()
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.bias = np.asarray(self.bias, dtype=np.float64).ravel()

        count = len(self.weights)
        if len(self.in_index) != count or len(self.out_index) != count:
            raise ShapeMismatch("in_index, out_index and weights must have the same length")
        if len(self.bias) != self.out_size:
            raise ShapeMismatch(f"Bias has {len(self.bias)} entries, layer has {self.out_size} outputs")
        if count and (
            self.in_index.min() < 0
            or self.in_index.max() >= self.in_size
            or self.out_index.min() < 0
            or self.out_index.max() >= self.out_size
        ):
            raise EdgeOutOfRange(f"Edge index outside a {self.in_size} x {self.out_size} layer")

        keys = self.keys()
        if count > 1 and not np.all(keys[1:] > keys[:-1]):
            order = np.argsort(keys, kind="stable")
            self.in_index = self.in_index[order]
            self.out_index = self.out_index[order]
            self.weights = self.weights[order]
            keys = keys[order]
            duplicated = keys[1:] == keys[:-1]
            if np.any(duplicated):
                key = int(keys[1:][duplicated][0])
                raise DuplicateEdge(f"Duplicate edge {key % self.in_size}->{key // self.in_size}")

        self.indptr = np.zeros(self.out_size + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.out_index, minlength=self.out_size), out=self.indptr[1:])

    @classmethod
    def empty(cls, in_size: int, out_size: int) -> "SparseLayer":
        none = np.empty(0, dtype=np.int64)
        return cls(in_size, out_size, none, none, np.empty(0), np.zeros(out_size))

    @property
    def edge_count(self) -> int:
        return len(self.weights)

    @property
    def possible_edges(self) -> int:
        return self.in_size * self.out_size

    def keys(self) -> np.ndarray:
        """Linear edge keys out_index * in_size + in_index (sorted ascending)."""
        return self.out_index * self.in_size + self.in_index

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.weights, self.in_index, self.indptr), shape=(self.out_size, self.in_size)
        )

    def in_degrees(self) -> np.ndarray:
        """Edge count per output neuron."""
        return np.diff(self.indptr)

    def out_degrees(self) -> np.ndarray:
        """Edge count per input neuron."""
        return np.bincount(self.in_index, minlength=self.in_size)

    def contains(self, in_index, out_index) -> np.ndarray:
        query = np.asarray(out_index, dtype=np.int64) * self.in_size + np.asarray(in_index, dtype=np.int64)
        return np.isin(query, self.keys())

    def copy(self) -> "SparseLayer":
        return SparseLayer(
            self.in_size,
            self.out_size,
            self.in_index.copy(),
            self.out_index.copy(),
            self.weights.copy(),
            self.bias.copy(),
        )

    def without(self, remove_mask: np.ndarray) -> "SparseLayer":
        keep = ~np.asarray(remove_mask, dtype=bool)
        return SparseLayer(
            self.in_size,
            self.out_size,
            self.in_index[keep],
            self.out_index[keep],
            self.weights[keep],
            self.bias.copy(),
        )

    def with_edges(self, in_index, out_index, weights) -> "SparseLayer":
        """New layer with extra edges; an edge that already exists raises DuplicateEdge."""
        return SparseLayer(
            self.in_size,
            self.out_size,
            np.concatenate([self.in_index, np.asarray(in_index, dtype=np.int64)]),
            np.concatenate([self.out_index, np.asarray(out_index, dtype=np.int64)]),
            np.concatenate([self.weights, np.asarray(weights, dtype=np.float64)]),
            self.bias.copy(),
        )

    def with_weights(self, weights: np.ndarray) -> "SparseLayer":
        layer = self.copy()
        layer.weights = np.asarray(weights, dtype=np.float64).copy()
        return layer


@dataclass
class DenseReadout:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).ravel()
        if self.weight.ndim != 2 or self.weight.shape[0] != len(self.bias):
            raise ShapeMismatch(f"Readout weight {self.weight.shape} does not match bias {self.bias.shape}")

    @property
    def in_size(self) -> int:
        return self.weight.shape[1]

    @property
    def out_size(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "DenseReadout":
        return DenseReadout(self.weight.copy(), self.bias.copy())


@dataclass
class Network:
    """Ordered sparse rectifier layers followed by one dense linear readout."""

    layers: List[SparseLayer]
    readout: DenseReadout
    seed_lineage: List[int] = field(default_factory=list)
    step_count: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ShapeMismatch("A network needs at least one sparse layer")
        for previous, current in zip(self.layers[:-1], self.layers[1:]):
            if previous.out_size != current.in_size:
                raise ShapeMismatch(f"Layer sizes {previous.out_size} and {current.in_size} are incompatible")
        if self.readout.in_size != self.layers[-1].out_size:
            raise ShapeMismatch(
                f"Readout expects {self.readout.in_size} inputs, last hidden layer has {self.layers[-1].out_size}"
            )

    @property
    def input_size(self) -> int:
        return self.layers[0].in_size

    @property
    def class_count(self) -> int:
        return self.readout.out_size

    @property
    def layer_sizes(self) -> List[int]:
        return [self.layers[0].in_size] + [layer.out_size for layer in self.layers]

    def edge_counts(self) -> List[int]:
        return [layer.edge_count for layer in self.layers]

    def density(self) -> float:
        possible = sum(layer.possible_edges for layer in self.layers)
        return sum(self.edge_counts()) / possible

    def parameter_count(self) -> int:
        sparse = sum(layer.edge_count + layer.out_size for layer in self.layers)
        return sparse + self.readout.weight.size + self.readout.bias.size

    def parameters(self) -> List[np.ndarray]:
        """Trainable arrays in the order Gradients.as_list() uses."""
        return (
            [layer.weights for layer in self.layers]
            + [layer.bias for layer in self.layers]
            + [self.readout.weight, self.readout.bias]
        )

    def copy(self) -> "Network":
        return Network(
            [layer.copy() for layer in self.layers],
            self.readout.copy(),
            list(self.seed_lineage),
            self.step_count,
        )


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    last_hidden: np.ndarray
    logits: np.ndarray
    # multiply-accumulate terms spent in sparse layers
    mac_count: int = 0


@dataclass
class Gradients:
    sparse_weights: List[np.ndarray]
    sparse_biases: List[np.ndarray]
    readout_weight: np.ndarray
    readout_bias: np.ndarray

    def as_list(self) -> List[np.ndarray]:
        return self.sparse_weights + self.sparse_biases + [self.readout_weight, self.readout_bias]


def init_network(
    layer_sizes: Sequence[int] = DEFAULT_LAYER_SIZES,
    class_count: int = 10,
    density: float = DEFAULT_DENSITY,
    seed: Optional[int] = None,
) -> Network:
    """
    Build an Erdos-Renyi sparse network with Kaiming-initialized weights.
    :param layer_sizes: Input size followed by every hidden layer size.
    :param class_count: Width of the dense readout.
    :param density: Fraction of possible links present in each sparse layer.
    :param seed: Seed of the numpy Generator used for topology and weights.
    """
    if not 0.0 < density <= 1.0:
        raise InvalidDensity(f"Density must lie in (0, 1], got {density}")
    if len(layer_sizes) < 2:
        raise ShapeMismatch("layer_sizes needs the input size and at least one hidden size")

    rng = np.random.default_rng(seed)
    layers = []
    for in_size, out_size in zip(layer_sizes[:-1], layer_sizes[1:]):
        possible = in_size * out_size
        count = int(round(density * possible))
        keys = np.sort(rng.choice(possible, size=count, replace=False))
        out_index, in_index = np.divmod(keys, in_size)
        weights = kaiming_sample(in_size, rng, size=count)
        layers.append(SparseLayer(in_size, out_size, in_index, out_index, weights, np.zeros(out_size)))

    hidden = layer_sizes[-1]
    readout = DenseReadout(kaiming_sample(hidden, rng, size=(class_count, hidden)), np.zeros(class_count))
    return Network(layers, readout, seed_lineage=[] if seed is None else [int(seed)])


def forward(net: Network, batch: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """
    Rectified sparse layers followed by the linear readout.
    :param batch: B x input_size matrix.
    :return: (B x class_count logits, cache for loss_and_grad)
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch.reshape(1, -1)
    if batch.ndim != 2 or batch.shape[1] != net.input_size:
        raise ShapeMismatch(f"Batch has shape {batch.shape}, network expects {net.input_size} columns")

    inputs, pre_activations = [], []
    macs = 0
    hidden = batch
    for layer in net.layers:
        inputs.append(hidden)
        z = np.asarray(layer.to_csr() @ hidden.T).T + layer.bias
        pre_activations.append(z)
        hidden = np.maximum(z, 0.0)
        macs += layer.edge_count * len(batch)

    logits = hidden @ net.readout.weight.T + net.readout.bias
    return logits, ForwardCache(inputs, pre_activations, hidden, logits, macs)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    count = len(labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(count)
    loss = float(-log_probs[rows, labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[rows, labels] -= 1.0
    return loss, dlogits / count


def loss_and_grad(net: Network, cache: ForwardCache, labels) -> Tuple[float, Gradients]:
    """
    Softmax cross-entropy of a forward pass and gradients for every trainable parameter.
    Sparse weight gradients are aligned with each layer's edge arrays, so absent links have no slot.
    """
    labels = np.asarray(labels, dtype=np.int64)
    logits = cache.logits
    if len(cache.pre_activations) != len(net.layers) or logits.shape[1] != net.class_count:
        raise ShapeMismatch("Forward cache was not produced by this network")
    if labels.shape != (len(logits),):
        raise ShapeMismatch(f"Expected {len(logits)} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= net.class_count):
        raise ShapeMismatch(f"Labels must lie in [0, {net.class_count})")

    loss, dlogits = softmax_cross_entropy(logits, labels)
    readout_weight = dlogits.T @ cache.last_hidden
    readout_bias = dlogits.sum(axis=0)
    delta = dlogits @ net.readout.weight

    sparse_weights: List[np.ndarray] = [np.empty(0)] * len(net.layers)
    sparse_biases: List[np.ndarray] = [np.empty(0)] * len(net.layers)
    for k in reversed(range(len(net.layers))):
        layer = net.layers[k]
        dz = delta * (cache.pre_activations[k] > 0.0)
        x = cache.inputs[k]
        sparse_weights[k] = np.einsum("bi,bi->i", dz[:, layer.out_index], x[:, layer.in_index])
        sparse_biases[k] = dz.sum(axis=0)
        if k > 0:
            delta = np.asarray(layer.to_csr().T @ dz.T).T

    return loss, Gradients(sparse_weights, sparse_biases, readout_weight, readout_bias)
