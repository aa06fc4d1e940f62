"""
Optimizers Module
- Adam and momentum SGD over the trainable arrays of a sparse network.
- Moment state of sparse weights follows the edges across topology updates.
"""

import logging
from typing import List, Optional, Sequence

import numpy as np

from errors import ConfigInvalid
from sparse_network import Gradients, Network

OPTIMIZER_KINDS = ("adam", "sgd")


class Optimizer:
    """Shared bookkeeping: one state slot list per moment, aligned with Network.parameters()."""

    state_names: Sequence[str] = ()

    def __init__(self, net: Network, learning_rate: float):
        if learning_rate <= 0.0:
            raise ConfigInvalid(f"learning_rate must be positive, got {learning_rate}")
        self.learning_rate = learning_rate
        self.state = {name: [np.zeros_like(p) for p in net.parameters()] for name in self.state_names}
        self._edge_keys = [layer.keys().copy() for layer in net.layers]

    def step(self, net: Network, grads: Gradients) -> None:
        self._apply(net.parameters(), grads.as_list())
        net.step_count += 1

    def _apply(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        raise NotImplementedError

    def rebind(self, net: Network, added_keys: Optional[List[np.ndarray]] = None) -> None:
        """
        Re-align sparse weight moments with a rewired network.
        Surviving edges keep their moments; regrown and pruned edges start from zero.
        :param added_keys: Per-layer keys of regrown edges, from UpdateStats.
        """
        for k, layer in enumerate(net.layers):
            old_keys = self._edge_keys[k]
            new_keys = layer.keys()
            position = np.searchsorted(old_keys, new_keys)
            position = np.minimum(position, max(len(old_keys) - 1, 0))
            kept = np.zeros(len(new_keys), dtype=bool)
            if len(old_keys):
                kept = old_keys[position] == new_keys
            if added_keys is not None and len(added_keys[k]):
                kept &= ~np.isin(new_keys, added_keys[k])
            for slots in self.state.values():
                remapped = np.zeros(len(new_keys))
                remapped[kept] = slots[k][position[kept]]
                slots[k] = remapped
            self._edge_keys[k] = new_keys.copy()
        logging.debug(f"Optimizer state rebound to edge counts {net.edge_counts()}")


class Adam(Optimizer):
    state_names = ("m", "v")

    def __init__(
        self,
        net: Network,
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        super().__init__(net, learning_rate)
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigInvalid(f"Adam decay rates must lie in [0, 1), got {beta1}, {beta2}")
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0

    def _apply(self, params, grads):
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.state["m"], self.state["v"]):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.epsilon)


class MomentumSGD(Optimizer):
    state_names = ("velocity",)

    def __init__(self, net: Network, learning_rate: float = 0.01, momentum: float = 0.9):
        super().__init__(net, learning_rate)
        if not 0.0 <= momentum < 1.0:
            raise ConfigInvalid(f"momentum must lie in [0, 1), got {momentum}")
        self.momentum = momentum

    def _apply(self, params, grads):
        for p, g, velocity in zip(params, grads, self.state["velocity"]):
            velocity *= self.momentum
            velocity -= self.learning_rate * g
            p += velocity


def build_optimizer(
    kind: str,
    net: Network,
    learning_rate: float,
    momentum: float = 0.9,
    beta1: float = 0.9,
    beta2: float = 0.999,
) -> Optimizer:
    if kind == "adam":
        return Adam(net, learning_rate, beta1, beta2)
    if kind == "sgd":
        return MomentumSGD(net, learning_rate, momentum)
    raise ConfigInvalid(f"optimizer must be one of {OPTIMIZER_KINDS}, got {kind!r}")
