"""
Link Prediction Module
- Scores non-edges of one sparse layer by their length-3 paths.
- CH3-L3 weighs each path by the external degrees of its two intermediate neurons,
  L3 counting just counts the paths.

Within a layer, in-neurons u and out-neurons v form a bipartite graph. An L3 path
between a non-adjacent pair (u, v) is u - i - j - v with i an out-neuron adjacent
to u, j != u an in-neuron adjacent to i, and v adjacent to j.
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import scipy.sparse as sp
from numba import njit

from errors import CandidateIsEdge
from sparse_network import SparseLayer


@dataclass(frozen=True)
class CandidateScore:
    in_index: int
    out_index: int
    score: float


@dataclass(frozen=True)
class LayerAdjacency:
    """Both CSR orientations of a layer's bipartite graph."""

    # in-neuron u -> sorted out-neighbours
    in_indptr: np.ndarray
    in_neighbors: np.ndarray
    # out-neuron v -> sorted in-neighbours
    out_indptr: np.ndarray
    out_neighbors: np.ndarray

    @classmethod
    def from_layer(cls, layer: SparseLayer) -> "LayerAdjacency":
        order = np.lexsort((layer.out_index, layer.in_index))
        in_indptr = np.zeros(layer.in_size + 1, dtype=np.int64)
        np.cumsum(np.bincount(layer.in_index, minlength=layer.in_size), out=in_indptr[1:])
        return cls(
            in_indptr=in_indptr,
            in_neighbors=np.ascontiguousarray(layer.out_index[order]),
            out_indptr=np.ascontiguousarray(layer.indptr),
            out_neighbors=np.ascontiguousarray(layer.in_index),
        )


@njit(cache=True)
def _l3_kernel(in_indptr, in_neighbors, out_indptr, out_neighbors, cand_in, cand_out, weighted):
    in_size = in_indptr.shape[0] - 1
    out_size = out_indptr.shape[0] - 1
    count = cand_in.shape[0]
    scores = np.zeros(count, dtype=np.float64)

    # stamp arrays hold the candidate index that last marked a neuron
    u_mark = np.full(out_size, -1, dtype=np.int64)
    i_mark = np.full(out_size, -1, dtype=np.int64)
    j_mark = np.full(in_size, -1, dtype=np.int64)
    i_done = np.full(out_size, -1, dtype=np.int64)
    j_done = np.full(in_size, -1, dtype=np.int64)
    de_out = np.zeros(out_size, dtype=np.int64)
    de_in = np.zeros(in_size, dtype=np.int64)

    # every path uses a distinct (j, i) edge
    capacity = max(in_neighbors.shape[0], 1)
    path_i = np.empty(capacity, dtype=np.int64)
    path_j = np.empty(capacity, dtype=np.int64)

    for c in range(count):
        u = cand_in[c]
        v = cand_out[c]
        for a in range(in_indptr[u], in_indptr[u + 1]):
            u_mark[in_neighbors[a]] = c

        paths = 0
        for a in range(out_indptr[v], out_indptr[v + 1]):
            j = out_neighbors[a]
            if j == u:
                continue
            for b in range(in_indptr[j], in_indptr[j + 1]):
                i = in_neighbors[b]
                if u_mark[i] == c:
                    path_i[paths] = i
                    path_j[paths] = j
                    paths += 1
                    i_mark[i] = c
                    j_mark[j] = c

        if paths == 0:
            continue
        if not weighted:
            scores[c] = paths
            continue

        # external degree: links leaving the local community {u, v} + I + J
        for p in range(paths):
            i = path_i[p]
            if i_done[i] != c:
                i_done[i] = c
                internal = 0
                for a in range(out_indptr[i], out_indptr[i + 1]):
                    x = out_neighbors[a]
                    if x == u or j_mark[x] == c:
                        internal += 1
                de_out[i] = out_indptr[i + 1] - out_indptr[i] - internal
            j = path_j[p]
            if j_done[j] != c:
                j_done[j] = c
                internal = 0
                for b in range(in_indptr[j], in_indptr[j + 1]):
                    y = in_neighbors[b]
                    if y == v or i_mark[y] == c:
                        internal += 1
                de_in[j] = in_indptr[j + 1] - in_indptr[j] - internal

        total = 0.0
        for p in range(paths):
            total += 1.0 / np.sqrt((1.0 + de_out[path_i[p]]) * (1.0 + de_in[path_j[p]]))
        scores[c] = total

    return scores


def warmup() -> None:
    """Compile the path kernel once so timed topology updates exclude JIT compilation."""
    layer = SparseLayer(2, 2, [0, 1, 1], [0, 0, 1], [1.0, 1.0, 1.0], [0.0, 0.0])
    adjacency = LayerAdjacency.from_layer(layer)
    cand = np.array([0], dtype=np.int64)
    out = np.array([1], dtype=np.int64)
    for weighted in (True, False):
        _l3_kernel(
            adjacency.in_indptr,
            adjacency.in_neighbors,
            adjacency.out_indptr,
            adjacency.out_neighbors,
            cand,
            out,
            weighted,
        )
    logging.debug("Link prediction kernel compiled")


def _check_candidates(layer: SparseLayer, cand_in: np.ndarray, cand_out: np.ndarray) -> None:
    if len(cand_in) != len(cand_out):
        raise ValueError("Candidate index arrays must have the same length")
    existing = layer.contains(cand_in, cand_out)
    if np.any(existing):
        k = int(np.flatnonzero(existing)[0])
        raise CandidateIsEdge(f"Candidate {cand_in[k]}->{cand_out[k]} is already an edge")


def path_scores(layer: SparseLayer, cand_in, cand_out, weighted: bool) -> np.ndarray:
    """
    Array form of the scorers.
    :param weighted: True for CH3-L3, False for the plain L3 path count.
    """
    cand_in = np.ascontiguousarray(cand_in, dtype=np.int64)
    cand_out = np.ascontiguousarray(cand_out, dtype=np.int64)
    _check_candidates(layer, cand_in, cand_out)
    if len(cand_in) == 0:
        return np.zeros(0)
    adjacency = LayerAdjacency.from_layer(layer)
    return _l3_kernel(
        adjacency.in_indptr,
        adjacency.in_neighbors,
        adjacency.out_indptr,
        adjacency.out_neighbors,
        cand_in,
        cand_out,
        weighted,
    )


def _as_pairs(candidates) -> Tuple[np.ndarray, np.ndarray]:
    pairs = np.asarray(candidates, dtype=np.int64).reshape(-1, 2)
    return pairs[:, 0], pairs[:, 1]


def _to_scores(cand_in, cand_out, scores) -> List[CandidateScore]:
    return [CandidateScore(int(u), int(v), float(s)) for u, v, s in zip(cand_in, cand_out, scores)]


def score_ch3l3(layer: SparseLayer, candidates) -> List[CandidateScore]:
    """
    CH3-L3 likelihood of (in_index, out_index) non-edges.
    Each L3 path u-i-j-v contributes 1/sqrt((1+de(i)) * (1+de(j))), where de(x) counts the
    links of x leaving the local community (u, v and every intermediate neuron on u-v L3 paths).
    """
    cand_in, cand_out = _as_pairs(candidates)
    return _to_scores(cand_in, cand_out, path_scores(layer, cand_in, cand_out, weighted=True))


def score_l3_count(layer: SparseLayer, candidates) -> List[CandidateScore]:
    """Number of L3 paths between each (in_index, out_index) non-edge."""
    cand_in, cand_out = _as_pairs(candidates)
    return _to_scores(cand_in, cand_out, path_scores(layer, cand_in, cand_out, weighted=False))


def l3_candidates(layer: SparseLayer) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Every non-edge with at least one L3 path, in (in_index, out_index) order.
    :return: (in_index, out_index, path count)
    """
    ones = np.ones(layer.edge_count, dtype=np.int64)
    adjacency = sp.csr_matrix((ones, (layer.in_index, layer.out_index)), shape=(layer.in_size, layer.out_size))
    # (A A^T A)[u, v] counts u-i-j-v walks; walks with j == u only reach existing edges
    walks = (adjacency @ (adjacency.T @ adjacency)).tocoo()

    keys = walks.col.astype(np.int64) * layer.in_size + walks.row.astype(np.int64)
    keep = (walks.data > 0) & ~np.isin(keys, layer.keys())
    cand_in = walks.row[keep].astype(np.int64)
    cand_out = walks.col[keep].astype(np.int64)
    counts = walks.data[keep].astype(np.float64)

    order = np.lexsort((cand_out, cand_in))
    return cand_in[order], cand_out[order], counts[order]
