"""One-level first-neighbour (FINCH) clustering of clients on model parameters.

Only model parameters are used, so no client data leaves the clients, and no
cluster count has to be chosen.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import Model, cosine_matrix, feature_extractor_vector, first_layer_vector


@dataclass(frozen=True)
class ClusterAssignment:
    assignment: tuple[int, ...]
    num_clusters: int
    members: tuple[tuple[int, ...], ...]

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "ClusterAssignment":
        """Relabel arbitrary cluster ids so clusters are ordered by smallest member."""
        remap: dict[int, int] = {}
        for lab in labels:
            remap.setdefault(int(lab), len(remap))
        assignment = tuple(remap[int(lab)] for lab in labels)
        members = tuple(
            tuple(k for k, c in enumerate(assignment) if c == cid) for cid in range(len(remap))
        )
        return cls(assignment, len(remap), members)

    @property
    def num_clients(self) -> int:
        return len(self.assignment)


def nearest_neighbor(vectors) -> np.ndarray:
    """Index of each row's most cosine-similar other row (lowest index on ties)."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("nearest_neighbor needs at least two vectors")
    sim = cosine_matrix(x, x)
    np.fill_diagonal(sim, -np.inf)
    return np.argmax(sim, axis=1)


def finch_adjacency(kappa) -> np.ndarray:
    """Link k and l when one is the other's neighbour or they share a neighbour."""
    kappa = np.asarray(kappa)
    k = kappa.size
    idx = np.arange(k)
    adj = (kappa[:, None] == idx[None, :]) | (kappa[None, :] == idx[:, None])
    adj |= kappa[:, None] == kappa[None, :]
    np.fill_diagonal(adj, False)
    return adj


def connected_components(adjacency) -> ClusterAssignment:
    adj = np.asarray(adjacency, dtype=bool)
    n = adj.shape[0]
    labels = [-1] * n
    current = 0
    for start in range(n):
        if labels[start] >= 0:
            continue
        stack = [start]
        labels[start] = current
        while stack:
            node = stack.pop()
            for nb in np.flatnonzero(adj[node]):
                if labels[nb] < 0:
                    labels[nb] = current
                    stack.append(nb)
        current += 1
    return ClusterAssignment.from_labels(labels)


def finch_partition(vectors) -> ClusterAssignment:
    x = np.asarray(vectors, dtype=np.float64)
    if x.shape[0] < 2:
        return ClusterAssignment.from_labels([0] * x.shape[0])
    return connected_components(finch_adjacency(nearest_neighbor(x)))


LAYER_SELECTORS: dict[str, Callable[[Model], np.ndarray]] = {
    "first": lambda m: first_layer_vector(m).values,
    "all": lambda m: feature_extractor_vector(m).values,
}


def cluster_clients(models: Sequence[Model], layers: str = "first") -> ClusterAssignment:
    """FINCH on each client's parameter signature (first feature layer by default)."""
    select = LAYER_SELECTORS[layers]
    return finch_partition(np.stack([select(m) for m in models]))


def purity(assignment: ClusterAssignment, truth: Sequence[int]) -> float:
    """Fraction of clients whose cluster's majority ground-truth group matches their own."""
    truth = np.asarray(truth)
    hits = 0
    for members in assignment.members:
        _, counts = np.unique(truth[list(members)], return_counts=True)
        hits += counts.max()
    return hits / len(truth)
